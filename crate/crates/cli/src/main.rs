//! Command-line driver for single-reference pose estimation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use refpose_cli::run::{
    self, EstimateArgs, FeatureModeArg, GradCheckArgs, Precision, ScanCheckArgs,
    SynthEvalArgs, TrainToyArgs,
};

#[derive(Parser)]
#[command(name = "refpose", version, about = "Single-reference 6D pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the query pose from reference and query RGB-D files.
    Estimate {
        #[arg(long)]
        ref_color: PathBuf,
        #[arg(long)]
        ref_depth: PathBuf,
        #[arg(long)]
        ref_mask: PathBuf,
        #[arg(long)]
        ref_pose: PathBuf,
        #[arg(long)]
        query_color: PathBuf,
        #[arg(long)]
        query_depth: PathBuf,
        #[arg(long)]
        query_mask: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        /// oracle, untrained, or weights:<path>
        #[arg(long, default_value = "oracle")]
        feature_mode: FeatureModeArg,
        #[arg(long, default_value_t = 3)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Points per resampled cloud.
        #[arg(long, default_value_t = 2048)]
        points: usize,
        /// Output directory (pose.txt and trace.txt are written here).
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Also write a per-iteration trace file.
        #[arg(long, default_value_t = false)]
        trace: bool,
    },
    /// Generate synthetic pairs and evaluate the pipeline end to end.
    SynthEval {
        #[arg(long, default_value_t = 20)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        iters: usize,
        /// oracle, untrained, or weights:<path>
        #[arg(long, default_value = "oracle")]
        feature_mode: FeatureModeArg,
        #[arg(long, default_value_t = 1024)]
        points: usize,
        /// Max reference-query rotation gap, degrees.
        #[arg(long, default_value_t = 30.0)]
        gap_rotation: f64,
        /// Max reference-query translation gap, meters.
        #[arg(long, default_value_t = 0.05)]
        gap_translation: f64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 1.5)]
        splat_radius: f64,
        /// Point-features-only ablation (skip image fusion).
        #[arg(long, default_value_t = false)]
        no_rgb: bool,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Verify the selective scan against the naive per-step oracle.
    ScanCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 2048)]
        max_len: usize,
        #[arg(long, default_value_t = 32)]
        max_state: usize,
        #[arg(long, value_enum, default_value_t = Precision::Single)]
        precision: Precision,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify the alignment-loss gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 10)]
        entries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the micro-scale training loop and report loss and accuracy.
    TrainToy {
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        learning_rate: f64,
    },
    /// Print the version.
    Version,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Estimate {
            ref_color,
            ref_depth,
            ref_mask,
            ref_pose,
            query_color,
            query_depth,
            query_mask,
            intrinsics,
            feature_mode,
            iters,
            seed,
            points,
            out_dir,
            trace,
        } => run::cmd_estimate(&EstimateArgs {
            ref_color,
            ref_depth,
            ref_mask,
            ref_pose,
            query_color,
            query_depth,
            query_mask,
            intrinsics,
            feature_mode,
            iters,
            seed,
            points,
            out_pose: out_dir.join("pose.txt"),
            trace: trace.then(|| out_dir.join("trace.txt")),
        }),
        Command::SynthEval {
            pairs,
            seed,
            iters,
            feature_mode,
            points,
            gap_rotation,
            gap_translation,
            threads,
            splat_radius,
            no_rgb,
            out_dir,
        } => run::cmd_synth_eval(&SynthEvalArgs {
            pairs,
            seed,
            iters,
            feature_mode,
            points,
            gap_rotation_deg: gap_rotation,
            gap_translation,
            threads,
            splat_radius,
            no_rgb,
            out: out_dir.join("report.txt"),
        }),
        Command::ScanCheck { instances, max_len, max_state, precision, seed } => {
            run::cmd_scan_check(&ScanCheckArgs { instances, max_len, max_state, precision, seed })
        }
        Command::Gradcheck { instances, entries, seed } => {
            run::cmd_gradcheck(&GradCheckArgs { instances, entries, seed })
        }
        Command::TrainToy { steps, seed, learning_rate } => {
            run::cmd_train_toy(&TrainToyArgs { steps, seed, learning_rate })
        }
        Command::Version => {
            println!("refpose {}", env!("CARGO_PKG_VERSION"));
            run::EXIT_OK
        }
    };
    ExitCode::from(code as u8)
}
