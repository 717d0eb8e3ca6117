//! Subcommand drivers. Each returns a process exit code: 0 success,
//! 2 input error, 3 pipeline failure, 4 check failure.

use std::path::{Path, PathBuf};

use rand::Rng;

use refpose_core::align::{
    self, loss_gradient, run_toy_training, AlignerWeights, ViewObservation,
};
use refpose_core::geom::{backproject, resample, CameraIntrinsics};
use refpose_core::rng::{seeded_rng, split_seed};
use refpose_core::seqmodel::ssm::{
    selective_scan, selective_scan_naive, softplus_inverse, SelectiveParams,
};
use refpose_core::synth::{eval_run, EvalConfig, FeatureMode, OracleProvider, PoseGap};
use refpose_core::tensor::Mat;
use refpose_core::view::{ColorImage, Mask};

use crate::io;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_PIPELINE: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

/// Feature source selected on the command line.
#[derive(Debug, Clone)]
pub enum FeatureModeArg {
    Oracle,
    Untrained,
    Weights(PathBuf),
}

impl std::str::FromStr for FeatureModeArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(FeatureModeArg::Oracle),
            "untrained" => Ok(FeatureModeArg::Untrained),
            other => match other.strip_prefix("weights:") {
                Some(path) if !path.is_empty() => {
                    Ok(FeatureModeArg::Weights(PathBuf::from(path)))
                }
                _ => Err(format!(
                    "`{other}` is not one of oracle, untrained, weights:<path>"
                )),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Precision {
    Single,
    Double,
}

fn input_error(err: impl std::fmt::Display) -> i32 {
    eprintln!("error: {err}");
    EXIT_INPUT
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

pub struct EstimateArgs {
    pub ref_color: PathBuf,
    pub ref_depth: PathBuf,
    pub ref_mask: PathBuf,
    pub ref_pose: PathBuf,
    pub query_color: PathBuf,
    pub query_depth: PathBuf,
    pub query_mask: PathBuf,
    pub intrinsics: PathBuf,
    pub feature_mode: FeatureModeArg,
    pub iters: usize,
    pub seed: u64,
    pub points: usize,
    pub out_pose: PathBuf,
    pub trace: Option<PathBuf>,
}

fn load_observation(
    color: &Path,
    depth: &Path,
    mask: &Path,
    intr: &CameraIntrinsics,
    model_input: usize,
    points: usize,
    seed: u64,
) -> Result<ViewObservation, String> {
    let image_full = io::read_color(color).map_err(|e| e.to_string())?;
    let depth_mm = io::read_depth_mm(depth).map_err(|e| e.to_string())?;
    let mask_full = io::read_mask(mask).map_err(|e| e.to_string())?;
    if depth_mm.width != intr.width || depth_mm.height != intr.height {
        return Err(format!(
            "{}: depth is {}x{}, intrinsics say {}x{}",
            depth.display(),
            depth_mm.width,
            depth_mm.height,
            intr.width,
            intr.height
        ));
    }
    if mask_full.width != depth_mm.width || mask_full.height != depth_mm.height {
        return Err(format!("{}: mask dimensions differ from depth", mask.display()));
    }

    let cloud_full =
        backproject(&depth_mm, &mask_full, intr, 0.001).map_err(|e| e.to_string())?;
    let mut cloud = resample(&cloud_full, points, seed).map_err(|e| e.to_string())?;

    // The image extractor runs at a fixed square resolution; remap the
    // per-point pixel provenance into that frame.
    let image = resize_color(&image_full, model_input, model_input);
    let mask_small = resize_mask(&mask_full, model_input, model_input);
    if let Some(px) = cloud.pixel_coords.as_mut() {
        for p in px.iter_mut() {
            p[0] = remap_pixel(p[0], depth_mm.width, model_input);
            p[1] = remap_pixel(p[1], depth_mm.height, model_input);
        }
    }
    Ok(ViewObservation { image, mask: mask_small, cloud_cam: cloud })
}

fn remap_pixel(v: u32, from: usize, to: usize) -> u32 {
    let x = (v as f64 + 0.5) * to as f64 / from as f64 - 0.5;
    (x.round().max(0.0) as u32).min(to as u32 - 1)
}

fn resize_color(src: &ColorImage, w: usize, h: usize) -> ColorImage {
    if src.width == w && src.height == h {
        return src.clone();
    }
    let mut out = ColorImage::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let sx = ((x as f64 + 0.5) * src.width as f64 / w as f64 - 0.5)
                .clamp(0.0, (src.width - 1) as f64);
            let sy = ((y as f64 + 0.5) * src.height as f64 / h as f64 - 0.5)
                .clamp(0.0, (src.height - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(src.width - 1), (y0 + 1).min(src.height - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            let mut rgb = [0.0f32; 3];
            for c in 0..3 {
                let p00 = src.at(x0, y0)[c];
                let p01 = src.at(x1, y0)[c];
                let p10 = src.at(x0, y1)[c];
                let p11 = src.at(x1, y1)[c];
                let top = p00 + fx * (p01 - p00);
                let bot = p10 + fx * (p11 - p10);
                rgb[c] = top + fy * (bot - top);
            }
            out.set(x, y, rgb);
        }
    }
    out
}

fn resize_mask(src: &Mask, w: usize, h: usize) -> Mask {
    if src.width == w && src.height == h {
        return src.clone();
    }
    let mut out = Mask::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let sx = ((x as f64 + 0.5) * src.width as f64 / w as f64 - 0.5)
                .round()
                .clamp(0.0, (src.width - 1) as f64) as usize;
            let sy = ((y as f64 + 0.5) * src.height as f64 / h as f64 - 0.5)
                .round()
                .clamp(0.0, (src.height - 1) as f64) as usize;
            out.set(x, y, src.at(sx, sy));
        }
    }
    out
}

pub fn cmd_estimate(args: &EstimateArgs) -> i32 {
    let intr = match io::read_intrinsics(&args.intrinsics) {
        Ok(v) => v,
        Err(e) => return input_error(e),
    };
    let ref_pose = match io::read_pose(&args.ref_pose) {
        Ok(p) => p,
        Err(e) => return input_error(e),
    };
    if let Err(e) = ref_pose.validate() {
        return input_error(format!("{}: {e}", args.ref_pose.display()));
    }

    // Learned modes need the full architecture config; the oracle mode only
    // needs the image resolution for provenance remapping.
    let (bundle, oracle_channels) = match &args.feature_mode {
        FeatureModeArg::Oracle => (None, 256),
        FeatureModeArg::Untrained => {
            let mut cfg = refpose_core::seqmodel::ModelConfig::default();
            cfg.cloud_points = args.points;
            (
                Some(refpose_core::seqmodel::WeightBundle::seeded(
                    cfg,
                    split_seed(args.seed, 0xB0),
                )),
                0,
            )
        }
        FeatureModeArg::Weights(path) => match io::weights::read_weights(path) {
            Ok(b) => (Some(b), 0),
            Err(e) => return input_error(e),
        },
    };
    let model_input = bundle
        .as_ref()
        .map(|b| b.config().rgb.input)
        .unwrap_or(224);

    // Both views resample with the same stream so that identical inputs
    // produce identical clouds.
    let sample_seed = split_seed(args.seed, 1);
    let reference = match load_observation(
        &args.ref_color,
        &args.ref_depth,
        &args.ref_mask,
        &intr,
        model_input,
        args.points,
        sample_seed,
    ) {
        Ok(v) => v,
        Err(e) => return input_error(e),
    };
    let query = match load_observation(
        &args.query_color,
        &args.query_depth,
        &args.query_mask,
        &intr,
        model_input,
        args.points,
        sample_seed,
    ) {
        Ok(v) => v,
        Err(e) => return input_error(e),
    };

    let outcome = match &bundle {
        Some(bundle) => {
            let provider = align::LearnedFeatures::new(bundle, true);
            let aligner = AlignerWeights::from_bundle(bundle);
            align::estimate(&reference, &ref_pose, &query, &provider, &aligner, args.iters)
        }
        None => {
            let provider = OracleProvider::geometric(oracle_channels, split_seed(args.seed, 2));
            let aligner = AlignerWeights::identity(oracle_channels);
            align::estimate(&reference, &ref_pose, &query, &provider, &aligner, args.iters)
        }
    };
    let estimate = match outcome {
        Ok(e) => e,
        Err(e) => return input_error(format!("estimation setup failed: {e}")),
    };

    for (i, rec) in estimate.trace.iter().enumerate() {
        println!(
            "iteration {}: correspondences {} mean similarity {:.4}",
            i + 1,
            rec.correspondences,
            rec.mean_similarity
        );
    }
    if let Err(e) = io::write_pose(&args.out_pose, &estimate.pose) {
        return input_error(e);
    }
    if let Some(trace_path) = &args.trace {
        let mut s = String::from("# trace v1\n");
        for (i, rec) in estimate.trace.iter().enumerate() {
            use std::fmt::Write as _;
            let r = &rec.pose.rotation;
            let t = &rec.pose.translation;
            let _ = writeln!(
                s,
                "iteration {} correspondences {} mean_similarity {} rotation {} {} {} {} {} {} {} {} {} translation {} {} {}",
                i + 1,
                rec.correspondences,
                rec.mean_similarity,
                r[(0, 0)], r[(0, 1)], r[(0, 2)],
                r[(1, 0)], r[(1, 1)], r[(1, 2)],
                r[(2, 0)], r[(2, 1)], r[(2, 2)],
                t.x, t.y, t.z,
            );
        }
        if let Err(e) = std::fs::write(trace_path, s) {
            return input_error(format!("{}: {e}", trace_path.display()));
        }
    }
    println!("pose written to {}", args.out_pose.display());
    if estimate.failed {
        eprintln!("warning: alignment failed mid-loop; wrote last valid estimate");
        return EXIT_PIPELINE;
    }
    EXIT_OK
}

// ---------------------------------------------------------------------------
// synth-eval
// ---------------------------------------------------------------------------

pub struct SynthEvalArgs {
    pub pairs: usize,
    pub seed: u64,
    pub iters: usize,
    pub feature_mode: FeatureModeArg,
    pub points: usize,
    pub gap_rotation_deg: f64,
    pub gap_translation: f64,
    pub threads: usize,
    pub splat_radius: f64,
    pub no_rgb: bool,
    pub out: PathBuf,
}

pub fn cmd_synth_eval(args: &SynthEvalArgs) -> i32 {
    let feature_mode = match &args.feature_mode {
        FeatureModeArg::Oracle => FeatureMode::Oracle,
        FeatureModeArg::Untrained => FeatureMode::Untrained,
        FeatureModeArg::Weights(path) => match io::weights::read_weights(path) {
            Ok(b) => FeatureMode::Weights(std::sync::Arc::new(b)),
            Err(e) => return input_error(e),
        },
    };
    let mut scene = refpose_core::synth::SceneConfig::default();
    scene.splat_radius = args.splat_radius;
    let config = EvalConfig {
        n_pairs: args.pairs,
        seed: args.seed,
        iters: args.iters,
        feature_mode,
        pose_gap: PoseGap {
            max_rotation: args.gap_rotation_deg.to_radians(),
            max_translation: args.gap_translation,
        },
        n_points: args.points,
        use_rgb: !args.no_rgb,
        threads: args.threads,
        scene,
        ..EvalConfig::default()
    };
    let report = eval_run(&config);
    if let Err(e) = io::report::write_report(&args.out, &report) {
        return input_error(e);
    }
    if let Err(e) = io::report::write_timing_sidecar(&args.out, &report) {
        return input_error(e);
    }
    println!(
        "pairs {} recall_add01d {:.4} auc_add {:.4} median_add {:.6}",
        report.instances.len(),
        report.recall_add01d,
        report.auc_add,
        report.median_add
    );
    println!("report written to {}", args.out.display());
    let failures = report.instances.iter().filter(|i| i.failed).count();
    if failures > 0 {
        eprintln!("warning: {failures} instances failed mid-loop");
    }
    EXIT_OK
}

// ---------------------------------------------------------------------------
// scan-check
// ---------------------------------------------------------------------------

pub struct ScanCheckArgs {
    pub instances: usize,
    pub max_len: usize,
    pub max_state: usize,
    pub precision: Precision,
    pub seed: u64,
}

fn random_params_f64(
    rng: &mut rand_chacha::ChaCha8Rng,
    e: usize,
    m: usize,
) -> SelectiveParams<f64> {
    let s = 1.0 / (e as f64).sqrt();
    let mut draw = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    };
    SelectiveParams {
        state_dim: m,
        embed_dim: e,
        a: draw(e * m, -4.0, -0.3),
        delta_w: draw(e * e, -0.2 * s, 0.2 * s),
        delta_b: vec![softplus_inverse(0.05); e],
        b_w: draw(m * e, -s, s),
        b_b: draw(m, -0.1, 0.1),
        c_w: draw(m * e, -s, s),
        c_b: draw(m, -0.1, 0.1),
        d_skip: draw(e, -1.0, 1.0),
    }
}

fn to_f32_params(p: &SelectiveParams<f64>) -> SelectiveParams<f32> {
    SelectiveParams {
        state_dim: p.state_dim,
        embed_dim: p.embed_dim,
        a: p.a.iter().map(|&v| v as f32).collect(),
        delta_w: p.delta_w.iter().map(|&v| v as f32).collect(),
        delta_b: p.delta_b.iter().map(|&v| v as f32).collect(),
        b_w: p.b_w.iter().map(|&v| v as f32).collect(),
        b_b: p.b_b.iter().map(|&v| v as f32).collect(),
        c_w: p.c_w.iter().map(|&v| v as f32).collect(),
        c_b: p.c_b.iter().map(|&v| v as f32).collect(),
        d_skip: p.d_skip.iter().map(|&v| v as f32).collect(),
    }
}

/// Run the selective-scan-vs-oracle suite; returns the max absolute error.
pub fn scan_check_max_error(args: &ScanCheckArgs) -> f64 {
    let mut rng = seeded_rng(args.seed);
    let mut max_err = 0.0f64;
    for _ in 0..args.instances {
        let e = rng.random_range(1..=32usize);
        let m = rng.random_range(1..=args.max_state.max(1));
        let l = rng.random_range(1..=args.max_len.max(1));
        let params = random_params_f64(&mut rng, e, m);
        let tokens: Vec<f64> = (0..l * e).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = match args.precision {
            Precision::Double => {
                let fast = selective_scan(&params, &tokens, l).expect("valid params");
                let naive = selective_scan_naive(&params, &tokens, l).expect("valid params");
                fast.iter()
                    .zip(&naive)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
            }
            Precision::Single => {
                let p32 = to_f32_params(&params);
                let t32: Vec<f32> = tokens.iter().map(|&v| v as f32).collect();
                let fast = selective_scan(&p32, &t32, l).expect("valid params");
                let naive = selective_scan_naive(&p32, &t32, l).expect("valid params");
                fast.iter()
                    .zip(&naive)
                    .map(|(a, b)| (a - b).abs() as f64)
                    .fold(0.0f64, f64::max)
            }
        };
        max_err = max_err.max(err);
    }
    max_err
}

pub fn cmd_scan_check(args: &ScanCheckArgs) -> i32 {
    let tolerance = match args.precision {
        Precision::Single => 1e-5,
        Precision::Double => 1e-10,
    };
    let max_err = scan_check_max_error(args);
    let precision = match args.precision {
        Precision::Single => "single",
        Precision::Double => "double",
    };
    println!(
        "scan-check: {} instances, precision {precision}, max abs error {max_err:.3e} (tolerance {tolerance:.0e})",
        args.instances
    );
    if max_err < tolerance {
        EXIT_OK
    } else {
        EXIT_CHECK
    }
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub struct GradCheckArgs {
    pub instances: usize,
    pub entries: usize,
    pub seed: u64,
}

/// Central-difference check of the alignment-loss gradient; returns the max
/// relative error over sampled entries.
pub fn gradcheck_max_error(args: &GradCheckArgs) -> f64 {
    let mut rng = seeded_rng(args.seed);
    let mut max_rel = 0.0f64;
    let h = 1e-4;
    for inst in 0..args.instances {
        let n = 8;
        let mut a = Mat::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a.set(i, j, rng.random_range(-1.5..1.5));
            }
        }
        let labels = refpose_core::geom::CorrespondenceLabels {
            query_to_ref: (0..n)
                .map(|_| {
                    if rng.random_range(0.0..1.0) < 0.2 {
                        None
                    } else {
                        Some(rng.random_range(0..n))
                    }
                })
                .collect(),
            ref_to_query: (0..n)
                .map(|_| {
                    if rng.random_range(0.0..1.0) < 0.2 {
                        None
                    } else {
                        Some(rng.random_range(0..n))
                    }
                })
                .collect(),
        };
        let grad = loss_gradient(&a, &labels).expect("labels nonempty");
        for _ in 0..args.entries {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            let mut plus = a.clone();
            plus.set(i, j, a.get(i, j) + h);
            let mut minus = a.clone();
            minus.set(i, j, a.get(i, j) - h);
            let fd = (align::alignment_loss(&plus, &labels).unwrap()
                - align::alignment_loss(&minus, &labels).unwrap())
                / (2.0 * h);
            let analytic = grad.get(i, j);
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            let rel = ((fd - analytic) / denom).abs();
            if rel > max_rel {
                max_rel = rel;
            }
        }
        let _ = inst;
    }
    max_rel
}

pub fn cmd_gradcheck(args: &GradCheckArgs) -> i32 {
    let max_rel = gradcheck_max_error(args);
    println!(
        "gradcheck: {} instances x {} entries, max relative error {max_rel:.3e} (tolerance 1e-4)",
        args.instances, args.entries
    );
    if max_rel < 1e-4 {
        EXIT_OK
    } else {
        EXIT_CHECK
    }
}

// ---------------------------------------------------------------------------
// train-toy
// ---------------------------------------------------------------------------

pub struct TrainToyArgs {
    pub steps: usize,
    pub seed: u64,
    pub learning_rate: f64,
}

pub fn cmd_train_toy(args: &TrainToyArgs) -> i32 {
    let out = run_toy_training(args.steps, args.seed, args.learning_rate);
    println!(
        "train-toy: {} steps, loss {:.4} -> {:.4}, held-out accuracy {:.3} -> {:.3}",
        args.steps, out.initial_loss, out.final_loss, out.untrained_accuracy, out.trained_accuracy
    );
    let ok = out.final_loss <= 0.5 * out.initial_loss
        && out.trained_accuracy >= out.untrained_accuracy;
    if ok {
        EXIT_OK
    } else {
        EXIT_CHECK
    }
}
