//! Evaluation driver: generate seeded view pairs, run the estimation loop
//! on each, and aggregate pose-accuracy metrics.
//!
//! Pair evaluations are independent; with more than one thread they run on
//! a dedicated pool and are merged in pair order, so reports are invariant
//! to the thread count. Per-pair seeds are split from the root seed.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use super::metrics::{InstanceMetrics, MetricsReport};
use super::oracle::OracleProvider;
use super::{add_metric, adds_metric, make_pair_with, SceneConfig, SynthError, ViewPair};
use crate::align::{self, AlignerWeights, LearnedFeatures, ViewObservation};
use crate::geom::{backproject, focalize, resample};
use crate::rng::split_seed;
use crate::seqmodel::{ModelConfig, WeightBundle};

/// Where per-point features come from during evaluation.
#[derive(Clone)]
pub enum FeatureMode {
    /// Ground-truth-blended geometric oracle; isolates the alignment loop.
    Oracle,
    /// Seeded random extractor weights.
    Untrained,
    /// Externally supplied weights.
    Weights(Arc<WeightBundle>),
}

impl std::fmt::Debug for FeatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureMode::Oracle => write!(f, "oracle"),
            FeatureMode::Untrained => write!(f, "untrained"),
            FeatureMode::Weights(_) => write!(f, "weights"),
        }
    }
}

pub use super::PoseGapSpec as PoseGap;

/// Evaluation configuration.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub n_pairs: usize,
    pub seed: u64,
    pub iters: usize,
    pub feature_mode: FeatureMode,
    pub pose_gap: PoseGap,
    /// Points per resampled cloud.
    pub n_points: usize,
    /// Channels of the oracle features.
    pub oracle_channels: usize,
    /// Ground-truth blend strength of the oracle features.
    pub oracle_gamma: f64,
    /// Fuse image features into learned point features.
    pub use_rgb: bool,
    /// Worker threads; 1 runs inline.
    pub threads: usize,
    pub scene: SceneConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_pairs: 20,
            seed: 0,
            iters: 3,
            feature_mode: FeatureMode::Oracle,
            pose_gap: PoseGap { max_rotation: 30f64.to_radians(), max_translation: 0.05 },
            n_points: 512,
            oracle_channels: 64,
            oracle_gamma: 1.0,
            use_rgb: true,
            threads: 1,
            scene: SceneConfig::default(),
        }
    }
}

fn observation(
    view: &super::RenderedView,
    scene: &SceneConfig,
    n_points: usize,
    seed: u64,
) -> Result<ViewObservation, SynthError> {
    let cloud_full = backproject(&view.depth, &view.mask, &scene.intrinsics, 1.0)?;
    let cloud_cam = resample(&cloud_full, n_points, seed)?;
    Ok(ViewObservation {
        image: view.image.clone(),
        mask: view.mask.clone(),
        cloud_cam,
    })
}

/// Evaluate one pair end to end; failures inside the loop are recorded on
/// the instance, not propagated.
fn eval_pair(
    config: &EvalConfig,
    bundle: Option<&Arc<WeightBundle>>,
    index: usize,
) -> InstanceMetrics {
    let pair_seed = split_seed(config.seed, index as u64);
    let failed_instance = |seed: u64| InstanceMetrics {
        index,
        seed,
        add: f64::INFINITY,
        add_s: f64::INFINITY,
        diameter: 0.0,
        success_01d: false,
        iteration_adds: Vec::new(),
        correspondences: Vec::new(),
        failed: true,
        wall_seconds: 0.0,
    };

    let pair = match make_pair_with(&config.scene, pair_seed, config.pose_gap) {
        Ok(p) => p,
        Err(_) => return failed_instance(pair_seed),
    };
    let started = Instant::now();
    let outcome = run_estimate(config, bundle, &pair, pair_seed);
    let wall_seconds = started.elapsed().as_secs_f64();

    match outcome {
        Ok(est) => {
            let add = add_metric(&pair.object, &est.pose, &pair.gt_query_pose);
            let add_s = adds_metric(&pair.object, &est.pose, &pair.gt_query_pose);
            let iteration_adds = est
                .trace
                .iter()
                .map(|rec| add_metric(&pair.object, &rec.pose, &pair.gt_query_pose))
                .collect();
            let correspondences =
                est.trace.iter().map(|rec| rec.correspondences).collect();
            InstanceMetrics {
                index,
                seed: pair_seed,
                add,
                add_s,
                diameter: pair.object.diameter,
                success_01d: add < 0.1 * pair.object.diameter,
                iteration_adds,
                correspondences,
                failed: est.failed,
                wall_seconds,
            }
        }
        Err(_) => InstanceMetrics {
            diameter: pair.object.diameter,
            wall_seconds,
            ..failed_instance(pair_seed)
        },
    }
}

fn run_estimate(
    config: &EvalConfig,
    bundle: Option<&Arc<WeightBundle>>,
    pair: &ViewPair,
    pair_seed: u64,
) -> Result<align::Estimate, SynthError> {
    let reference = observation(&pair.reference, &config.scene, config.n_points, split_seed(pair_seed, 101))?;
    let query = observation(&pair.query, &config.scene, config.n_points, split_seed(pair_seed, 102))?;

    match (&config.feature_mode, bundle) {
        (FeatureMode::Oracle, _) => {
            let ref_obj = focalize(&reference.cloud_cam, &pair.ref_pose);
            let provider = OracleProvider::with_ground_truth(
                config.oracle_channels,
                split_seed(pair_seed, 103),
                &ref_obj,
                &query.cloud_cam,
                &pair.gt_query_pose,
                config.oracle_gamma,
            );
            let aligner = AlignerWeights::identity(config.oracle_channels);
            Ok(align::estimate(&reference, &pair.ref_pose, &query, &provider, &aligner, config.iters)?)
        }
        (_, Some(bundle)) => {
            let provider = LearnedFeatures::new(bundle, config.use_rgb);
            let aligner = AlignerWeights::from_bundle(bundle);
            Ok(align::estimate(&reference, &pair.ref_pose, &query, &provider, &aligner, config.iters)?)
        }
        _ => unreachable!("bundle prepared for learned modes"),
    }
}

/// Model configuration used by the learned feature modes of an evaluation.
pub fn eval_model_config(config: &EvalConfig) -> ModelConfig {
    let mut model = ModelConfig::default();
    model.cloud_points = config.n_points;
    model.rgb.input = config.scene.intrinsics.width;
    model
}

/// Run the configured evaluation and aggregate a report.
pub fn eval_run(config: &EvalConfig) -> MetricsReport {
    let bundle: Option<Arc<WeightBundle>> = match &config.feature_mode {
        FeatureMode::Oracle => None,
        FeatureMode::Untrained => Some(Arc::new(WeightBundle::seeded(
            eval_model_config(config),
            split_seed(config.seed, 0xB0),
        ))),
        FeatureMode::Weights(b) => Some(b.clone()),
    };

    let instances: Vec<InstanceMetrics> = if config.threads <= 1 {
        (0..config.n_pairs)
            .map(|i| eval_pair(config, bundle.as_ref(), i))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .expect("thread pool");
        pool.install(|| {
            (0..config.n_pairs)
                .into_par_iter()
                .map(|i| eval_pair(config, bundle.as_ref(), i))
                .collect()
        })
    };
    MetricsReport::from_instances(instances)
}
