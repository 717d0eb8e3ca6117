//! Procedural evaluation harness: seeded synthetic objects, rendered
//! RGB-D view pairs with exact ground truth, oracle feature injection,
//! pose-accuracy metrics, and the evaluation driver.

pub mod eval;
pub mod metrics;
pub mod oracle;
pub mod render;

use std::f64::consts::{PI, TAU};

use rand::Rng;
use thiserror::Error;

use crate::align::AlignError;
use crate::geom::{
    compose, random_rotation, random_unit_vector, CameraIntrinsics, GeomError, Pose,
    PointCloud, Vec3,
};
use crate::view::{ColorImage, DepthMap, Mask};

pub use eval::{eval_run, EvalConfig, FeatureMode, PoseGap};
pub use metrics::{add_metric, adds_metric, auc_add, recall_add01d, InstanceMetrics, MetricsReport};
pub use oracle::{oracle_features, GeometricEncoder, OracleFeatures, OracleProvider};
pub use render::{render_color, render_depth};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("posed point behind camera (z = {0:.4})")]
    BehindCamera(f64),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("no labeled pairs in the view overlap")]
    AllDiscarded,
    #[error("view provides {have} points, {need} requested")]
    InsufficientPoints { have: usize, need: usize },
}

/// A seeded random smooth object: a radially perturbed sphere, recentered,
/// scaled to a known diameter.
#[derive(Debug, Clone)]
pub struct SyntheticObject {
    pub model_points: PointCloud,
    /// Maximum pairwise distance between model points, meters.
    pub diameter: f64,
    pub seed: u64,
}

/// Radial lobe of the object surface.
struct Lobe {
    direction: Vec3,
    amplitude: f64,
    power: i32,
}

/// Generate a seeded object with the default lobe amplitude.
pub fn gen_object(seed: u64, n_model_points: usize) -> SyntheticObject {
    gen_object_with_amplitude(seed, n_model_points, 0.1)
}

/// Generate a seeded object; `amplitude` scales the radial perturbation
/// (zero gives an exact sphere).
pub fn gen_object_with_amplitude(
    seed: u64,
    n_model_points: usize,
    amplitude: f64,
) -> SyntheticObject {
    assert!(n_model_points >= 64, "objects need at least 64 model points");
    assert!(n_model_points % 2 == 0, "model point count must be even");
    let mut rng = crate::rng::seeded_rng(seed);
    let target_diameter = rng.random_range(0.08..0.30);

    let lobes: Vec<Lobe> = (0..8)
        .map(|_| Lobe {
            direction: random_unit_vector(&mut rng),
            amplitude: rng.random_range(-amplitude..=amplitude),
            power: rng.random_range(2..=3),
        })
        .collect();

    // Antithetic direction pairs: the sample centroid of the unperturbed
    // sphere cancels exactly, so the degenerate zero-amplitude object stays
    // a perfect sphere through recentering.
    let radius_at = |dir: &Vec3| -> f64 {
        let mut radius = 1.0;
        for lobe in &lobes {
            let cos = dir.dot(&lobe.direction).max(0.0);
            radius += lobe.amplitude * cos.powi(lobe.power);
        }
        radius.max(0.25)
    };
    let mut points: Vec<Vec3> = Vec::with_capacity(n_model_points);
    for _ in 0..n_model_points / 2 {
        let dir = random_unit_vector(&mut rng);
        points.push(dir * radius_at(&dir));
        let neg = -dir;
        points.push(neg * radius_at(&neg));
    }

    recenter(&mut points);
    let raw_diameter = max_pairwise_distance(&points);
    let scale = target_diameter / raw_diameter;
    for p in &mut points {
        *p *= scale;
    }
    recenter(&mut points);

    SyntheticObject {
        model_points: PointCloud::from_points(points),
        diameter: target_diameter,
        seed,
    }
}

fn recenter(points: &mut [Vec3]) {
    let c: Vec3 = points.iter().sum::<Vec3>() / points.len() as f64;
    for p in points.iter_mut() {
        *p -= c;
    }
}

fn max_pairwise_distance(points: &[Vec3]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            best = best.max((points[i] - points[j]).norm_squared());
        }
    }
    best.sqrt()
}

/// One rendered RGB-D view.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub image: ColorImage,
    pub depth: DepthMap,
    pub mask: Mask,
}

/// Reference view (with annotated pose), query view, and ground truth.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub reference: RenderedView,
    pub ref_pose: Pose,
    pub query: RenderedView,
    pub gt_query_pose: Pose,
    pub object: SyntheticObject,
}

/// Camera and scene parameters of the synthetic world.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub intrinsics: CameraIntrinsics,
    pub n_model_points: usize,
    pub splat_radius: f64,
    /// Camera distance band, meters.
    pub distance: (f64, f64),
    /// Reference-view elevation band, radians.
    pub elevation: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            intrinsics: CameraIntrinsics {
                fx: 230.0,
                fy: 230.0,
                cx: 111.5,
                cy: 111.5,
                width: 224,
                height: 224,
            },
            n_model_points: 2048,
            splat_radius: 2.0,
            distance: (0.6, 1.2),
            elevation: (30f64.to_radians(), 60f64.to_radians()),
        }
    }
}

/// Pose perturbation bounds between the reference and query views.
#[derive(Debug, Clone, Copy)]
pub struct PoseGapSpec {
    pub max_rotation: f64,
    pub max_translation: f64,
}

/// Look-at camera pose: the camera sits at `position` (object frame) and
/// looks at the object origin, rolled so that image-up tracks world-up.
pub fn look_at_pose(position: Vec3) -> Pose {
    let forward = (-position).normalize();
    let up = Vec3::new(0.0, 0.0, 1.0);
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let rotation = crate::geom::Mat3::from_rows(&[
        right.transpose(),
        down.transpose(),
        forward.transpose(),
    ]);
    Pose { rotation, translation: -(rotation * position) }
}

/// Generate a reference/query view pair: the reference camera is drawn from
/// an oblique band (seeded elevation and azimuth), the query pose perturbs
/// it by at most the given rotation and translation, and both views are
/// rendered with exact ground truth.
pub fn make_pair(seed: u64, gap: PoseGapSpec) -> Result<ViewPair, SynthError> {
    make_pair_with(&SceneConfig::default(), seed, gap)
}

pub fn make_pair_with(
    scene: &SceneConfig,
    seed: u64,
    gap: PoseGapSpec,
) -> Result<ViewPair, SynthError> {
    assert!(gap.max_rotation <= PI, "rotation gap above 180 degrees");
    let object = gen_object(crate::rng::split_seed(seed, 0), scene.n_model_points);
    let mut rng = crate::rng::seeded_rng(crate::rng::split_seed(seed, 1));

    let elevation = rng.random_range(scene.elevation.0..=scene.elevation.1);
    let azimuth = rng.random_range(0.0..TAU);
    let distance = rng.random_range(scene.distance.0..=scene.distance.1);
    let position = Vec3::new(
        distance * elevation.cos() * azimuth.cos(),
        distance * elevation.cos() * azimuth.sin(),
        distance * elevation.sin(),
    );
    let ref_pose = look_at_pose(position);

    // Perturb in the object frame (the camera orbits the object), keeping
    // the relative rotation magnitude within the requested gap.
    let delta = Pose {
        rotation: random_rotation(&mut rng, gap.max_rotation),
        translation: random_unit_vector(&mut rng)
            * rng.random_range(0.0..=gap.max_translation.max(0.0)),
    };
    let gt_query_pose = compose(&ref_pose, &delta);

    let reference = render_view(&object, &ref_pose, scene)?;
    let query = render_view(&object, &gt_query_pose, scene)?;
    Ok(ViewPair { reference, ref_pose, query, gt_query_pose, object })
}

fn render_view(
    object: &SyntheticObject,
    pose: &Pose,
    scene: &SceneConfig,
) -> Result<RenderedView, SynthError> {
    let (depth, mask) =
        render_depth(object, pose, &scene.intrinsics, scene.splat_radius)?;
    let image = render_color(object, pose, &scene.intrinsics, scene.splat_radius)?;
    Ok(RenderedView { image, depth, mask })
}
