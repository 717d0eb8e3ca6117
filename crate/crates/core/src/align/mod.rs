//! Point-wise alignment: feature refinement, affinity matching, mutual-best
//! correspondence selection, weighted-SVD pose solving, and the iterative
//! focalize-align-solve loop.
//!
//! The loop follows the single-reference recipe: the reference cloud is
//! focalized once by its annotated pose; the query cloud starts at identity
//! rotation with its centroid as translation, and each iteration refocalizes
//! it by the current estimate, re-extracts query point features, refines
//! both feature maps, matches them, and solves the pose in camera space.

pub mod attn;
pub mod train;

use thiserror::Error;

pub use attn::{refine_features, AttnBlockParams, RefineParams};
pub use train::{
    alignment_loss, correspondence_accuracy, evaluate_loss, gen_micro_pair,
    loss_gradient, run_toy_training, toy_train_step, MicroPair, TrainState,
    TrainToyOutcome,
};

use crate::geom::{self, centroid, focalize, GeomError, PointCloud, Pose};
use crate::seqmodel::{self, SeqModelError, WeightBundle};
use crate::tensor::{FeatureMap, Mat};
use crate::view::{ColorImage, Mask};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("no correspondences survive mutual-best filtering")]
    NoCorrespondences,
    #[error("all point pairs discarded by the label threshold")]
    AllDiscarded,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    SeqModel(#[from] SeqModelError),
}

/// Query-to-reference similarity logits, `n_query x n_ref`. Scores are
/// feature dot products scaled by `1/sqrt(channels)`.
pub type AffinityMatrix = Mat<f64>;

/// Selected point pairs with nonnegative solver weights.
#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    /// `(query index, reference index, weight)`.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// The two refinement parameter sets: one for the first alignment
/// iteration, one for all subsequent iterations. The sets are independent
/// tensors (weights are not shared).
#[derive(Debug, Clone)]
pub struct AlignerWeights {
    pub initial: RefineParams,
    pub iterative: RefineParams,
}

impl AlignerWeights {
    pub fn identity(channels: usize) -> Self {
        AlignerWeights {
            initial: RefineParams::identity(channels),
            iterative: RefineParams::identity(channels),
        }
    }

    pub fn from_bundle(bundle: &WeightBundle) -> Self {
        AlignerWeights {
            initial: RefineParams::from_bundle(bundle, "initial"),
            iterative: RefineParams::from_bundle(bundle, "iterative"),
        }
    }
}

/// Per-iteration observability record.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub pose: Pose,
    pub correspondences: usize,
    pub mean_similarity: f64,
}

/// Result of an estimation run. `failed` marks runs aborted mid-loop; the
/// pose then holds the last valid estimate.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub pose: Pose,
    pub trace: Vec<IterationRecord>,
    pub failed: bool,
}

/// One segmented RGB-D view, preprocessed for estimation: the camera-space
/// cloud is already resampled to the working point count and carries the
/// source pixel of every point.
#[derive(Debug, Clone)]
pub struct ViewObservation {
    pub image: ColorImage,
    pub mask: Mask,
    pub cloud_cam: PointCloud,
}

/// Produces per-point features for the alignment loop. Reference features
/// are requested once per estimate; query features once per iteration, on
/// the query cloud focalized by the current pose estimate.
pub trait FeatureProvider {
    fn channels(&self) -> usize;

    fn reference_features(
        &self,
        view: &ViewObservation,
        cloud_obj: &PointCloud,
    ) -> Result<FeatureMap, AlignError>;

    fn query_features(
        &self,
        view: &ViewObservation,
        cloud_obj: &PointCloud,
        iteration: usize,
    ) -> Result<FeatureMap, AlignError>;
}

/// Extractor-backed provider: point-scan features of the focalized cloud
/// fused with image features. The image never changes across iterations,
/// so its per-point features are computed once and reused.
pub struct LearnedFeatures<'a> {
    bundle: &'a WeightBundle,
    use_rgb: bool,
    query_image: std::sync::OnceLock<FeatureMap>,
}

impl<'a> LearnedFeatures<'a> {
    /// Create a provider for one estimation run (the query-image cache is
    /// keyed to the first query view it sees).
    pub fn new(bundle: &'a WeightBundle, use_rgb: bool) -> Self {
        LearnedFeatures { bundle, use_rgb, query_image: std::sync::OnceLock::new() }
    }

    fn image_features(&self, view: &ViewObservation) -> Result<FeatureMap, AlignError> {
        let coords = view.cloud_cam.pixel_coords.as_ref().ok_or_else(|| {
            AlignError::Shape("image fusion requires per-point pixel coordinates".into())
        })?;
        Ok(seqmodel::rgb::rgb_ssm_forward(&view.image, &view.mask, coords, self.bundle)?)
    }
}

impl FeatureProvider for LearnedFeatures<'_> {
    fn channels(&self) -> usize {
        self.bundle.config().feature_dim
    }

    fn reference_features(
        &self,
        view: &ViewObservation,
        cloud_obj: &PointCloud,
    ) -> Result<FeatureMap, AlignError> {
        let fp = seqmodel::points::points_ssm_forward(cloud_obj, self.bundle)?;
        if !self.use_rgb {
            return Ok(fp);
        }
        let fi = self.image_features(view)?;
        Ok(seqmodel::fuse(&fp, &fi)?)
    }

    fn query_features(
        &self,
        view: &ViewObservation,
        cloud_obj: &PointCloud,
        _iteration: usize,
    ) -> Result<FeatureMap, AlignError> {
        let fp = seqmodel::points::points_ssm_forward(cloud_obj, self.bundle)?;
        if !self.use_rgb {
            return Ok(fp);
        }
        if self.query_image.get().is_none() {
            let fi = self.image_features(view)?;
            let _ = self.query_image.set(fi);
        }
        let fi = self.query_image.get().expect("cache populated above");
        Ok(seqmodel::fuse(&fp, fi)?)
    }
}

/// Affinity between query and reference features: `scores[q][r]` is the dot
/// product of query row `q` and reference row `r`, scaled by
/// `1/sqrt(channels)`. Accumulation runs in double precision.
pub fn affinity(fq: &FeatureMap, fr: &FeatureMap) -> Result<AffinityMatrix, AlignError> {
    if fq.cols() != fr.cols() {
        return Err(AlignError::Shape(format!(
            "channel mismatch: query {} vs reference {}",
            fq.cols(),
            fr.cols()
        )));
    }
    let scale = 1.0 / (fq.cols() as f64).sqrt();
    let mut scores = Mat::zeros(fq.rows(), fr.rows());
    for q in 0..fq.rows() {
        let qa = fq.row(q);
        let out = scores.row_mut(q);
        for r in 0..fr.rows() {
            let ra = fr.row(r);
            let mut acc = 0.0f64;
            for t in 0..qa.len() {
                acc += qa[t] as f64 * ra[t] as f64;
            }
            out[r] = acc * scale;
        }
    }
    Ok(scores)
}

/// Mutual-best correspondence selection: a pair survives when the reference
/// is the query row's argmax and the query is that reference column's
/// argmax (first index wins exact ties). The weight is the query row's
/// softmax evaluated at the selected reference.
pub fn select_correspondences(a: &AffinityMatrix) -> Result<CorrespondenceSet, AlignError> {
    let (nq, nr) = (a.rows(), a.cols());
    if nq == 0 || nr == 0 {
        return Err(AlignError::NoCorrespondences);
    }
    let mut col_best: Vec<usize> = vec![0; nr];
    let mut col_val = vec![f64::NEG_INFINITY; nr];
    for q in 0..nq {
        let row = a.row(q);
        for r in 0..nr {
            if row[r] > col_val[r] {
                col_val[r] = row[r];
                col_best[r] = q;
            }
        }
    }
    let mut pairs = Vec::new();
    for q in 0..nq {
        let row = a.row(q);
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for r in 0..nr {
            if row[r] > best_val {
                best_val = row[r];
                best = r;
            }
        }
        if col_best[best] != q {
            continue;
        }
        // Softmax weight of the chosen (maximal) entry within its row.
        let z: f64 = row.iter().map(|&v| (v - best_val).exp()).sum();
        pairs.push((q, best, 1.0 / z));
    }
    if pairs.is_empty() {
        return Err(AlignError::NoCorrespondences);
    }
    Ok(CorrespondenceSet { pairs })
}

/// Solve the pose mapping object space to query camera space from selected
/// pairs: sources come from the object-space reference cloud, destinations
/// from the camera-space query cloud.
pub fn solve_pose(
    c: &CorrespondenceSet,
    pr_obj: &PointCloud,
    pq_cam: &PointCloud,
) -> Result<Pose, AlignError> {
    let mut src = Vec::with_capacity(c.pairs.len());
    let mut dst = Vec::with_capacity(c.pairs.len());
    let mut weights = Vec::with_capacity(c.pairs.len());
    for &(q, r, w) in &c.pairs {
        src.push(pr_obj.points[r]);
        dst.push(pq_cam.points[q]);
        weights.push(w);
    }
    Ok(geom::wsvd(
        &PointCloud::from_points(src),
        &PointCloud::from_points(dst),
        &weights,
    )?)
}

/// Iterative single-reference pose estimation.
///
/// The reference cloud is focalized once by its annotated pose. Iteration 1
/// starts from identity rotation and the query centroid; each iteration
/// focalizes the query cloud by the current estimate, obtains features,
/// refines them (the first iteration with `aligner.initial`, later ones
/// with `aligner.iterative`), selects mutual-best pairs, and solves the
/// pose. A mid-loop matching failure stops early and flags the result,
/// keeping the last valid pose.
pub fn estimate(
    reference: &ViewObservation,
    ref_pose: &Pose,
    query: &ViewObservation,
    provider: &dyn FeatureProvider,
    aligner: &AlignerWeights,
    iters: usize,
) -> Result<Estimate, AlignError> {
    if iters == 0 {
        return Err(AlignError::Shape("iteration count must be at least 1".into()));
    }
    ref_pose.validate()?;

    let pr_obj = focalize(&reference.cloud_cam, ref_pose);
    let fr_raw = provider.reference_features(reference, &pr_obj)?;

    let mut pose = Pose {
        rotation: geom::Mat3::identity(),
        translation: centroid(&query.cloud_cam)?,
    };
    let mut trace = Vec::with_capacity(iters);
    let mut failed = false;

    for iteration in 1..=iters {
        let pq_obj = focalize(&query.cloud_cam, &pose);
        let fq_raw = provider.query_features(query, &pq_obj, iteration)?;
        let set = if iteration == 1 { &aligner.initial } else { &aligner.iterative };
        let (fr, fq) = refine_features(&fr_raw, &fq_raw, &pr_obj, &pq_obj, set)?;
        let scores = affinity(&fq, &fr)?;
        let selected = match select_correspondences(&scores) {
            Ok(s) => s,
            Err(AlignError::NoCorrespondences) => {
                failed = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let mean_similarity = selected
            .pairs
            .iter()
            .map(|&(q, r, _)| scores.get(q, r))
            .sum::<f64>()
            / selected.pairs.len() as f64;
        pose = match solve_pose(&selected, &pr_obj, &query.cloud_cam) {
            Ok(p) => p,
            Err(AlignError::Geom(GeomError::DegenerateCorrespondences(_))) => {
                failed = true;
                break;
            }
            Err(e) => return Err(e),
        };
        trace.push(IterationRecord {
            pose,
            correspondences: selected.pairs.len(),
            mean_similarity,
        });
    }

    Ok(Estimate { pose, trace, failed })
}
