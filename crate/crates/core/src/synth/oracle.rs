//! Oracle feature injection: descriptors built from privileged knowledge so
//! the alignment loop can be tested in isolation from the learned
//! extractors.
//!
//! Two constructions are provided. [`oracle_features`] is the static one:
//! ground-truth matched pairs share a unique random unit vector, everything
//! else is kept nearly orthogonal by rejection. [`OracleProvider`] is the
//! per-iteration one used by the evaluation loop: a seeded random-Fourier
//! encoding of each point's position in the current object frame — an
//! idealized geometry encoder whose match quality degrades with
//! focalization error and recovers as the iterations converge — optionally
//! blended with the ground-truth match vectors so that matching survives
//! arbitrarily large initial pose gaps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{SynthError, ViewPair};
use crate::align::{AlignError, FeatureProvider, ViewObservation};
use crate::geom::{backproject, focalize, nearest_labels, resample, CorrespondenceLabels,
    PointCloud, Pose};
use crate::rng::{gaussian, seeded_rng, split_seed};
use crate::tensor::{FeatureMap, Mat};

/// Label distance threshold shared by supervision and the oracles, meters.
pub const LABEL_THRESHOLD: f64 = 0.15;

fn random_unit_row(rng: &mut ChaCha8Rng, c: usize) -> Vec<f32> {
    let mut v: Vec<f64> = (0..c).map(|_| gaussian(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v.into_iter().map(|x| x as f32).collect()
}

/// Random-Fourier positional encoder: row `i` of [`Self::encode`] is a
/// normalized `cos(Omega x_i + b)` vector, so dot products between rows
/// approximate a Gaussian kernel of the distance between the points.
/// Channels cycle through a ladder of bandwidths: coarse channels keep
/// far-apart points weakly correlated (long-range attraction for the
/// iterative alignment), fine channels resolve millimeter offsets.
#[derive(Debug, Clone)]
pub struct GeometricEncoder {
    channels: usize,
    /// `channels x 3` frequencies, rad/m.
    omega: Vec<f64>,
    phase: Vec<f64>,
}

/// Half-similarity distances of the encoder's bandwidth ladder, meters.
pub const ENCODER_BANDWIDTHS: [f64; 4] = [0.12, 0.05, 0.02, 0.008];

impl GeometricEncoder {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut omega = Vec::with_capacity(channels * 3);
        for c in 0..channels {
            let bandwidth = ENCODER_BANDWIDTHS[c % ENCODER_BANDWIDTHS.len()];
            let sigma = (2.0 * (2.0f64).ln()).sqrt() / bandwidth;
            for _ in 0..3 {
                omega.push(sigma * gaussian(&mut rng));
            }
        }
        let phase = (0..channels)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        GeometricEncoder { channels, omega, phase }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn encode(&self, cloud: &PointCloud) -> FeatureMap {
        let mut out = Mat::zeros(cloud.len(), self.channels);
        for (i, p) in cloud.points.iter().enumerate() {
            let row = out.row_mut(i);
            let mut norm_sq = 0.0f64;
            for c in 0..self.channels {
                let w = &self.omega[c * 3..c * 3 + 3];
                let v = (w[0] * p.x + w[1] * p.y + w[2] * p.z + self.phase[c]).cos();
                row[c] = v as f32;
                norm_sq += v * v;
            }
            let inv = (1.0 / norm_sq.sqrt().max(1e-9)) as f32;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        out
    }
}

/// Random-Fourier encoder over sampled pixel colors: a pose-invariant
/// point-identity signal available from the files alone.
#[derive(Debug, Clone)]
pub struct AppearanceEncoder {
    channels: usize,
    omega: Vec<f64>,
    phase: Vec<f64>,
}

impl AppearanceEncoder {
    /// `bandwidth` is the RGB-space distance at which similarity falls to
    /// roughly one half.
    pub fn new(channels: usize, bandwidth: f64, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let sigma = (2.0 * (2.0f64).ln()).sqrt() / bandwidth.max(1e-6);
        let omega = (0..channels * 3).map(|_| sigma * gaussian(&mut rng)).collect();
        let phase = (0..channels)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        AppearanceEncoder { channels, omega, phase }
    }

    /// Encode the color under each cloud point's source pixel; rows of
    /// points without pixel provenance stay zero.
    pub fn encode(
        &self,
        view: &crate::align::ViewObservation,
        cloud: &PointCloud,
    ) -> FeatureMap {
        let mut out = Mat::zeros(cloud.len(), self.channels);
        let Some(pixels) = &cloud.pixel_coords else {
            return out;
        };
        for (i, &[u, v]) in pixels.iter().enumerate() {
            let (u, v) = (
                (u as usize).min(view.image.width - 1),
                (v as usize).min(view.image.height - 1),
            );
            let rgb = view.image.at(u, v);
            let row = out.row_mut(i);
            let mut norm_sq = 0.0f64;
            for c in 0..self.channels {
                let w = &self.omega[c * 3..c * 3 + 3];
                let x = (w[0] * rgb[0] as f64
                    + w[1] * rgb[1] as f64
                    + w[2] * rgb[2] as f64
                    + self.phase[c])
                    .cos();
                row[c] = x as f32;
                norm_sq += x * x;
            }
            let inv = (1.0 / norm_sq.sqrt().max(1e-9)) as f32;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        out
    }
}

/// Ground-truth match vectors for a specific pair of resampled clouds.
#[derive(Debug, Clone)]
struct MatchBlend {
    ref_units: Mat<f32>,
    query_units: Mat<f32>,
    gamma: f64,
}

/// Per-iteration oracle feature source for the estimation loop.
pub struct OracleProvider {
    encoder: GeometricEncoder,
    appearance: Option<AppearanceEncoder>,
    blend: Option<MatchBlend>,
}

impl OracleProvider {
    /// File-driven oracle: no ground truth involved. Half the channels
    /// encode each point's position in the current object frame, half
    /// encode the color under its source pixel, so matching is anchored by
    /// appearance while the positional part rewards good focalization.
    pub fn geometric(channels: usize, seed: u64) -> Self {
        let pos = channels / 2;
        OracleProvider {
            encoder: GeometricEncoder::new(pos, split_seed(seed, 0x0E0C)),
            appearance: Some(AppearanceEncoder::new(
                channels - pos,
                0.25,
                split_seed(seed, 0x0E0E),
            )),
            blend: None,
        }
    }

    /// Ground-truth-blended oracle for the synthetic harness: matched pairs
    /// of the given clouds share a unit vector mixed into the positional
    /// code, so correspondence survives any initial pose gap while the
    /// positional part still rewards good focalization.
    pub fn with_ground_truth(
        channels: usize,
        seed: u64,
        ref_obj: &PointCloud,
        query_cam: &PointCloud,
        gt_query_pose: &Pose,
        gamma: f64,
    ) -> Self {
        let labels = nearest_labels(query_cam, ref_obj, gt_query_pose, LABEL_THRESHOLD);
        let mut rng = seeded_rng(split_seed(seed, 0x0E0D));
        let mut ref_units = Mat::zeros(ref_obj.len(), channels);
        for r in 0..ref_obj.len() {
            ref_units
                .row_mut(r)
                .copy_from_slice(&random_unit_row(&mut rng, channels));
        }
        let mut query_units = Mat::zeros(query_cam.len(), channels);
        for (q, label) in labels.query_to_ref.iter().enumerate() {
            match label {
                Some(r) => query_units.row_mut(q).copy_from_slice(ref_units.row(*r)),
                None => query_units
                    .row_mut(q)
                    .copy_from_slice(&random_unit_row(&mut rng, channels)),
            }
        }
        OracleProvider {
            encoder: GeometricEncoder::new(channels, split_seed(seed, 0x0E0C)),
            appearance: None,
            blend: Some(MatchBlend { ref_units, query_units, gamma }),
        }
    }

    /// Positional and appearance parts concatenated and renormalized.
    fn encode_view(
        &self,
        view: &crate::align::ViewObservation,
        cloud_obj: &PointCloud,
    ) -> FeatureMap {
        let pos = self.encoder.encode(cloud_obj);
        let Some(app_enc) = &self.appearance else {
            return pos;
        };
        let app = app_enc.encode(view, cloud_obj);
        let total = pos.cols() + app.cols();
        let mut out = Mat::zeros(cloud_obj.len(), total);
        let inv = 1.0 / (2.0f32).sqrt();
        for i in 0..cloud_obj.len() {
            let row = out.row_mut(i);
            for (c, &v) in pos.row(i).iter().enumerate() {
                row[c] = v * inv;
            }
            for (c, &v) in app.row(i).iter().enumerate() {
                row[pos.cols() + c] = v * inv;
            }
        }
        out
    }

    fn blend_rows(&self, positional: &FeatureMap, units: &Mat<f32>) -> FeatureMap {
        let Some(blend) = &self.blend else {
            return positional.clone();
        };
        let gamma = blend.gamma as f32;
        let mut out = Mat::zeros(positional.rows(), positional.cols());
        for i in 0..positional.rows() {
            let p = positional.row(i);
            let u = units.row(i);
            let row = out.row_mut(i);
            let mut norm_sq = 0.0f32;
            for c in 0..p.len() {
                let v = u[c] + gamma * p[c];
                row[c] = v;
                norm_sq += v * v;
            }
            let inv = 1.0 / norm_sq.sqrt().max(1e-9);
            row.iter_mut().for_each(|v| *v *= inv);
        }
        out
    }
}

impl FeatureProvider for OracleProvider {
    fn channels(&self) -> usize {
        self.encoder.channels()
            + self.appearance.as_ref().map_or(0, |a| a.channels)
    }

    fn reference_features(
        &self,
        view: &ViewObservation,
        cloud_obj: &PointCloud,
    ) -> Result<FeatureMap, AlignError> {
        let encoded = self.encode_view(view, cloud_obj);
        match &self.blend {
            Some(b) => {
                if b.ref_units.rows() != cloud_obj.len() {
                    return Err(AlignError::Shape(
                        "oracle blend built for a different reference cloud".into(),
                    ));
                }
                Ok(self.blend_rows(&encoded, &b.ref_units))
            }
            None => Ok(encoded),
        }
    }

    fn query_features(
        &self,
        view: &ViewObservation,
        cloud_obj: &PointCloud,
        _iteration: usize,
    ) -> Result<FeatureMap, AlignError> {
        let encoded = self.encode_view(view, cloud_obj);
        match &self.blend {
            Some(b) => {
                if b.query_units.rows() != cloud_obj.len() {
                    return Err(AlignError::Shape(
                        "oracle blend built for a different query cloud".into(),
                    ));
                }
                Ok(self.blend_rows(&encoded, &b.query_units))
            }
            None => Ok(encoded),
        }
    }
}

/// Static oracle construction over a view pair.
#[derive(Debug, Clone)]
pub struct OracleFeatures {
    pub reference: FeatureMap,
    pub query: FeatureMap,
    /// Raw nearest-point labels of the resampled clouds (many-to-one).
    pub labels: CorrespondenceLabels,
    /// The injective subset of the labels actually wired into the
    /// features: per reference point, its closest labeling query. Only
    /// these pairs share a vector, so each matched pair's vector is unique
    /// to it and a one-to-one matcher can recover the whole set.
    pub injected: Vec<(usize, usize)>,
    pub ref_cloud_cam: PointCloud,
    pub query_cloud_cam: PointCloud,
}

/// Build ground-truth-matched features for `n` resampled points per view:
/// every injected pair shares one random unit vector unique to it; all
/// non-pair dot products are kept below 0.3 by rejection sampling
/// (256 channels).
pub fn oracle_features(pair: &ViewPair, n: usize) -> Result<OracleFeatures, SynthError> {
    let channels = 256;
    let intr = pair_intrinsics(pair);
    let ref_cloud_full = backproject(&pair.reference.depth, &pair.reference.mask, &intr, 1.0)?;
    let query_cloud_full = backproject(&pair.query.depth, &pair.query.mask, &intr, 1.0)?;
    if ref_cloud_full.len() < n || query_cloud_full.len() < n {
        return Err(SynthError::InsufficientPoints {
            have: ref_cloud_full.len().min(query_cloud_full.len()),
            need: n,
        });
    }
    let base = split_seed(pair.object.seed, 0x0FEA);
    let ref_cloud_cam = resample(&ref_cloud_full, n, split_seed(base, 1))?;
    let query_cloud_cam = resample(&query_cloud_full, n, split_seed(base, 2))?;

    let ref_obj = focalize(&ref_cloud_cam, &pair.ref_pose);
    let query_obj = focalize(&query_cloud_cam, &pair.gt_query_pose);
    let labels = nearest_labels(&query_cloud_cam, &ref_obj, &pair.gt_query_pose, LABEL_THRESHOLD);
    if labels.query_to_ref.iter().all(|l| l.is_none()) {
        return Err(SynthError::AllDiscarded);
    }

    // Nearest-point labels are many-to-one; keep only the closest query
    // per reference point so the injected pair set is one-to-one.
    let mut best_for_ref: Vec<Option<(f64, usize)>> = vec![None; n];
    for (q, label) in labels.query_to_ref.iter().enumerate() {
        if let Some(r) = label {
            let d = (query_obj.points[q] - ref_obj.points[*r]).norm();
            if best_for_ref[*r].is_none_or(|(bd, _)| d < bd) {
                best_for_ref[*r] = Some((d, q));
            }
        }
    }
    let mut pair_of_query: Vec<Option<usize>> = vec![None; n];
    let mut injected = Vec::new();
    for (r, best) in best_for_ref.iter().enumerate() {
        if let Some((_, q)) = best {
            pair_of_query[*q] = Some(r);
            injected.push((*q, r));
        }
    }
    injected.sort_unstable();

    // Reference vectors, mutually near-orthogonal by rejection.
    let mut rng = seeded_rng(split_seed(base, 3));
    let mut reference = Mat::zeros(n, channels);
    for r in 0..n {
        let mut attempts = 0;
        loop {
            let cand = random_unit_row(&mut rng, channels);
            let ok = (0..r).all(|prev| {
                let dot: f32 = reference
                    .row(prev)
                    .iter()
                    .zip(&cand)
                    .map(|(a, b)| a * b)
                    .sum();
                dot.abs() < 0.3
            });
            if ok {
                reference.row_mut(r).copy_from_slice(&cand);
                break;
            }
            attempts += 1;
            assert!(attempts < 1000, "rejection sampling stalled; raise channels");
        }
    }

    // Query vectors: injected points copy their partner's vector, the rest
    // get vectors near-orthogonal to every reference vector.
    let mut query = Mat::zeros(n, channels);
    for (q, paired) in pair_of_query.iter().enumerate() {
        match paired {
            Some(r) => query.row_mut(q).copy_from_slice(reference.row(*r)),
            None => {
                let mut attempts = 0;
                loop {
                    let cand = random_unit_row(&mut rng, channels);
                    let ok = (0..n).all(|r| {
                        let dot: f32 = reference
                            .row(r)
                            .iter()
                            .zip(&cand)
                            .map(|(a, b)| a * b)
                            .sum();
                        dot.abs() < 0.3
                    });
                    if ok {
                        query.row_mut(q).copy_from_slice(&cand);
                        break;
                    }
                    attempts += 1;
                    assert!(attempts < 1000, "rejection sampling stalled; raise channels");
                }
            }
        }
    }

    Ok(OracleFeatures { reference, query, labels, injected, ref_cloud_cam, query_cloud_cam })
}

fn pair_intrinsics(pair: &ViewPair) -> crate::geom::CameraIntrinsics {
    // The harness renders with the default scene intrinsics; the depth map
    // dimensions carry the image size.
    let mut intr = super::SceneConfig::default().intrinsics;
    intr.width = pair.reference.depth.width;
    intr.height = pair.reference.depth.height;
    intr
}
