//! State-space sequence modeling and the two feature extractors built on it.
//!
//! [`ssm`] holds the discretization and scan kernels; [`points`] turns an
//! object-space cloud into per-point descriptors via a 1D selective scan
//! over a locality-preserving point ordering; [`rgb`] extracts a multi-scale
//! image descriptor grid via four-directional scans. Point and image
//! descriptors are combined per point with [`fuse`].

pub mod points;
pub mod rgb;
pub mod ssm;
pub mod weights;

use thiserror::Error;

pub use crate::tensor::FeatureMap;
pub use weights::{
    AlignerConfig, ModelConfig, PointsConfig, RgbConfig, Tensor, WeightBundle,
};

#[derive(Debug, Error)]
pub enum SeqModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("insufficient points: have {have}, need at least {need}")]
    InsufficientPoints { have: usize, need: usize },
    #[error("bad dimension: {0}")]
    BadDimension(String),
    #[error("pixel coordinate ({u}, {v}) outside image bounds")]
    OutOfBounds { u: f64, v: f64 },
    #[error("weight bundle: {0}")]
    BadWeights(String),
}

/// Elementwise sum of a point-scan feature map and an image feature map.
pub fn fuse(fp: &FeatureMap, fi: &FeatureMap) -> Result<FeatureMap, SeqModelError> {
    fp.add(fi)
        .map_err(|e| SeqModelError::ShapeMismatch(e.to_string()))
}

pub(crate) fn rms_normalize(x: &[f32], scale: &[f32], out: &mut [f32]) {
    let mean_sq = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (mean_sq + 1e-6).sqrt();
    for i in 0..x.len() {
        out[i] = x[i] * inv * scale[i];
    }
}

pub(crate) fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mat;
    use rand::Rng;

    #[test]
    fn fuse_additive_identity_and_commutativity() {
        let mut rng = crate::rng::seeded_rng(4);
        // Values on a coarse lattice so sums are exact in f32.
        let lattice = |rng: &mut rand_chacha::ChaCha8Rng| -> f32 {
            (rng.random_range(-256i32..256) as f32) / 256.0
        };
        let a = {
            let data = (0..32).map(|_| lattice(&mut rng)).collect();
            Mat::from_vec(4, 8, data)
        };
        let b = {
            let data = (0..32).map(|_| lattice(&mut rng)).collect();
            Mat::from_vec(4, 8, data)
        };
        let zero = Mat::<f32>::zeros(4, 8);

        assert_eq!(fuse(&a, &zero).unwrap(), a);
        assert_eq!(fuse(&a, &b).unwrap(), fuse(&b, &a).unwrap());

        let sum = fuse(&a, &b).unwrap();
        for i in 0..32 {
            let diff = sum.data()[i] - a.data()[i] - b.data()[i];
            assert!(diff.abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_rejects_shape_mismatch() {
        let a = Mat::<f32>::zeros(4, 8);
        let b = Mat::<f32>::zeros(8, 4);
        assert!(matches!(fuse(&a, &b), Err(SeqModelError::ShapeMismatch(_))));
    }
}
