//! Rigid-body geometry: pose algebra, depth back-projection, focalization,
//! weighted-SVD pose solving, and ground-truth correspondence labels.
//!
//! Conventions: a [`Pose`] maps object coordinates to camera coordinates,
//! `p_cam = R * p_obj + t`. Focalization is the inverse map
//! `p_obj = R^T (p_cam - t)`, which carries a camera-space cloud into the
//! object frame. All distances are meters.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::view::{DepthMap, Mask};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("degenerate correspondences: {0}")]
    DegenerateCorrespondences(&'static str),
    #[error("invalid pose: {0}")]
    InvalidPose(&'static str),
    #[error("depth and mask dimensions differ")]
    DimensionMismatch,
}

/// Rigid transform from the object coordinate system to a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeomError> {
        let pose = Pose { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    /// Checks orthonormality (`||R^T R - I||_inf < 1e-6`) and `det R = +1`.
    pub fn validate(&self) -> Result<(), GeomError> {
        if !self.rotation.iter().all(|v| v.is_finite())
            || !self.translation.iter().all(|v| v.is_finite())
        {
            return Err(GeomError::InvalidPose("non-finite entries"));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let dev = (gram - Mat3::identity()).abs().max();
        if dev >= 1e-6 {
            return Err(GeomError::InvalidPose("rotation is not orthonormal"));
        }
        if (self.rotation.determinant() - 1.0).abs() >= 1e-6 {
            return Err(GeomError::InvalidPose("rotation determinant is not +1"));
        }
        Ok(())
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn untransform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// `compose(a, b)` maps `p` to `a(b(p))`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn invert(a: &Pose) -> Pose {
    let rt = a.rotation.transpose();
    Pose { rotation: rt, translation: -(rt * a.translation) }
}

/// Geodesic angle between two rotations, `acos((trace(R1^T R2) - 1) / 2)`.
pub fn rotation_angle(a: &Mat3, b: &Mat3) -> f64 {
    let cos = ((a.transpose() * b).trace() - 1.0) / 2.0;
    cos.clamp(-1.0, 1.0).acos()
}

/// Uniformly random unit axis rotated by an angle drawn from `[0, max_angle]`.
pub fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Mat3 {
    let axis = random_unit_vector(rng);
    let angle = rng.random_range(0.0..=max_angle.max(0.0));
    nalgebra::Rotation3::from_axis_angle(
        &nalgebra::Unit::new_unchecked(axis),
        angle,
    )
    .into_inner()
}

pub fn random_unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Metric point cloud with optional per-point source-pixel provenance.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// `(u, v)` pixel each point was back-projected from, when known.
    pub pixel_coords: Option<Vec<[u32; 2]>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vec3>) -> Self {
        PointCloud { points, pixel_coords: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Ground-truth match labels for both matching directions; `None` marks a
/// discarded point whose nearest counterpart lies beyond the threshold.
#[derive(Debug, Clone)]
pub struct CorrespondenceLabels {
    pub query_to_ref: Vec<Option<usize>>,
    pub ref_to_query: Vec<Option<usize>>,
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), GeomError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeomError::InvalidPose("invalid camera intrinsics"))
        }
    }
}

/// Back-project the masked, valid-depth pixels of a depth map into a
/// camera-space cloud. `unit_scale` converts stored depth values to meters
/// (0.001 for millimeter maps, 1.0 for maps already in meters).
pub fn backproject(
    depth: &DepthMap,
    mask: &Mask,
    intr: &CameraIntrinsics,
    unit_scale: f64,
) -> Result<PointCloud, GeomError> {
    if depth.width != mask.width || depth.height != mask.height {
        return Err(GeomError::DimensionMismatch);
    }
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            if !mask.at(u, v) {
                continue;
            }
            let raw = depth.at(u, v);
            if raw <= 0.0 {
                continue;
            }
            let z = raw * unit_scale;
            let x = (u as f64 - intr.cx) * z / intr.fx;
            let y = (v as f64 - intr.cy) * z / intr.fy;
            points.push(Vec3::new(x, y, z));
            pixels.push([u as u32, v as u32]);
        }
    }
    if points.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    Ok(PointCloud { points, pixel_coords: Some(pixels) })
}

/// Transform a camera-space cloud into the object frame: `R^T (p - t)`.
pub fn focalize(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    let rt = pose.rotation.transpose();
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| rt * (p - pose.translation))
            .collect(),
        pixel_coords: cloud.pixel_coords.clone(),
    }
}

/// Transform an object-frame cloud into camera space: `R p + t`.
pub fn apply_pose(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| pose.rotation * p + pose.translation)
            .collect(),
        pixel_coords: cloud.pixel_coords.clone(),
    }
}

pub fn centroid(cloud: &PointCloud) -> Result<Vec3, GeomError> {
    if cloud.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    let sum: Vec3 = cloud.points.iter().sum();
    Ok(sum / cloud.len() as f64)
}

/// Resample a cloud to exactly `target_n` points: uniformly without
/// replacement when enough points exist, with replacement otherwise.
/// Deterministic for a given seed.
pub fn resample(
    cloud: &PointCloud,
    target_n: usize,
    seed: u64,
) -> Result<PointCloud, GeomError> {
    if cloud.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    let n = cloud.len();
    let mut rng = crate::rng::seeded_rng(seed);
    let indices: Vec<usize> = if n >= target_n {
        // Partial Fisher-Yates: the first target_n entries of a shuffle.
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..target_n {
            let j = rng.random_range(i..n);
            pool.swap(i, j);
        }
        pool.truncate(target_n);
        pool
    } else {
        (0..target_n).map(|_| rng.random_range(0..n)).collect()
    };
    let points = indices.iter().map(|&i| cloud.points[i]).collect();
    let pixel_coords = cloud
        .pixel_coords
        .as_ref()
        .map(|px| indices.iter().map(|&i| px[i]).collect());
    Ok(PointCloud { points, pixel_coords })
}

/// Solve the weighted least-squares rigid transform mapping `src` onto
/// `dst`: minimize `sum_k w_k ||R src_k + t - dst_k||^2`.
///
/// Weighted centroids are removed, the weighted covariance is decomposed
/// with an SVD, and a possible reflection is corrected with the
/// `diag(1, 1, det(V U^T))` sign fix, so the result is always a proper
/// rotation.
pub fn wsvd(
    src: &PointCloud,
    dst: &PointCloud,
    weights: &[f64],
) -> Result<Pose, GeomError> {
    let k = src.len();
    if k != dst.len() || k != weights.len() {
        return Err(GeomError::DegenerateCorrespondences(
            "src, dst, and weights lengths differ",
        ));
    }
    if k < 3 {
        return Err(GeomError::DegenerateCorrespondences(
            "fewer than 3 correspondences",
        ));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(GeomError::DegenerateCorrespondences(
            "weights must be finite and nonnegative",
        ));
    }
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return Err(GeomError::DegenerateCorrespondences("all weights zero"));
    }

    let mut s_bar = Vec3::zeros();
    let mut d_bar = Vec3::zeros();
    for i in 0..k {
        s_bar += weights[i] * src.points[i];
        d_bar += weights[i] * dst.points[i];
    }
    s_bar /= wsum;
    d_bar /= wsum;

    let mut h = Mat3::zeros();
    for i in 0..k {
        let s = src.points[i] - s_bar;
        let d = dst.points[i] - d_bar;
        h += weights[i] * s * d.transpose();
    }

    let svd = h.svd(true, true);
    let u = svd.u.ok_or(GeomError::DegenerateCorrespondences("svd failed"))?;
    let v_t = svd.v_t.ok_or(GeomError::DegenerateCorrespondences("svd failed"))?;
    let sigma = svd.singular_values;
    if sigma[1] < 1e-12 * sigma[0] {
        return Err(GeomError::DegenerateCorrespondences(
            "weighted source points are rank deficient (collinear)",
        ));
    }

    let v = v_t.transpose();
    let det = (v * u.transpose()).determinant();
    let d = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, det.signum()));
    let rotation = v * d * u.transpose();
    let translation = d_bar - rotation * s_bar;
    Ok(Pose { rotation, translation })
}

/// Label each query point with its nearest reference point in the object
/// frame after focalizing the query cloud by `gt`; pairs farther than
/// `threshold` are discarded. The reverse direction is built the same way
/// against the focalized query cloud.
pub fn nearest_labels(
    query_cam: &PointCloud,
    ref_obj: &PointCloud,
    gt: &Pose,
    threshold: f64,
) -> CorrespondenceLabels {
    let query_obj = focalize(query_cam, gt);
    let query_to_ref = nearest_direction(&query_obj.points, &ref_obj.points, threshold);
    let ref_to_query = nearest_direction(&ref_obj.points, &query_obj.points, threshold);
    CorrespondenceLabels { query_to_ref, ref_to_query }
}

fn nearest_direction(from: &[Vec3], to: &[Vec3], threshold: f64) -> Vec<Option<usize>> {
    from.iter()
        .map(|p| {
            let mut best = usize::MAX;
            let mut best_d2 = f64::INFINITY;
            for (j, q) in to.iter().enumerate() {
                let d2 = (p - q).norm_squared();
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = j;
                }
            }
            if best != usize::MAX && best_d2.sqrt() <= threshold {
                Some(best)
            } else {
                None
            }
        })
        .collect()
}
