//! Point-cloud feature extraction: a locality-preserving point-wise scan.
//!
//! Points are ordered along a Morton (z-order) curve, each point is
//! tokenized from its k-nearest neighborhood, tokens are embedded with a
//! fixed sinusoidal position code added, and a stack of gated selective-scan
//! blocks produces a per-point descriptor. Output row `i` always
//! corresponds to input point `i`; the scan ordering is undone at the end.

use super::ssm::{selective_scan, SelectiveParams};
use super::{rms_normalize, silu, FeatureMap, SeqModelError, WeightBundle};
use crate::geom::{PointCloud, Vec3};
use crate::tensor::Mat;

/// Tokenized cloud in canonical scan order.
#[derive(Debug, Clone)]
pub struct PointTokens {
    /// `N x (3k + 3)` rows: k neighbor offsets then the center coordinates.
    pub tokens: Mat<f32>,
    /// `order[pos]` is the original index of the point at scan position `pos`.
    pub order: Vec<usize>,
    pub k: usize,
}

/// Morton-order scan positions: coordinates quantized to a 1024^3 grid over
/// the cloud's bounding box, interleaved into a z-order code, ties broken by
/// original index.
pub fn canonical_scan_order(points: &[Vec3]) -> Vec<usize> {
    let mut lo = Vec3::from_element(f64::INFINITY);
    let mut hi = Vec3::from_element(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let quantize = |value: f64, lo: f64, hi: f64| -> u32 {
        let extent = hi - lo;
        if extent <= 0.0 {
            return 0;
        }
        let cell = ((value - lo) / extent * 1024.0).floor();
        (cell as i64).clamp(0, 1023) as u32
    };
    let mut keyed: Vec<(u64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let qx = quantize(p.x, lo.x, hi.x);
            let qy = quantize(p.y, lo.y, hi.y);
            let qz = quantize(p.z, lo.z, hi.z);
            (morton_interleave(qx, qy, qz), i)
        })
        .collect();
    keyed.sort();
    keyed.into_iter().map(|(_, i)| i).collect()
}

fn morton_interleave(x: u32, y: u32, z: u32) -> u64 {
    let mut code = 0u64;
    for bit in 0..10 {
        code |= ((x as u64 >> bit) & 1) << (3 * bit);
        code |= ((y as u64 >> bit) & 1) << (3 * bit + 1);
        code |= ((z as u64 >> bit) & 1) << (3 * bit + 2);
    }
    code
}

/// Indices of the k nearest neighbors of each point (self included), sorted
/// by distance with index ties broken low-first.
pub fn knn_indices(points: &[Vec3], k: usize) -> Result<Vec<Vec<usize>>, SeqModelError> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(SeqModelError::InsufficientPoints { have: n, need: k.max(1) });
    }
    let mut result = Vec::with_capacity(n);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for p in points {
        best.clear();
        for (j, q) in points.iter().enumerate() {
            let d2 = (p - q).norm_squared();
            if best.len() == k && d2 >= best[k - 1].0 {
                continue;
            }
            let at = best
                .binary_search_by(|probe| {
                    probe.partial_cmp(&(d2, j)).expect("finite distances")
                })
                .unwrap_or_else(|e| e);
            best.insert(at, (d2, j));
            best.truncate(k);
        }
        result.push(best.iter().map(|&(_, j)| j).collect());
    }
    Ok(result)
}

/// Build per-point tokens in canonical scan order. Each token holds the k
/// neighbor offsets `neighbor - center` followed by the center coordinates.
pub fn knn_tokenize(cloud: &PointCloud, k: usize) -> Result<PointTokens, SeqModelError> {
    let neighbors = knn_indices(&cloud.points, k)?;
    let order = canonical_scan_order(&cloud.points);
    let dim = 3 * k + 3;
    let mut tokens = Mat::zeros(cloud.len(), dim);
    for (pos, &idx) in order.iter().enumerate() {
        let center = cloud.points[idx];
        let row = tokens.row_mut(pos);
        for (slot, &nb) in neighbors[idx].iter().enumerate() {
            let off = cloud.points[nb] - center;
            row[slot * 3] = off.x as f32;
            row[slot * 3 + 1] = off.y as f32;
            row[slot * 3 + 2] = off.z as f32;
        }
        row[3 * k] = center.x as f32;
        row[3 * k + 1] = center.y as f32;
        row[3 * k + 2] = center.z as f32;
    }
    Ok(PointTokens { tokens, order, k })
}

/// Fixed sinusoidal position embedding over the three coordinate axes:
/// `e / 6` frequency pairs per axis, frequencies doubling from `pi/2`.
pub fn position_embed(coords: &[Vec3], e: usize) -> Result<Mat<f32>, SeqModelError> {
    if e == 0 || e % 6 != 0 {
        return Err(SeqModelError::BadDimension(format!(
            "position embedding width {e} must be a positive multiple of 6"
        )));
    }
    let freqs = e / 6;
    let mut out = Mat::zeros(coords.len(), e);
    for (i, p) in coords.iter().enumerate() {
        let row = out.row_mut(i);
        for (axis, value) in [p.x, p.y, p.z].into_iter().enumerate() {
            for j in 0..freqs {
                let omega = std::f64::consts::FRAC_PI_2 * (1u64 << j) as f64;
                let phase = omega * value;
                row[axis * 2 * freqs + 2 * j] = phase.sin() as f32;
                row[axis * 2 * freqs + 2 * j + 1] = phase.cos() as f32;
            }
        }
    }
    Ok(out)
}

pub(crate) fn selective_params_from_bundle(
    bundle: &WeightBundle,
    prefix: &str,
    embed: usize,
    state: usize,
) -> SelectiveParams<f32> {
    SelectiveParams {
        state_dim: state,
        embed_dim: embed,
        a: bundle.slice(&format!("{prefix}.ssm.a")).to_vec(),
        delta_w: bundle.slice(&format!("{prefix}.ssm.delta_w")).to_vec(),
        delta_b: bundle.slice(&format!("{prefix}.ssm.delta_b")).to_vec(),
        b_w: bundle.slice(&format!("{prefix}.ssm.b_w")).to_vec(),
        b_b: bundle.slice(&format!("{prefix}.ssm.b_b")).to_vec(),
        c_w: bundle.slice(&format!("{prefix}.ssm.c_w")).to_vec(),
        c_b: bundle.slice(&format!("{prefix}.ssm.c_b")).to_vec(),
        d_skip: bundle.slice(&format!("{prefix}.ssm.d")).to_vec(),
    }
}

fn bundle_mat(bundle: &WeightBundle, name: &str) -> Mat<f32> {
    let t = bundle.get(name);
    assert_eq!(t.shape.len(), 2, "tensor `{name}` is not a matrix");
    Mat::from_vec(t.shape[0], t.shape[1], t.data.clone())
}

/// One gated scan block: pre-norm, main/gate projections, selective scan,
/// gate multiply, output projection, residual add.
pub(crate) fn scan_block(
    x: &Mat<f32>,
    bundle: &WeightBundle,
    prefix: &str,
    state: usize,
    scan: impl Fn(&SelectiveParams<f32>, &[f32], usize) -> Result<Vec<f32>, SeqModelError>,
) -> Result<Mat<f32>, SeqModelError> {
    let width = x.cols();
    let norm_scale = bundle.slice(&format!("{prefix}.norm"));
    let mut normed = Mat::zeros(x.rows(), width);
    for r in 0..x.rows() {
        rms_normalize(x.row(r), norm_scale, normed.row_mut(r));
    }
    let main = normed.linear(
        &bundle_mat(bundle, &format!("{prefix}.in_w")),
        Some(bundle.slice(&format!("{prefix}.in_b"))),
    );
    let mut gate = normed.linear(
        &bundle_mat(bundle, &format!("{prefix}.gate_w")),
        Some(bundle.slice(&format!("{prefix}.gate_b"))),
    );
    gate.data_mut().iter_mut().for_each(|v| *v = silu(*v));

    let sp = selective_params_from_bundle(bundle, prefix, width, state);
    let scanned = scan(&sp, main.data(), main.rows())?;

    let mut gated = gate;
    for (g, s) in gated.data_mut().iter_mut().zip(&scanned) {
        *g *= s;
    }
    let projected = gated.linear(
        &bundle_mat(bundle, &format!("{prefix}.out_w")),
        Some(bundle.slice(&format!("{prefix}.out_b"))),
    );
    x.add(&projected)
        .map_err(|e| SeqModelError::ShapeMismatch(e.to_string()))
}

/// Extract a per-point feature map from an object-space cloud.
///
/// Row `i` of the result corresponds to point `i` of the input cloud.
pub fn points_ssm_forward(
    cloud: &PointCloud,
    bundle: &WeightBundle,
) -> Result<FeatureMap, SeqModelError> {
    let cfg = &bundle.config().points;
    let feature_dim = bundle.config().feature_dim;
    let toks = knn_tokenize(cloud, cfg.k)?;

    let mut x = toks.tokens.linear(
        &bundle_mat(bundle, "points.embed.w"),
        Some(bundle.slice("points.embed.b")),
    );

    // Position code of each point, in scan order, zero-padded to the
    // embedding width.
    let ordered: Vec<Vec3> = toks.order.iter().map(|&i| cloud.points[i]).collect();
    let pos = position_embed(&ordered, cfg.pos_dim)?;
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        for (c, &v) in pos.row(r).iter().enumerate() {
            row[c] += v;
        }
    }

    for b in 0..cfg.blocks {
        x = scan_block(&x, bundle, &format!("points.block{b}"), cfg.state, |sp, t, l| {
            selective_scan(sp, t, l)
        })?;
    }

    let head = x.linear(
        &bundle_mat(bundle, "points.head.w"),
        Some(bundle.slice("points.head.b")),
    );

    // Undo the canonical ordering: scan row `pos` belongs to input point
    // `order[pos]`.
    let mut out = Mat::zeros(cloud.len(), feature_dim);
    for (pos, &idx) in toks.order.iter().enumerate() {
        out.row_mut(idx).copy_from_slice(head.row(pos));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::seqmodel::ModelConfig;

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = crate::rng::seeded_rng(seed);
        PointCloud::from_points(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-0.2..0.2),
                        rng.random_range(-0.2..0.2),
                        rng.random_range(-0.2..0.2),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn knn_k1_is_self() {
        let cloud = random_cloud(1, 16);
        let toks = knn_tokenize(&cloud, 1).unwrap();
        for pos in 0..16 {
            let row = toks.tokens.row(pos);
            assert_eq!(&row[..3], &[0.0, 0.0, 0.0]);
            let idx = toks.order[pos];
            assert_eq!(row[3], cloud.points[idx].x as f32);
        }
    }

    #[test]
    fn knn_collinear_endpoints() {
        let points: Vec<Vec3> =
            (0..4).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let nb = knn_indices(&points, 2).unwrap();
        assert_eq!(nb[0], vec![0, 1]);
        assert_eq!(nb[3], vec![3, 2]);
    }

    #[test]
    fn knn_matches_brute_force() {
        let cloud = random_cloud(7, 128);
        let k = 8;
        let nb = knn_indices(&cloud.points, k).unwrap();
        for (i, p) in cloud.points.iter().enumerate() {
            // Oracle: full sort of all pairwise distances.
            let mut all: Vec<(f64, usize)> = cloud
                .points
                .iter()
                .enumerate()
                .map(|(j, q)| ((p - q).norm_squared(), j))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<usize> = all[..k].iter().map(|&(_, j)| j).collect();
            assert_eq!(nb[i], expect, "point {i}");
        }
    }

    #[test]
    fn knn_insufficient_points() {
        let cloud = random_cloud(2, 3);
        assert!(matches!(
            knn_tokenize(&cloud, 4),
            Err(SeqModelError::InsufficientPoints { .. })
        ));
    }

    #[test]
    fn position_embed_origin_pattern() {
        let coords = vec![Vec3::zeros()];
        let emb = position_embed(&coords, 12).unwrap();
        // sin(0) = 0, cos(0) = 1 interleaved.
        assert_eq!(emb.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn position_embed_is_a_function_of_position() {
        let coords = vec![Vec3::new(0.3, -0.1, 0.7), Vec3::new(0.3, -0.1, 0.7)];
        let emb = position_embed(&coords, 24).unwrap();
        assert_eq!(emb.row(0), emb.row(1));
    }

    #[test]
    fn position_embed_injective_on_grid() {
        let mut coords = Vec::new();
        for i in 0..16 {
            for j in 0..16 {
                for k in 0..16 {
                    coords.push(Vec3::new(
                        -1.0 + 2.0 * i as f64 / 15.0,
                        -1.0 + 2.0 * j as f64 / 15.0,
                        -1.0 + 2.0 * k as f64 / 15.0,
                    ));
                }
            }
        }
        let emb = position_embed(&coords, 48).unwrap();
        // Exhaustive: every pair of distinct grid points must be separated.
        let n = coords.len();
        let mut min_sep = f32::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = emb
                    .row(i)
                    .iter()
                    .zip(emb.row(j))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                min_sep = min_sep.min(d);
            }
        }
        assert!(min_sep > 1e-6, "closest embedding pair separated by {min_sep}");
    }

    #[test]
    fn position_embed_rejects_non_multiple_of_six() {
        let coords = vec![Vec3::zeros()];
        assert!(matches!(
            position_embed(&coords, 50),
            Err(SeqModelError::BadDimension(_))
        ));
    }

    #[test]
    fn canonical_order_ignores_input_permutation() {
        let cloud = random_cloud(3, 64);
        let order = canonical_scan_order(&cloud.points);

        // Reverse the points; the scan must visit the same physical
        // sequence.
        let reversed: Vec<Vec3> = cloud.points.iter().rev().copied().collect();
        let order_rev = canonical_scan_order(&reversed);
        let n = cloud.points.len();
        for (a, b) in order.iter().zip(&order_rev) {
            assert_eq!(cloud.points[*a], reversed[n - 1 - *a]);
            assert_eq!(*b, n - 1 - *a);
        }
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = ModelConfig::tiny();
        let bundle = WeightBundle::seeded(cfg.clone(), 5);
        let cloud = random_cloud(11, 32);
        let f1 = points_ssm_forward(&cloud, &bundle).unwrap();
        let f2 = points_ssm_forward(&cloud, &bundle).unwrap();
        assert_eq!(f1.rows(), 32);
        assert_eq!(f1.cols(), cfg.feature_dim);
        assert_eq!(f1, f2);
        assert!(f1.all_finite());
    }

    #[test]
    fn forward_is_not_rotation_invariant() {
        let bundle = WeightBundle::seeded(ModelConfig::tiny(), 5);
        let cloud = random_cloud(12, 32);
        let rot = nalgebra::Rotation3::from_axis_angle(
            &Vec3::z_axis(),
            std::f64::consts::FRAC_PI_2,
        )
        .into_inner();
        let rotated = PointCloud::from_points(
            cloud.points.iter().map(|p| rot * p).collect(),
        );
        let fa = points_ssm_forward(&cloud, &bundle).unwrap();
        let fb = points_ssm_forward(&rotated, &bundle).unwrap();
        let max_diff = fa
            .data()
            .iter()
            .zip(fb.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 0.0);
    }

    #[test]
    fn forward_rows_follow_input_permutation() {
        let bundle = WeightBundle::seeded(ModelConfig::tiny(), 5);
        let cloud = random_cloud(13, 48);
        let base = points_ssm_forward(&cloud, &bundle).unwrap();

        let mut rng = crate::rng::seeded_rng(99);
        let mut perm: Vec<usize> = (0..48).collect();
        for i in (1..48).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let permuted = PointCloud::from_points(
            perm.iter().map(|&i| cloud.points[i]).collect(),
        );
        let shuffled = points_ssm_forward(&permuted, &bundle).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert_eq!(shuffled.row(new_row), base.row(old_row));
        }
    }
}
