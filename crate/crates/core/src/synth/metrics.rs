//! Pose-accuracy metrics: average point distance (ADD), its symmetric
//! variant (ADD-S), recall at a tenth of the object diameter, and the
//! normalized area under the ADD accuracy-threshold curve.

use super::SyntheticObject;
use crate::geom::Pose;

/// Pairwise (tree) summation: error grows with log n instead of n, and
/// sums of a power-of-two count of identical values stay exact.
pub(crate) fn pairwise_sum(values: &mut [f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let mut len = n;
            while len > 1 {
                let half = len / 2;
                for i in 0..half {
                    values[i] = values[2 * i] + values[2 * i + 1];
                }
                if len % 2 == 1 {
                    values[half] = values[len - 1];
                    len = half + 1;
                } else {
                    len = half;
                }
            }
            values[0]
        }
    }
}

/// Mean distance between model points transformed by the estimated and the
/// ground-truth pose.
pub fn add_metric(model: &SyntheticObject, est: &Pose, gt: &Pose) -> f64 {
    let pts = &model.model_points.points;
    let mut dists: Vec<f64> = pts
        .iter()
        .map(|p| (est.transform_point(p) - gt.transform_point(p)).norm())
        .collect();
    pairwise_sum(&mut dists) / pts.len() as f64
}

/// Symmetric variant: mean distance from each estimated-pose point to the
/// nearest ground-truth-pose point.
pub fn adds_metric(model: &SyntheticObject, est: &Pose, gt: &Pose) -> f64 {
    let pts = &model.model_points.points;
    let gt_pts: Vec<_> = pts.iter().map(|p| gt.transform_point(p)).collect();
    let mut dists: Vec<f64> = pts
        .iter()
        .map(|p| {
            let e = est.transform_point(p);
            gt_pts
                .iter()
                .map(|g| (e - g).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    pairwise_sum(&mut dists) / pts.len() as f64
}

/// Fraction of instances whose ADD is below a tenth of their object
/// diameter.
pub fn recall_add01d(adds: &[f64], diameters: &[f64]) -> f64 {
    assert_eq!(adds.len(), diameters.len());
    if adds.is_empty() {
        return 0.0;
    }
    let hits = adds
        .iter()
        .zip(diameters)
        .filter(|(a, d)| **a < 0.1 * **d)
        .count();
    hits as f64 / adds.len() as f64
}

/// Normalized area under the accuracy-vs-threshold curve for thresholds in
/// `[0, max_threshold]`: the exact integral of the empirical CDF, which per
/// sample contributes `(max_threshold - min(add, max_threshold))`.
pub fn auc_add(adds: &[f64], max_threshold: f64) -> f64 {
    if adds.is_empty() {
        return 0.0;
    }
    let sum: f64 = adds
        .iter()
        .map(|&a| 1.0 - a.min(max_threshold) / max_threshold)
        .sum();
    sum / adds.len() as f64
}

/// Per-instance evaluation record.
#[derive(Debug, Clone)]
pub struct InstanceMetrics {
    pub index: usize,
    pub seed: u64,
    pub add: f64,
    pub add_s: f64,
    pub diameter: f64,
    pub success_01d: bool,
    /// ADD after each alignment iteration.
    pub iteration_adds: Vec<f64>,
    pub correspondences: Vec<usize>,
    pub failed: bool,
    /// Wall-clock seconds; excluded from deterministic serialization.
    pub wall_seconds: f64,
}

/// Aggregated evaluation results.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub instances: Vec<InstanceMetrics>,
    pub recall_add01d: f64,
    pub auc_add: f64,
    pub mean_add: f64,
    pub median_add: f64,
}

impl MetricsReport {
    pub fn from_instances(instances: Vec<InstanceMetrics>) -> Self {
        let adds: Vec<f64> = instances.iter().map(|i| i.add).collect();
        let diameters: Vec<f64> = instances.iter().map(|i| i.diameter).collect();
        let recall = recall_add01d(&adds, &diameters);
        let auc = auc_add(&adds, 0.1);
        let mean = if adds.is_empty() {
            0.0
        } else {
            adds.iter().sum::<f64>() / adds.len() as f64
        };
        let median = median(&adds);
        MetricsReport {
            instances,
            recall_add01d: recall,
            auc_add: auc,
            mean_add: mean,
            median_add: median,
        }
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{compose, PointCloud, Pose, Vec3};
    use crate::synth::gen_object;
    use rand::Rng;

    #[test]
    fn add_zero_for_equal_poses() {
        let obj = gen_object(1, 128);
        let pose = crate::synth::look_at_pose(Vec3::new(0.3, 0.4, 0.5));
        assert_eq!(add_metric(&obj, &pose, &pose), 0.0);
    }

    #[test]
    fn pure_translation_add_is_exact() {
        // A planar object keeps each per-point distance bit-exact under a
        // pure z-translation, and the pairwise mean of a power-of-two count
        // of identical values is exact.
        let mut rng = crate::rng::seeded_rng(2);
        let points: Vec<Vec3> = (0..128)
            .map(|_| Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0))
            .collect();
        let obj = crate::synth::SyntheticObject {
            model_points: PointCloud::from_points(points),
            diameter: 0.2,
            seed: 0,
        };
        let gt = Pose { rotation: crate::geom::Mat3::identity(), translation: Vec3::zeros() };
        let offset = Pose {
            rotation: crate::geom::Mat3::identity(),
            translation: Vec3::new(0.0, 0.0, 0.02),
        };
        let est = compose(&offset, &gt);
        assert_eq!(add_metric(&obj, &est, &gt), 0.02);
    }

    #[test]
    fn add_s_never_exceeds_add() {
        let mut rng = crate::rng::seeded_rng(3);
        for i in 0..100 {
            let obj = gen_object(100 + i, 96);
            let gt = Pose {
                rotation: crate::geom::random_rotation(&mut rng, 3.0),
                translation: Vec3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(0.5..1.0),
                ),
            };
            let est = Pose {
                rotation: crate::geom::random_rotation(&mut rng, 3.0),
                translation: gt.translation + Vec3::new(0.01, -0.02, 0.015),
            };
            let add = add_metric(&obj, &est, &gt);
            let add_s = adds_metric(&obj, &est, &gt);
            assert!(add_s <= add + 1e-12, "instance {i}: {add_s} > {add}");
        }
    }

    #[test]
    fn adds_matches_small_brute_force() {
        // Independent oracle on a tiny hand-held object.
        let obj = crate::synth::SyntheticObject {
            model_points: PointCloud::from_points(vec![
                Vec3::new(0.01, 0.0, 0.0),
                Vec3::new(-0.01, 0.0, 0.0),
                Vec3::new(0.0, 0.015, 0.0),
            ]),
            diameter: 0.03,
            seed: 0,
        };
        let gt = Pose::identity();
        let est = Pose {
            rotation: crate::geom::Mat3::identity(),
            translation: Vec3::new(0.004, 0.0, 0.0),
        };
        let got = adds_metric(&obj, &est, &gt);
        // By hand: each translated point against all originals.
        let pts = &obj.model_points.points;
        let mut expect = 0.0;
        for p in pts {
            let e = p + Vec3::new(0.004, 0.0, 0.0);
            let d = pts.iter().map(|g| (e - g).norm()).fold(f64::INFINITY, f64::min);
            expect += d;
        }
        expect /= 3.0;
        assert!((got - expect).abs() < 1e-15);
    }

    #[test]
    fn add_is_left_composition_invariant() {
        let obj = gen_object(4, 128);
        let mut rng = crate::rng::seeded_rng(5);
        let gt = Pose {
            rotation: crate::geom::random_rotation(&mut rng, 2.0),
            translation: Vec3::new(0.1, 0.2, 0.8),
        };
        let est = Pose {
            rotation: crate::geom::random_rotation(&mut rng, 2.0),
            translation: Vec3::new(0.15, 0.18, 0.85),
        };
        let extra = Pose {
            rotation: crate::geom::random_rotation(&mut rng, 2.0),
            translation: Vec3::new(-0.3, 0.4, 0.2),
        };
        let base = add_metric(&obj, &est, &gt);
        let moved = add_metric(&obj, &compose(&extra, &est), &compose(&extra, &gt));
        assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn recall_and_auc_trivial_cases() {
        assert_eq!(recall_add01d(&[0.0, 0.0], &[0.1, 0.2]), 1.0);
        assert_eq!(auc_add(&[0.0, 0.0], 0.1), 1.0);
        assert_eq!(auc_add(&[0.5, 0.2], 0.1), 0.0);
    }

    #[test]
    fn auc_two_sample_closed_form_is_exact() {
        assert_eq!(auc_add(&[0.025, 0.075], 0.1), 0.5);
    }

    #[test]
    fn auc_matches_explicit_step_integration() {
        let mut rng = crate::rng::seeded_rng(6);
        for _ in 0..20 {
            let n = rng.random_range(1..50);
            let adds: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.2)).collect();
            let got = auc_add(&adds, 0.1);

            // Oracle 1: explicit sweep over sorted thresholds.
            let mut sorted = adds.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let cap = 0.1;
            let mut area = 0.0;
            let mut prev = 0.0;
            for (k, &a) in sorted.iter().enumerate() {
                let t = a.min(cap);
                area += (k as f64 / n as f64) * (t - prev);
                prev = t;
                if a >= cap {
                    break;
                }
            }
            let below = sorted.iter().filter(|&&a| a < cap).count();
            area += (cap - prev) * (below as f64 / n as f64);
            let step = area / cap;
            assert!((got - step).abs() < 1e-12);

            // Oracle 2: 10k-point Riemann sum.
            let samples = 10_000;
            let mut riemann = 0.0;
            for s in 0..samples {
                let tau = cap * (s as f64 + 0.5) / samples as f64;
                let frac = adds.iter().filter(|&&a| a <= tau).count() as f64 / n as f64;
                riemann += frac / samples as f64;
            }
            assert!((got - riemann).abs() < 1e-3);
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
