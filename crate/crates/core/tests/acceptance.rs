//! Acceptance suite: the library-level exit criteria, one test per
//! criterion, each printing a pass line with the measured values.
//! File-format and command-line criteria live in the companion crate's
//! acceptance suite.

use std::time::Instant;

use rand::Rng;

use refpose_core::align::{alignment_loss, loss_gradient, run_toy_training};
use refpose_core::geom::{
    self, apply_pose, focalize, rotation_angle, CorrespondenceLabels, PointCloud, Pose, Vec3,
};
use refpose_core::rng::seeded_rng;
use refpose_core::seqmodel::rgb::{cross_merge, cross_scan, Grid};
use refpose_core::seqmodel::ssm::{
    discretize_zoh, selective_scan, selective_scan_naive, softplus_inverse,
    zoh_input_factor_closed, zoh_input_factor_series, SelectiveParams, StateSpaceParams,
};
use refpose_core::seqmodel::{points, rgb, ModelConfig, WeightBundle};
use refpose_core::synth::{
    self, auc_add, eval_run, EvalConfig, FeatureMode, PoseGap, SceneConfig,
};
use refpose_core::tensor::Mat;
use refpose_core::view::{ColorImage, Mask};

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[test]
fn criterion_01_wsvd_recovery() {
    let started = Instant::now();
    let mut rng = seeded_rng(0xACC1);
    let mut worst_rot = 0.0f64;
    let mut worst_trans = 0.0f64;
    for _ in 0..1000 {
        let src = PointCloud::from_points(
            (0..50)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                    )
                })
                .collect(),
        );
        let pose = Pose {
            rotation: geom::random_rotation(&mut rng, std::f64::consts::PI),
            translation: Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
        };
        let dst = apply_pose(&src, &pose);
        let weights: Vec<f64> = (0..50).map(|_| rng.random_range(0.05..2.0)).collect();
        let est = geom::wsvd(&src, &dst, &weights).expect("well-posed instance");
        worst_rot = worst_rot.max(rotation_angle(&est.rotation, &pose.rotation));
        worst_trans = worst_trans.max((est.translation - pose.translation).norm());
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(worst_rot < 1e-6, "worst rotation error {worst_rot}");
    assert!(worst_trans < 1e-8, "worst translation error {worst_trans}");
    assert!(elapsed < 5.0, "suite took {elapsed:.2} s");
    println!(
        "[PASS] criterion 1 wsvd-recovery: 1000 instances, worst rotation {worst_rot:.2e} rad, \
         worst translation {worst_trans:.2e} m, {elapsed:.2} s"
    );
}

fn random_scan_params(rng: &mut rand_chacha::ChaCha8Rng, e: usize, m: usize) -> SelectiveParams<f64> {
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

fn params_to_f32(p: &SelectiveParams<f64>) -> SelectiveParams<f32> {
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

#[test]
fn criterion_02_scan_equivalence() {
    let started = Instant::now();
    let mut rng = seeded_rng(0xACC2);
    let mut max_f32 = 0.0f64;
    let mut max_f64 = 0.0f64;
    for _ in 0..100 {
        let e = rng.random_range(1..=32usize);
        let m = rng.random_range(1..=32usize);
        let l = rng.random_range(1..=2048usize);
        let params = random_scan_params(&mut rng, e, m);
        let tokens: Vec<f64> = (0..l * e).map(|_| rng.random_range(-1.0..1.0)).collect();

        let fast = selective_scan(&params, &tokens, l).unwrap();
        let naive = selective_scan_naive(&params, &tokens, l).unwrap();
        for (a, b) in fast.iter().zip(&naive) {
            max_f64 = max_f64.max((a - b).abs());
        }

        let p32 = params_to_f32(&params);
        let t32: Vec<f32> = tokens.iter().map(|&v| v as f32).collect();
        let fast32 = selective_scan(&p32, &t32, l).unwrap();
        let naive32 = selective_scan_naive(&p32, &t32, l).unwrap();
        for (a, b) in fast32.iter().zip(&naive32) {
            max_f32 = max_f32.max((a - b).abs() as f64);
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(max_f32 < 1e-5, "single-precision max error {max_f32}");
    assert!(max_f64 < 1e-10, "double-precision max error {max_f64}");
    assert!(elapsed < 30.0, "suite took {elapsed:.2} s");
    println!(
        "[PASS] criterion 2 scan-equivalence: 100 instances, max error {max_f32:.2e} (single) \
         / {max_f64:.2e} (double), {elapsed:.2} s"
    );
}

#[test]
fn criterion_03_zoh_singular_limit() {
    // Series vs closed form across the overlap window, both signs.
    let mut worst_branch = 0.0f64;
    let mut z = 1e-6f64;
    while z <= 1e-2 {
        for sign in [-1.0, 1.0] {
            let diff =
                (zoh_input_factor_series(sign * z) - zoh_input_factor_closed(sign * z)).abs();
            worst_branch = worst_branch.max(diff);
        }
        z *= 1.1;
    }
    assert!(worst_branch < 1e-9, "branch disagreement {worst_branch}");

    // Discretized input vector against Simpson quadrature of the integral
    // form on 100 random parameter draws.
    let mut rng = seeded_rng(0xACC3);
    let mut worst_quad = 0.0f64;
    for _ in 0..100 {
        let a = -rng.random_range(1e-6..10.0f64);
        let b = rng.random_range(-2.0..2.0);
        let delta = rng.random_range(1e-4..0.5);
        let p = StateSpaceParams { a: vec![a], b: vec![b], c: vec![1.0], d: 0.0, delta };
        let d = discretize_zoh(&p);
        let n = 4000usize;
        let h = delta / n as f64;
        let f = |s: f64| (s * a).exp() * b;
        let mut acc = f(0.0) + f(delta);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        let integral = acc * h / 3.0;
        worst_quad = worst_quad.max((d.b_bar[0] - integral).abs());
    }
    assert!(worst_quad < 1e-8, "quadrature disagreement {worst_quad}");
    println!(
        "[PASS] criterion 3 zoh-singular-limit: branch agreement {worst_branch:.2e}, \
         quadrature agreement {worst_quad:.2e}"
    );
}

#[test]
fn criterion_04_structural_inverses() {
    // Focalize/apply round trip under 1e-9 over 100 seeded poses.
    let mut rng = seeded_rng(0xACC4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let pose = Pose {
            rotation: geom::random_rotation(&mut rng, std::f64::consts::PI),
            translation: Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
        };
        let cloud = PointCloud::from_points(
            (0..64)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                    )
                })
                .collect(),
        );
        let back = focalize(&apply_pose(&cloud, &pose), &pose);
        for (a, b) in back.points.iter().zip(&cloud.points) {
            worst = worst.max((a - b).norm());
        }
    }
    assert!(worst < 1e-9, "round-trip error {worst}");

    // Cross-scan / cross-merge bit-exact identity.
    for (h, w, c) in [(1, 1, 4), (2, 3, 1), (7, 5, 6), (16, 16, 3)] {
        let data: Vec<f32> = (0..h * w * c)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        let grid = Grid { height: h, width: w, tokens: Mat::from_vec(h * w, c, data) };
        let merged = cross_merge(&cross_scan(&grid), h, w);
        let exact = grid
            .tokens
            .data()
            .iter()
            .zip(merged.tokens.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(exact, "{h}x{w}x{c} merge is not a bit-exact inverse");
    }
    println!(
        "[PASS] criterion 4 structural-inverses: focalize round trip {worst:.2e} m, \
         cross-scan merge bit-exact (file formats covered by the toolkit suite)"
    );
}

fn oracle_eval_config(n_pairs: usize, seed: u64, max_rotation_deg: f64) -> EvalConfig {
    EvalConfig {
        n_pairs,
        seed,
        iters: 3,
        feature_mode: FeatureMode::Oracle,
        pose_gap: PoseGap {
            max_rotation: max_rotation_deg.to_radians(),
            max_translation: 0.05,
        },
        n_points: 1024,
        oracle_channels: 64,
        oracle_gamma: 1.0,
        use_rgb: false,
        threads: 1,
        scene: SceneConfig { splat_radius: 1.5, ..SceneConfig::default() },
    }
}

#[test]
fn criterion_05_oracle_end_to_end() {
    let started = Instant::now();
    let report = eval_run(&oracle_eval_config(100, 0xACC5, 30.0));
    let elapsed = started.elapsed().as_secs_f64();

    assert_eq!(report.instances.len(), 100);
    assert!(
        report.instances.iter().all(|i| !i.failed),
        "instances failed mid-loop"
    );
    assert_eq!(report.recall_add01d, 1.0, "recall {}", report.recall_add01d);
    assert!(report.median_add < 1e-3, "median ADD {}", report.median_add);

    let mut prev_median = f64::INFINITY;
    let mut medians = Vec::new();
    for it in 0..3 {
        let mut adds: Vec<f64> = report
            .instances
            .iter()
            .map(|i| i.iteration_adds[it])
            .collect();
        let m = median(&mut adds);
        assert!(
            m <= prev_median,
            "iteration {it} median {m} regressed from {prev_median}"
        );
        prev_median = m;
        medians.push(m);
    }
    assert!(elapsed < 120.0, "suite took {elapsed:.2} s");
    println!(
        "[PASS] criterion 5 oracle-end-to-end: recall 1.0, median ADD {:.2e} m, \
         per-iteration medians {:.2e}/{:.2e}/{:.2e}, {elapsed:.1} s",
        report.median_add, medians[0], medians[1], medians[2]
    );
}

#[test]
fn criterion_06_pose_gap_robustness() {
    let report = eval_run(&oracle_eval_config(100, 0xACC6, 60.0));
    assert_eq!(report.instances.len(), 100);
    let improved = report
        .instances
        .iter()
        .filter(|i| i.iteration_adds.len() == 3 && i.iteration_adds[2] < i.iteration_adds[0])
        .count();
    assert!(
        improved >= 90,
        "iteration 3 beat iteration 1 on only {improved} of 100 seeds"
    );
    println!(
        "[PASS] criterion 6 pose-gap-robustness: 60 degree gap, iteration 3 < iteration 1 \
         on {improved}/100 seeds"
    );
}

#[test]
fn criterion_07_gradient_correctness() {
    let mut rng = seeded_rng(0xACC7);
    let h = 1e-4;
    let mut max_rel = 0.0f64;
    for _ in 0..20 {
        let n = 8;
        let mut a = Mat::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a.set(i, j, rng.random_range(-1.5..1.5));
            }
        }
        let labels = CorrespondenceLabels {
            query_to_ref: (0..n)
                .map(|_| {
                    (rng.random_range(0.0..1.0) >= 0.2).then(|| rng.random_range(0..n))
                })
                .collect(),
            ref_to_query: (0..n)
                .map(|_| {
                    (rng.random_range(0.0..1.0) >= 0.2).then(|| rng.random_range(0..n))
                })
                .collect(),
        };
        let grad = loss_gradient(&a, &labels).unwrap();
        for _ in 0..10 {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            let mut plus = a.clone();
            plus.set(i, j, a.get(i, j) + h);
            let mut minus = a.clone();
            minus.set(i, j, a.get(i, j) - h);
            let fd = (alignment_loss(&plus, &labels).unwrap()
                - alignment_loss(&minus, &labels).unwrap())
                / (2.0 * h);
            let analytic = grad.get(i, j);
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            max_rel = max_rel.max(((fd - analytic) / denom).abs());
        }
    }
    assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
    println!(
        "[PASS] criterion 7 gradient-correctness: 20 instances x 10 entries, \
         max relative error {max_rel:.2e}"
    );
}

#[test]
fn criterion_08_toy_training_descent() {
    let out = run_toy_training(500, 0, 0.2);
    assert!(
        out.final_loss <= 0.5 * out.initial_loss,
        "loss {:.4} -> {:.4} did not halve",
        out.initial_loss,
        out.final_loss
    );
    assert!(
        out.trained_accuracy >= out.untrained_accuracy,
        "held-out accuracy dropped: {:.3} -> {:.3}",
        out.untrained_accuracy,
        out.trained_accuracy
    );
    println!(
        "[PASS] criterion 8 toy-training-descent: loss {:.3} -> {:.3}, held-out accuracy \
         {:.3} -> {:.3}",
        out.initial_loss, out.final_loss, out.untrained_accuracy, out.trained_accuracy
    );
}

#[test]
fn criterion_09_metric_closed_forms() {
    // Pure-translation ADD, exact: planar object, power-of-two point count.
    let mut rng = seeded_rng(0xACC9);
    let points: Vec<Vec3> = (0..128)
        .map(|_| Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0))
        .collect();
    let obj = synth::SyntheticObject {
        model_points: PointCloud::from_points(points),
        diameter: 0.2,
        seed: 0,
    };
    let gt = Pose::identity();
    let est = Pose {
        rotation: geom::Mat3::identity(),
        translation: Vec3::new(0.0, 0.0, 0.02),
    };
    let add = synth::add_metric(&obj, &est, &gt);
    assert_eq!(add, 0.02, "pure-translation ADD {add}");

    // Two-sample AUC at the 0.1 m cap, exact.
    let auc = auc_add(&[0.025, 0.075], 0.1);
    assert_eq!(auc, 0.5, "AUC {auc}");

    // Uniform-softmax loss equals 2 ln N, exact at N = 8.
    let n = 8;
    let a = Mat::<f64>::zeros(n, n);
    let labels = CorrespondenceLabels {
        query_to_ref: (0..n).map(Some).collect(),
        ref_to_query: (0..n).map(Some).collect(),
    };
    let loss = alignment_loss(&a, &labels).unwrap();
    assert_eq!(loss, 2.0 * (n as f64).ln(), "uniform loss {loss}");

    println!(
        "[PASS] criterion 9 metric-closed-forms: translation ADD exact, two-sample AUC exact, \
         uniform loss exact"
    );
}

#[test]
fn criterion_11_shape_and_ordering_contracts() {
    // Desk-scale extractors: N x 256 output with row i bound to point i,
    // verified under a random input permutation.
    let config = ModelConfig::default();
    let bundle = WeightBundle::seeded(config.clone(), 0xACCB);
    let mut rng = seeded_rng(0xACCC);

    let n = 300;
    let cloud = PointCloud::from_points(
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-0.15..0.15),
                )
            })
            .collect(),
    );
    let base = points::points_ssm_forward(&cloud, &bundle).unwrap();
    assert_eq!((base.rows(), base.cols()), (n, 256));

    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let permuted_cloud =
        PointCloud::from_points(perm.iter().map(|&i| cloud.points[i]).collect());
    let permuted = points::points_ssm_forward(&permuted_cloud, &bundle).unwrap();
    for (new_row, &old_row) in perm.iter().enumerate() {
        assert_eq!(
            permuted.row(new_row),
            base.row(old_row),
            "point feature row moved incorrectly under permutation"
        );
    }

    // Image extractor: rows bound to the pixel-coordinate rows.
    let side = config.rgb.input;
    let mut image = ColorImage::filled(side, side, [0.0; 3]);
    for v in image.data.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    let mask = Mask::filled(side, side, true);
    let coords: Vec<[u32; 2]> = (0..n)
        .map(|_| {
            [
                rng.random_range(0..side as u32),
                rng.random_range(0..side as u32),
            ]
        })
        .collect();
    let base_rgb = rgb::rgb_ssm_forward(&image, &mask, &coords, &bundle).unwrap();
    assert_eq!((base_rgb.rows(), base_rgb.cols()), (n, 256));
    let permuted_coords: Vec<[u32; 2]> = perm.iter().map(|&i| coords[i]).collect();
    let permuted_rgb =
        rgb::rgb_ssm_forward(&image, &mask, &permuted_coords, &bundle).unwrap();
    for (new_row, &old_row) in perm.iter().enumerate() {
        assert_eq!(
            permuted_rgb.row(new_row),
            base_rgb.row(old_row),
            "image feature row moved incorrectly under permutation"
        );
    }

    println!(
        "[PASS] criterion 11 shape-ordering: both extractors emit {n}x256 with row i bound \
         to point i under permutation"
    );
}
