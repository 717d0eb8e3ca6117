//! Alignment supervision: bidirectional cross-entropy over the affinity
//! matrix, its analytic gradient, and a micro-scale training loop that
//! backpropagates through refinement and affinity while the feature
//! extractors stay frozen.
//!
//! The loss covers both matching directions: softmax cross-entropy over
//! each labeled query row, plus the same over each labeled reference
//! column; points whose nearest counterpart exceeded the label threshold
//! are discarded and contribute nothing.

use rand::Rng;

use super::attn::{
    bucket_matrix, mat_f32_to_f64, matmul_nt, matmul_tn, refine_backward,
    refine_forward_f64, AttnGrads, RefineParams,
};
use super::AlignError;
use crate::geom::{nearest_labels, CorrespondenceLabels, PointCloud, Pose, Vec3};
use crate::tensor::{FeatureMap, Mat};

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = values.map(|v| (v - m).exp()).sum();
    m + z.ln()
}

fn check_label_shape(
    a: &Mat<f64>,
    labels: &CorrespondenceLabels,
) -> Result<(), AlignError> {
    if labels.query_to_ref.len() != a.rows() || labels.ref_to_query.len() != a.cols() {
        return Err(AlignError::Shape(format!(
            "labels ({} query, {} ref) do not match affinity {}x{}",
            labels.query_to_ref.len(),
            labels.ref_to_query.len(),
            a.rows(),
            a.cols()
        )));
    }
    for l in labels.query_to_ref.iter().flatten() {
        if *l >= a.cols() {
            return Err(AlignError::Shape("query label out of range".into()));
        }
    }
    for l in labels.ref_to_query.iter().flatten() {
        if *l >= a.rows() {
            return Err(AlignError::Shape("reference label out of range".into()));
        }
    }
    Ok(())
}

/// Bidirectional cross-entropy: the mean over labeled query rows of
/// `-log softmax(row)[target]` plus the mean over labeled reference columns
/// of the same on the transposed scores.
pub fn alignment_loss(
    a: &Mat<f64>,
    labels: &CorrespondenceLabels,
) -> Result<f64, AlignError> {
    check_label_shape(a, labels)?;
    let mut total = 0.0;
    let mut any = false;

    let mut q_sum = 0.0;
    let mut q_count = 0usize;
    for (q, label) in labels.query_to_ref.iter().enumerate() {
        if let Some(r) = label {
            let row = a.row(q);
            q_sum += log_sum_exp(row.iter().cloned()) - row[*r];
            q_count += 1;
        }
    }
    if q_count > 0 {
        total += q_sum / q_count as f64;
        any = true;
    }

    let mut r_sum = 0.0;
    let mut r_count = 0usize;
    for (r, label) in labels.ref_to_query.iter().enumerate() {
        if let Some(q) = label {
            let col = (0..a.rows()).map(|i| a.get(i, r));
            r_sum += log_sum_exp(col) - a.get(*q, r);
            r_count += 1;
        }
    }
    if r_count > 0 {
        total += r_sum / r_count as f64;
        any = true;
    }

    if !any {
        return Err(AlignError::AllDiscarded);
    }
    Ok(total)
}

/// Analytic gradient of [`alignment_loss`] with respect to the affinity
/// scores: softmax minus one-hot along each labeled row, plus the same
/// along each labeled column, each direction averaged over its labeled
/// count.
pub fn loss_gradient(
    a: &Mat<f64>,
    labels: &CorrespondenceLabels,
) -> Result<Mat<f64>, AlignError> {
    check_label_shape(a, labels)?;
    let (nq, nr) = (a.rows(), a.cols());
    let q_count = labels.query_to_ref.iter().flatten().count();
    let r_count = labels.ref_to_query.iter().flatten().count();
    if q_count == 0 && r_count == 0 {
        return Err(AlignError::AllDiscarded);
    }
    let mut grad = Mat::<f64>::zeros(nq, nr);

    if q_count > 0 {
        let inv = 1.0 / q_count as f64;
        for (q, label) in labels.query_to_ref.iter().enumerate() {
            if let Some(r) = label {
                let row = a.row(q);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                let g = grad.row_mut(q);
                for j in 0..nr {
                    g[j] += (row[j] - m).exp() / z * inv;
                }
                g[*r] -= inv;
            }
        }
    }

    if r_count > 0 {
        let inv = 1.0 / r_count as f64;
        for (r, label) in labels.ref_to_query.iter().enumerate() {
            if let Some(q) = label {
                let m = (0..nq).map(|i| a.get(i, r)).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..nq).map(|i| (a.get(i, r) - m).exp()).sum();
                for i in 0..nq {
                    let v = (a.get(i, r) - m).exp() / z * inv;
                    grad.set(i, r, grad.get(i, r) + v);
                }
                grad.set(*q, r, grad.get(*q, r) - inv);
            }
        }
    }
    Ok(grad)
}

/// One micro-scale training example: frozen features for both clouds, the
/// clouds themselves (for the geometric bias), and ground-truth labels.
#[derive(Debug, Clone)]
pub struct MicroPair {
    pub fr: FeatureMap,
    pub fq: FeatureMap,
    pub pr_obj: PointCloud,
    pub pq_obj: PointCloud,
    pub labels: CorrespondenceLabels,
}

/// Generate a micro pair with learnable structure: each matched query point
/// sits near its reference point and carries a noisy copy of its feature;
/// unmatched query points sit far away with unrelated features.
pub fn gen_micro_pair(seed: u64, n: usize, c: usize) -> MicroPair {
    let mut rng = crate::rng::seeded_rng(seed);
    let unit = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f32> {
        let mut v: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
        v.iter_mut().for_each(|x| *x /= norm);
        v
    };

    let pr_points: Vec<Vec3> = (0..n)
        .map(|_| {
            Vec3::new(
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
            )
        })
        .collect();
    let mut fr = Mat::<f32>::zeros(n, c);
    for i in 0..n {
        let u = unit(&mut rng);
        fr.row_mut(i).copy_from_slice(&u);
    }

    let noise = 0.4f32;
    let mut pq_points = Vec::with_capacity(n);
    let mut fq = Mat::<f32>::zeros(n, c);
    for j in 0..n {
        if rng.random_range(0.0..1.0) < 0.1 {
            // Unmatched: far away, unrelated feature.
            let dir = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            pq_points.push(dir * 0.6);
            fq.row_mut(j).copy_from_slice(&unit(&mut rng));
        } else {
            let r = rng.random_range(0..n);
            let jitter = Vec3::new(
                rng.random_range(-0.005..0.005),
                rng.random_range(-0.005..0.005),
                rng.random_range(-0.005..0.005),
            );
            pq_points.push(pr_points[r] + jitter);
            let mut row: Vec<f32> = fr
                .row(r)
                .iter()
                .map(|&v| v + noise * rng.random_range(-1.0f32..1.0))
                .collect();
            let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
            row.iter_mut().for_each(|x| *x /= norm);
            fq.row_mut(j).copy_from_slice(&row);
        }
    }

    let pr_obj = PointCloud::from_points(pr_points);
    let pq_obj = PointCloud::from_points(pq_points);
    let labels = nearest_labels(&pq_obj, &pr_obj, &Pose::identity(), 0.15);
    MicroPair { fr, fq, pr_obj, pq_obj, labels }
}

/// Trainable state: the two refinement parameter sets and the step size.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub initial: RefineParams,
    pub iterative: RefineParams,
    pub learning_rate: f64,
}

impl TrainState {
    pub fn seeded(
        channels: usize,
        heads: usize,
        buckets: usize,
        blocks: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Self {
        TrainState {
            initial: RefineParams::seeded(
                channels,
                heads,
                buckets,
                blocks,
                crate::rng::split_seed(seed, 0),
            ),
            iterative: RefineParams::seeded(
                channels,
                heads,
                buckets,
                blocks,
                crate::rng::split_seed(seed, 1),
            ),
            learning_rate,
        }
    }
}

fn affinity_f64(fq: &Mat<f64>, fr: &Mat<f64>) -> Mat<f64> {
    let mut a = matmul_nt(fq, fr);
    let scale = 1.0 / (fq.cols() as f64).sqrt();
    a.data_mut().iter_mut().for_each(|v| *v *= scale);
    a
}

/// Forward pass of one training iteration with a given parameter set:
/// refine, affinity, loss.
fn iteration_loss(
    params: &RefineParams,
    pair: &MicroPair,
    bucket_r: &[u16],
    bucket_q: &[u16],
) -> Result<f64, AlignError> {
    let (xr, xq, _) = refine_forward_f64(
        &mat_f32_to_f64(&pair.fr),
        &mat_f32_to_f64(&pair.fq),
        bucket_r,
        bucket_q,
        params,
        false,
    );
    alignment_loss(&affinity_f64(&xq, &xr), &pair.labels)
}

/// Total loss of both training iterations at the current parameters,
/// without updating anything.
pub fn evaluate_loss(state: &TrainState, pair: &MicroPair) -> Result<f64, AlignError> {
    let bucket_r = bucket_matrix(&pair.pr_obj.points, &state.initial);
    let bucket_q = bucket_matrix(&pair.pq_obj.points, &state.initial);
    Ok(iteration_loss(&state.initial, pair, &bucket_r, &bucket_q)?
        + iteration_loss(&state.iterative, pair, &bucket_r, &bucket_q)?)
}

fn sgd_mat(p: &mut Mat<f64>, g: &Mat<f64>, lr: f64) {
    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
        *x -= lr * d;
    }
}

fn sgd_vec(p: &mut [f64], g: &[f64], lr: f64) {
    for (x, d) in p.iter_mut().zip(g) {
        *x -= lr * d;
    }
}

fn apply_sgd(params: &mut RefineParams, grads: &super::attn::RefineGrads, lr: f64) {
    let merge = |a: &AttnGrads, b: &AttnGrads| -> AttnGrads {
        let mut out = a.clone();
        for (x, y) in out.norm.iter_mut().zip(&b.norm) {
            *x += y;
        }
        for (m, o) in [
            (&mut out.wq, &b.wq),
            (&mut out.wk, &b.wk),
            (&mut out.wv, &b.wv),
            (&mut out.wo, &b.wo),
        ] {
            for (x, y) in m.data_mut().iter_mut().zip(o.data()) {
                *x += y;
            }
        }
        for (x, y) in out.bias.iter_mut().zip(&b.bias) {
            *x += y;
        }
        out
    };
    for (block, g) in params.blocks.iter_mut().zip(&grads.blocks) {
        // Self-attention parameters are applied to both clouds; cross
        // parameters to both directions. Their gradients sum.
        let gs = merge(&g.self_r, &g.self_q);
        let gc = merge(&g.cross_r, &g.cross_q);
        sgd_vec(&mut block.self_norm, &gs.norm, lr);
        sgd_mat(&mut block.self_wq, &gs.wq, lr);
        sgd_mat(&mut block.self_wk, &gs.wk, lr);
        sgd_mat(&mut block.self_wv, &gs.wv, lr);
        sgd_mat(&mut block.self_wo, &gs.wo, lr);
        sgd_vec(&mut block.self_bias, &gs.bias, lr);
        sgd_vec(&mut block.cross_norm, &gc.norm, lr);
        sgd_mat(&mut block.cross_wq, &gc.wq, lr);
        sgd_mat(&mut block.cross_wk, &gc.wk, lr);
        sgd_mat(&mut block.cross_wv, &gc.wv, lr);
        sgd_mat(&mut block.cross_wo, &gc.wo, lr);
    }
}

fn train_one_set(
    params: &mut RefineParams,
    pair: &MicroPair,
    bucket_r: &[u16],
    bucket_q: &[u16],
    lr: f64,
) -> Result<f64, AlignError> {
    let xr0 = mat_f32_to_f64(&pair.fr);
    let xq0 = mat_f32_to_f64(&pair.fq);
    let (xr, xq, tape) = refine_forward_f64(&xr0, &xq0, bucket_r, bucket_q, params, true);
    let a = affinity_f64(&xq, &xr);
    let loss = alignment_loss(&a, &pair.labels)?;
    let da = loss_gradient(&a, &pair.labels)?;

    // Backward through the affinity product A = Xq Xr^T / sqrt(C).
    let scale = 1.0 / (xq.cols() as f64).sqrt();
    let mut d_xq = super::attn::matmul(&da, &xr);
    d_xq.data_mut().iter_mut().for_each(|v| *v *= scale);
    let mut d_xr = matmul_tn(&da, &xq);
    d_xr.data_mut().iter_mut().for_each(|v| *v *= scale);

    let grads = refine_backward(
        params,
        bucket_r,
        bucket_q,
        tape.as_ref().expect("tape requested"),
        &d_xr,
        &d_xq,
    );
    apply_sgd(params, &grads, lr);
    Ok(loss)
}

/// One training step of the dual-aligner mode: two alignment iterations
/// (the first refined with the initial set, the second with the iterative
/// set), each supervised by the bidirectional loss; gradients flow through
/// refinement and affinity only, and each set receives one gradient-descent
/// update. Returns the pre-update total loss.
pub fn toy_train_step(state: &mut TrainState, pair: &MicroPair) -> Result<f64, AlignError> {
    let bucket_r = bucket_matrix(&pair.pr_obj.points, &state.initial);
    let bucket_q = bucket_matrix(&pair.pq_obj.points, &state.initial);
    let lr = state.learning_rate;
    let l1 = train_one_set(&mut state.initial, pair, &bucket_r, &bucket_q, lr)?;
    let l2 = train_one_set(&mut state.iterative, pair, &bucket_r, &bucket_q, lr)?;
    Ok(l1 + l2)
}

/// Outcome of the fixed micro training run.
#[derive(Debug, Clone)]
pub struct TrainToyOutcome {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub untrained_accuracy: f64,
    pub trained_accuracy: f64,
}

/// The micro training run: a fixed seeded dataset of 32-point, 16-channel
/// pairs (24 for training, 16 held out); both aligner parameter sets are
/// updated each step. Accuracy is measured on the held-out pairs with the
/// initial-iteration aligner.
pub fn run_toy_training(steps: usize, seed: u64, learning_rate: f64) -> TrainToyOutcome {
    let n = 32;
    let c = 16;
    let train_pairs: Vec<_> = (0..24)
        .map(|i| gen_micro_pair(crate::rng::split_seed(seed, 10 + i), n, c))
        .collect();
    let heldout_pairs: Vec<_> = (0..16)
        .map(|i| gen_micro_pair(crate::rng::split_seed(seed, 900 + i), n, c))
        .collect();

    let mut state = TrainState::seeded(c, 4, 16, 3, learning_rate, seed);
    let accuracy = |s: &TrainState| -> f64 {
        heldout_pairs
            .iter()
            .map(|p| correspondence_accuracy(&s.initial, p))
            .sum::<f64>()
            / heldout_pairs.len() as f64
    };
    let mean_loss = |s: &TrainState| -> f64 {
        train_pairs
            .iter()
            .map(|p| evaluate_loss(s, p).expect("labeled micro pairs"))
            .sum::<f64>()
            / train_pairs.len() as f64
    };

    let untrained_accuracy = accuracy(&state);
    let initial_loss = mean_loss(&state);
    for step in 0..steps {
        let pair = &train_pairs[step % train_pairs.len()];
        toy_train_step(&mut state, pair).expect("labeled micro pairs");
    }
    TrainToyOutcome {
        initial_loss,
        final_loss: mean_loss(&state),
        untrained_accuracy,
        trained_accuracy: accuracy(&state),
    }
}

/// Fraction of labeled query points whose affinity argmax equals the label
/// after refinement with the given parameter set.
pub fn correspondence_accuracy(params: &RefineParams, pair: &MicroPair) -> f64 {
    let bucket_r = bucket_matrix(&pair.pr_obj.points, params);
    let bucket_q = bucket_matrix(&pair.pq_obj.points, params);
    let (xr, xq, _) = refine_forward_f64(
        &mat_f32_to_f64(&pair.fr),
        &mat_f32_to_f64(&pair.fq),
        &bucket_r,
        &bucket_q,
        params,
        false,
    );
    let a = affinity_f64(&xq, &xr);
    let mut hits = 0usize;
    let mut total = 0usize;
    for (q, label) in pair.labels.query_to_ref.iter().enumerate() {
        if let Some(r) = label {
            total += 1;
            let row = a.row(q);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == *r {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
