//! Feature refinement: alternating within-cloud self-attention (with a
//! geometric bias over log-distance buckets) and cross-cloud attention,
//! pre-normalized residual blocks throughout.
//!
//! The forward pass runs in double precision on top of the single-precision
//! feature maps; a taped variant records every intermediate so the micro
//! trainer can backpropagate through the whole stack by hand.

use super::AlignError;
use crate::geom::{PointCloud, Vec3};
use crate::seqmodel::{ModelConfig, WeightBundle};
use crate::tensor::{FeatureMap, Mat};

/// Parameters of one refinement block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnBlockParams {
    pub self_norm: Vec<f64>,
    pub self_wq: Mat<f64>,
    pub self_wk: Mat<f64>,
    pub self_wv: Mat<f64>,
    pub self_wo: Mat<f64>,
    /// Geometric bias, `heads x buckets` row-major.
    pub self_bias: Vec<f64>,
    pub cross_norm: Vec<f64>,
    pub cross_wq: Mat<f64>,
    pub cross_wk: Mat<f64>,
    pub cross_wv: Mat<f64>,
    pub cross_wo: Mat<f64>,
}

/// One refinement parameter set (the bundle carries two: the initial-
/// iteration set and the iterative set).
#[derive(Debug, Clone, PartialEq)]
pub struct RefineParams {
    pub channels: usize,
    pub heads: usize,
    pub buckets: usize,
    pub min_dist: f64,
    pub max_dist: f64,
    pub blocks: Vec<AttnBlockParams>,
    /// Identity sets skip refinement entirely; used when alignment is
    /// driven by injected features that need no learned polish.
    pub identity: bool,
}

impl RefineParams {
    /// The identity refinement: outputs equal inputs.
    pub fn identity(channels: usize) -> Self {
        RefineParams {
            channels,
            heads: 1,
            buckets: 1,
            min_dist: 1e-3,
            max_dist: 1.0,
            blocks: Vec::new(),
            identity: true,
        }
    }

    pub fn seeded(
        channels: usize,
        heads: usize,
        buckets: usize,
        blocks: usize,
        seed: u64,
    ) -> Self {
        let mut rng = crate::rng::seeded_rng(seed);
        let mut mat = |out: usize, inp: usize| -> Mat<f64> {
            let data = crate::rng::uniform_init(&mut rng, inp, out * inp)
                .into_iter()
                .map(|v| v as f64)
                .collect();
            Mat::from_vec(out, inp, data)
        };
        let blocks = (0..blocks)
            .map(|_| AttnBlockParams {
                self_norm: vec![1.0; channels],
                self_wq: mat(channels, channels),
                self_wk: mat(channels, channels),
                self_wv: mat(channels, channels),
                self_wo: mat(channels, channels),
                self_bias: vec![0.0; heads * buckets],
                cross_norm: vec![1.0; channels],
                cross_wq: mat(channels, channels),
                cross_wk: mat(channels, channels),
                cross_wv: mat(channels, channels),
                cross_wo: mat(channels, channels),
            })
            .collect();
        RefineParams {
            channels,
            heads,
            buckets,
            min_dist: 1e-3,
            max_dist: 1.0,
            blocks,
            identity: false,
        }
    }

    /// Extract one parameter set (`"initial"` or `"iterative"`) from a
    /// weight bundle.
    pub fn from_bundle(bundle: &WeightBundle, set: &str) -> Self {
        let cfg: &ModelConfig = bundle.config();
        let c = cfg.feature_dim;
        let a = &cfg.aligner;
        let mat = |name: String| -> Mat<f64> {
            let t = bundle.get(&name);
            Mat::from_vec(
                t.shape[0],
                t.shape[1],
                t.data.iter().map(|&v| v as f64).collect(),
            )
        };
        let vecd = |name: String| -> Vec<f64> {
            bundle.get(&name).data.iter().map(|&v| v as f64).collect()
        };
        let blocks = (0..a.blocks)
            .map(|b| {
                let p = format!("align.{set}.block{b}");
                AttnBlockParams {
                    self_norm: vecd(format!("{p}.self.norm")),
                    self_wq: mat(format!("{p}.self.wq")),
                    self_wk: mat(format!("{p}.self.wk")),
                    self_wv: mat(format!("{p}.self.wv")),
                    self_wo: mat(format!("{p}.self.wo")),
                    self_bias: vecd(format!("{p}.self.bias")),
                    cross_norm: vecd(format!("{p}.cross.norm")),
                    cross_wq: mat(format!("{p}.cross.wq")),
                    cross_wk: mat(format!("{p}.cross.wk")),
                    cross_wv: mat(format!("{p}.cross.wv")),
                    cross_wo: mat(format!("{p}.cross.wo")),
                }
            })
            .collect();
        RefineParams {
            channels: c,
            heads: a.heads,
            buckets: a.buckets,
            min_dist: a.min_dist,
            max_dist: a.max_dist,
            blocks,
            identity: false,
        }
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        if self.identity {
            return Ok(());
        }
        if self.channels % self.heads != 0 {
            return Err(AlignError::Shape(format!(
                "{} channels not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (what, m) in [
                ("self_wq", &b.self_wq),
                ("self_wk", &b.self_wk),
                ("self_wv", &b.self_wv),
                ("self_wo", &b.self_wo),
                ("cross_wq", &b.cross_wq),
                ("cross_wk", &b.cross_wk),
                ("cross_wv", &b.cross_wv),
                ("cross_wo", &b.cross_wo),
            ] {
                if m.rows() != self.channels || m.cols() != self.channels {
                    return Err(AlignError::Shape(format!(
                        "block {i} {what} is {}, expected {c}x{c}",
                        m.shape_str(),
                        c = self.channels
                    )));
                }
            }
            if b.self_bias.len() != self.heads * self.buckets {
                return Err(AlignError::Shape(format!("block {i} bias table size")));
            }
        }
        Ok(())
    }
}

// f64 matrix helpers (row-major).

pub(crate) fn matmul(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    assert_eq!(a.cols(), b.rows());
    let mut out = Mat::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        let ar = a.row(i);
        let or = out.row_mut(i);
        for (kk, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = b.row(kk);
            for j in 0..br.len() {
                or[j] += av * br[j];
            }
        }
    }
    out
}

/// `a * b^T`.
pub(crate) fn matmul_nt(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    assert_eq!(a.cols(), b.cols());
    let mut out = Mat::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ar = a.row(i);
        let or = out.row_mut(i);
        for j in 0..b.rows() {
            let br = b.row(j);
            let mut acc = 0.0;
            for t in 0..ar.len() {
                acc += ar[t] * br[t];
            }
            or[j] = acc;
        }
    }
    out
}

/// `a^T * b`.
pub(crate) fn matmul_tn(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    assert_eq!(a.rows(), b.rows());
    let mut out = Mat::zeros(a.cols(), b.cols());
    for r in 0..a.rows() {
        let ar = a.row(r);
        let br = b.row(r);
        for i in 0..ar.len() {
            let av = ar[i];
            if av == 0.0 {
                continue;
            }
            let or = out.row_mut(i);
            for j in 0..br.len() {
                or[j] += av * br[j];
            }
        }
    }
    out
}

fn add_assign(a: &mut Mat<f64>, b: &Mat<f64>) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

const NORM_EPS: f64 = 1e-6;

/// RMS normalization with learned scale; returns the per-row `1/rms` needed
/// by the backward pass.
fn rms_norm_rows(x: &Mat<f64>, scale: &[f64]) -> (Mat<f64>, Vec<f64>) {
    let c = x.cols();
    let mut out = Mat::zeros(x.rows(), c);
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let i = 1.0 / (ms + NORM_EPS).sqrt();
        let o = out.row_mut(r);
        for j in 0..c {
            o[j] = row[j] * i * scale[j];
        }
        inv.push(i);
    }
    (out, inv)
}

/// Backward of [`rms_norm_rows`]: accumulates `dx` and `dscale`.
fn rms_norm_backward(
    x: &Mat<f64>,
    scale: &[f64],
    inv: &[f64],
    dy: &Mat<f64>,
    dx: &mut Mat<f64>,
    dscale: &mut [f64],
) {
    let c = x.cols();
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let i = inv[r];
        let mut dot = 0.0;
        for j in 0..c {
            dot += dyr[j] * scale[j] * xr[j];
            dscale[j] += dyr[j] * xr[j] * i;
        }
        let coeff = dot * i * i * i / c as f64;
        let dxr = dx.row_mut(r);
        for j in 0..c {
            dxr[j] += dyr[j] * scale[j] * i - xr[j] * coeff;
        }
    }
}

/// Log-distance bucket of every point pair within a cloud.
pub(crate) fn bucket_matrix(points: &[Vec3], p: &RefineParams) -> Vec<u16> {
    let n = points.len();
    let log_span = (p.max_dist / p.min_dist).ln();
    let mut out = vec![0u16; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = (points[i] - points[j]).norm();
            let b = if d <= p.min_dist {
                0
            } else if d >= p.max_dist {
                p.buckets - 1
            } else {
                (((d / p.min_dist).ln() / log_span) * p.buckets as f64)
                    .floor()
                    .min((p.buckets - 1) as f64) as usize
            };
            out[i * n + j] = b as u16;
        }
    }
    out
}

/// Cache of one attention application, retained for backprop.
struct AttnTape {
    q_in: Mat<f64>,
    kv_in: Mat<f64>,
    q_normed: Mat<f64>,
    q_inv: Vec<f64>,
    kv_normed: Mat<f64>,
    kv_inv: Vec<f64>,
    q_proj: Mat<f64>,
    k_proj: Mat<f64>,
    v_proj: Mat<f64>,
    /// Per-head softmax probabilities, `n_q x n_kv` each.
    probs: Vec<Mat<f64>>,
    attn_cat: Mat<f64>,
}

struct BlockTape {
    self_r: AttnTape,
    self_q: AttnTape,
    cross_r: AttnTape,
    cross_q: AttnTape,
}

pub(crate) struct RefineTape {
    blocks: Vec<BlockTape>,
}

struct AttnWeights<'a> {
    norm: &'a [f64],
    wq: &'a Mat<f64>,
    wk: &'a Mat<f64>,
    wv: &'a Mat<f64>,
    wo: &'a Mat<f64>,
    /// Geometric bias table and per-pair buckets; self-attention only.
    bias: Option<(&'a [f64], &'a [u16])>,
}

/// One attention application with pre-norm residual:
/// `out = q_in + Attn(norm(q_in), norm(kv_in)) Wo`.
/// For self-attention `kv_in` is the same stream as `q_in`.
fn attention(
    q_in: &Mat<f64>,
    kv_in: &Mat<f64>,
    w: &AttnWeights,
    heads: usize,
    buckets: usize,
) -> (Mat<f64>, AttnTape) {
    let c = q_in.cols();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (q_normed, q_inv) = rms_norm_rows(q_in, w.norm);
    let (kv_normed, kv_inv) = if std::ptr::eq(q_in, kv_in) {
        (q_normed.clone(), q_inv.clone())
    } else {
        rms_norm_rows(kv_in, w.norm)
    };
    let q_proj = matmul_nt(&q_normed, w.wq);
    let k_proj = matmul_nt(&kv_normed, w.wk);
    let v_proj = matmul_nt(&kv_normed, w.wv);

    let (nq, nkv) = (q_in.rows(), kv_in.rows());
    let mut probs = Vec::with_capacity(heads);
    let mut attn_cat = Mat::zeros(nq, c);
    for h in 0..heads {
        let base = h * dh;
        let mut p = Mat::zeros(nq, nkv);
        for i in 0..nq {
            let qi = &q_proj.row(i)[base..base + dh];
            let logits = p.row_mut(i);
            for j in 0..nkv {
                let kj = &k_proj.row(j)[base..base + dh];
                let mut acc = 0.0;
                for t in 0..dh {
                    acc += qi[t] * kj[t];
                }
                let mut l = acc * scale;
                if let Some((bias, bucket)) = w.bias {
                    l += bias[h * buckets + bucket[i * nkv + j] as usize];
                }
                logits[j] = l;
            }
            // softmax in place
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in logits.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in logits.iter_mut() {
                *v /= z;
            }
        }
        // attn_cat[:, head] = P * V_head
        for i in 0..nq {
            let pi = p.row(i);
            let out = &mut attn_cat.row_mut(i)[base..base + dh];
            for (j, &pij) in pi.iter().enumerate() {
                if pij == 0.0 {
                    continue;
                }
                let vj = &v_proj.row(j)[base..base + dh];
                for t in 0..dh {
                    out[t] += pij * vj[t];
                }
            }
        }
        probs.push(p);
    }

    let mut out = matmul_nt(&attn_cat, w.wo);
    add_assign(&mut out, q_in);
    (
        out,
        AttnTape {
            q_in: q_in.clone(),
            kv_in: kv_in.clone(),
            q_normed,
            q_inv,
            kv_normed,
            kv_inv,
            q_proj,
            k_proj,
            v_proj,
            probs,
            attn_cat,
        },
    )
}

/// Gradients mirroring one attention application's parameters.
#[derive(Debug, Clone)]
pub(crate) struct AttnGrads {
    pub norm: Vec<f64>,
    pub wq: Mat<f64>,
    pub wk: Mat<f64>,
    pub wv: Mat<f64>,
    pub wo: Mat<f64>,
    pub bias: Vec<f64>,
}

impl AttnGrads {
    fn zeros(c: usize, heads: usize, buckets: usize) -> Self {
        AttnGrads {
            norm: vec![0.0; c],
            wq: Mat::zeros(c, c),
            wk: Mat::zeros(c, c),
            wv: Mat::zeros(c, c),
            wo: Mat::zeros(c, c),
            bias: vec![0.0; heads * buckets],
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockGrads {
    pub self_r: AttnGrads,
    pub self_q: AttnGrads,
    pub cross_r: AttnGrads,
    pub cross_q: AttnGrads,
}

#[derive(Debug, Clone)]
pub(crate) struct RefineGrads {
    pub blocks: Vec<BlockGrads>,
}

impl RefineGrads {
    pub fn zeros_like(p: &RefineParams) -> Self {
        let g = AttnGrads::zeros(p.channels, p.heads, p.buckets);
        RefineGrads {
            blocks: p
                .blocks
                .iter()
                .map(|_| BlockGrads {
                    self_r: g.clone(),
                    self_q: g.clone(),
                    cross_r: g.clone(),
                    cross_q: g.clone(),
                })
                .collect(),
        }
    }
}

/// Backward of one [`attention`] application. `d_out` is the gradient at
/// the residual output; gradients flow into the query stream (`d_q_in`),
/// the key/value stream (`d_kv_in`), and the parameter gradients `g`.
#[allow(clippy::too_many_arguments)]
fn attention_backward(
    tape: &AttnTape,
    w: &AttnWeights,
    heads: usize,
    buckets: usize,
    d_out: &Mat<f64>,
    g: &mut AttnGrads,
    d_q_in: &mut Mat<f64>,
    d_kv_in: &mut Mat<f64>,
    shared_stream: bool,
) {
    let c = tape.q_in.cols();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (nq, nkv) = (tape.q_in.rows(), tape.kv_in.rows());

    // Residual: gradient passes straight through to q_in.
    add_assign(d_q_in, d_out);

    // out = attn_cat * wo^T
    let d_attn_cat = matmul(d_out, w.wo);
    let g_wo = matmul_tn(d_out, &tape.attn_cat);
    add_assign(&mut g.wo, &g_wo);

    let mut d_q_proj = Mat::zeros(nq, c);
    let mut d_k_proj = Mat::zeros(nkv, c);
    let mut d_v_proj = Mat::zeros(nkv, c);

    for h in 0..heads {
        let base = h * dh;
        let p = &tape.probs[h];
        for i in 0..nq {
            let dci = &d_attn_cat.row(i)[base..base + dh];
            let pi = p.row(i);
            // dP[i][j] = dci . v_j; dV_j += P[i][j] * dci
            let mut dp = vec![0.0; nkv];
            for j in 0..nkv {
                let vj = &tape.v_proj.row(j)[base..base + dh];
                let mut acc = 0.0;
                for t in 0..dh {
                    acc += dci[t] * vj[t];
                }
                dp[j] = acc;
            }
            for j in 0..nkv {
                let pij = pi[j];
                if pij != 0.0 {
                    let dvj = &mut d_v_proj.row_mut(j)[base..base + dh];
                    for t in 0..dh {
                        dvj[t] += pij * dci[t];
                    }
                }
            }
            // softmax backward: dl = p .* (dp - sum(dp .* p))
            let dot: f64 = dp.iter().zip(pi).map(|(a, b)| a * b).sum();
            let qi = &tape.q_proj.row(i)[base..base + dh];
            let dqi = &mut d_q_proj.row_mut(i)[base..base + dh];
            for j in 0..nkv {
                let dl = pi[j] * (dp[j] - dot);
                if dl == 0.0 {
                    continue;
                }
                if let Some((_, bucket)) = w.bias {
                    g.bias[h * buckets + bucket[i * nkv + j] as usize] += dl;
                }
                let kj = &tape.k_proj.row(j)[base..base + dh];
                let dkj = &mut d_k_proj.row_mut(j)[base..base + dh];
                for t in 0..dh {
                    dqi[t] += dl * scale * kj[t];
                    dkj[t] += dl * scale * qi[t];
                }
            }
        }
    }

    // Projections: X_proj = X_normed * W^T.
    let g_wq = matmul_tn(&d_q_proj, &tape.q_normed);
    let g_wk = matmul_tn(&d_k_proj, &tape.kv_normed);
    let g_wv = matmul_tn(&d_v_proj, &tape.kv_normed);
    add_assign(&mut g.wq, &g_wq);
    add_assign(&mut g.wk, &g_wk);
    add_assign(&mut g.wv, &g_wv);

    let mut d_q_normed = matmul(&d_q_proj, w.wq);
    let d_kv_normed = {
        let mut d = matmul(&d_k_proj, w.wk);
        let dv = matmul(&d_v_proj, w.wv);
        add_assign(&mut d, &dv);
        d
    };

    if shared_stream {
        // Self-attention: one stream, one norm application.
        add_assign(&mut d_q_normed, &d_kv_normed);
        rms_norm_backward(&tape.q_in, w.norm, &tape.q_inv, &d_q_normed, d_q_in, &mut g.norm);
    } else {
        rms_norm_backward(&tape.q_in, w.norm, &tape.q_inv, &d_q_normed, d_q_in, &mut g.norm);
        rms_norm_backward(
            &tape.kv_in,
            w.norm,
            &tape.kv_inv,
            &d_kv_normed,
            d_kv_in,
            &mut g.norm,
        );
    }
}

fn self_weights<'a>(b: &'a AttnBlockParams, buckets_mat: &'a [u16]) -> AttnWeights<'a> {
    AttnWeights {
        norm: &b.self_norm,
        wq: &b.self_wq,
        wk: &b.self_wk,
        wv: &b.self_wv,
        wo: &b.self_wo,
        bias: Some((&b.self_bias, buckets_mat)),
    }
}

fn cross_weights(b: &AttnBlockParams) -> AttnWeights<'_> {
    AttnWeights {
        norm: &b.cross_norm,
        wq: &b.cross_wq,
        wk: &b.cross_wk,
        wv: &b.cross_wv,
        wo: &b.cross_wo,
        bias: None,
    }
}

/// Double-precision refinement over both feature streams; optionally
/// records the tape needed for backprop.
pub(crate) fn refine_forward_f64(
    xr0: &Mat<f64>,
    xq0: &Mat<f64>,
    bucket_r: &[u16],
    bucket_q: &[u16],
    params: &RefineParams,
    want_tape: bool,
) -> (Mat<f64>, Mat<f64>, Option<RefineTape>) {
    let mut xr = xr0.clone();
    let mut xq = xq0.clone();
    let mut blocks = Vec::new();
    for b in &params.blocks {
        let (nr, tape_sr) =
            attention(&xr, &xr, &self_weights(b, bucket_r), params.heads, params.buckets);
        let (nq, tape_sq) =
            attention(&xq, &xq, &self_weights(b, bucket_q), params.heads, params.buckets);
        // Cross-attention reads the other cloud's post-self values; both
        // sides update from the same snapshot.
        let cw = cross_weights(b);
        let (cr, tape_cr) = attention(&nr, &nq, &cw, params.heads, params.buckets);
        let (cq, tape_cq) = attention(&nq, &nr, &cw, params.heads, params.buckets);
        xr = cr;
        xq = cq;
        if want_tape {
            blocks.push(BlockTape {
                self_r: tape_sr,
                self_q: tape_sq,
                cross_r: tape_cr,
                cross_q: tape_cq,
            });
        }
    }
    let tape = want_tape.then_some(RefineTape { blocks });
    (xr, xq, tape)
}

/// Backward through the refinement stack. Returns parameter gradients;
/// gradients w.r.t. the input features are dropped (the extractors are
/// frozen in the toy training mode).
pub(crate) fn refine_backward(
    params: &RefineParams,
    bucket_r: &[u16],
    bucket_q: &[u16],
    tape: &RefineTape,
    d_xr_out: &Mat<f64>,
    d_xq_out: &Mat<f64>,
) -> RefineGrads {
    let mut grads = RefineGrads::zeros_like(params);
    let mut d_xr = d_xr_out.clone();
    let mut d_xq = d_xq_out.clone();

    for (bi, b) in params.blocks.iter().enumerate().rev() {
        let t = &tape.blocks[bi];
        let g = &mut grads.blocks[bi];
        let cw = cross_weights(b);

        // Cross step backward: cr = attn(nr <- nq), cq = attn(nq <- nr).
        let mut d_nr = Mat::zeros(d_xr.rows(), d_xr.cols());
        let mut d_nq = Mat::zeros(d_xq.rows(), d_xq.cols());
        attention_backward(
            &t.cross_r,
            &cw,
            params.heads,
            params.buckets,
            &d_xr,
            &mut g.cross_r,
            &mut d_nr,
            &mut d_nq,
            false,
        );
        attention_backward(
            &t.cross_q,
            &cw,
            params.heads,
            params.buckets,
            &d_xq,
            &mut g.cross_q,
            &mut d_nq,
            &mut d_nr,
            false,
        );

        // Self step backward.
        let mut d_xr_in = Mat::zeros(d_xr.rows(), d_xr.cols());
        let mut d_xq_in = Mat::zeros(d_xq.rows(), d_xq.cols());
        let mut unused_r = Mat::zeros(d_xr.rows(), d_xr.cols());
        let mut unused_q = Mat::zeros(d_xq.rows(), d_xq.cols());
        attention_backward(
            &t.self_r,
            &self_weights(b, bucket_r),
            params.heads,
            params.buckets,
            &d_nr,
            &mut g.self_r,
            &mut d_xr_in,
            &mut unused_r,
            true,
        );
        attention_backward(
            &t.self_q,
            &self_weights(b, bucket_q),
            params.heads,
            params.buckets,
            &d_nq,
            &mut g.self_q,
            &mut d_xq_in,
            &mut unused_q,
            true,
        );
        d_xr = d_xr_in;
        d_xq = d_xq_in;
    }
    grads
}

pub(crate) fn mat_f32_to_f64(m: &FeatureMap) -> Mat<f64> {
    Mat::from_vec(
        m.rows(),
        m.cols(),
        m.data().iter().map(|&v| v as f64).collect(),
    )
}

fn mat_f64_to_f32(m: &Mat<f64>) -> FeatureMap {
    Mat::from_vec(
        m.rows(),
        m.cols(),
        m.data().iter().map(|&v| v as f32).collect(),
    )
}

/// Refine reference and query feature maps against each other. Shapes and
/// row correspondence are preserved: output row `i` still describes point
/// `i` of the matching cloud.
pub fn refine_features(
    fr: &FeatureMap,
    fq: &FeatureMap,
    pr_obj: &PointCloud,
    pq_obj: &PointCloud,
    params: &RefineParams,
) -> Result<(FeatureMap, FeatureMap), AlignError> {
    if fr.cols() != fq.cols() {
        return Err(AlignError::Shape(format!(
            "feature channel mismatch: {} vs {}",
            fr.cols(),
            fq.cols()
        )));
    }
    if fr.rows() != pr_obj.len() || fq.rows() != pq_obj.len() {
        return Err(AlignError::Shape(
            "feature rows do not match cloud sizes".into(),
        ));
    }
    if params.identity {
        return Ok((fr.clone(), fq.clone()));
    }
    if fr.cols() != params.channels {
        return Err(AlignError::Shape(format!(
            "features have {} channels, refiner expects {}",
            fr.cols(),
            params.channels
        )));
    }
    params.validate()?;
    let bucket_r = bucket_matrix(&pr_obj.points, params);
    let bucket_q = bucket_matrix(&pq_obj.points, params);
    let (xr, xq, _) = refine_forward_f64(
        &mat_f32_to_f64(fr),
        &mat_f32_to_f64(fq),
        &bucket_r,
        &bucket_q,
        params,
        false,
    );
    Ok((mat_f64_to_f32(&xr), mat_f64_to_f32(&xq)))
}
