//! Linear state-space kernels: zero-order-hold discretization, the literal
//! reference recurrence, and the input-selective scan.
//!
//! The continuous system `h'(t) = A h(t) + B x(t)`, `y(t) = C h(t) + D x(t)`
//! with diagonal `A` is discretized per step size `delta` as
//! `A_bar = exp(delta A)` and `B_bar = (delta A)^-1 (exp(delta A) - I) delta B`,
//! then evaluated as the recurrence `h_t = A_bar h_{t-1} + B_bar x_t`,
//! `y_t = C h_t + D x_t` with `h_0 = 0`.
//!
//! Everything is generic over `f32`/`f64`: the pipeline runs single
//! precision, the verification suites run both.

use num_traits::Float;

use super::SeqModelError;

/// Continuous-time diagonal state-space parameters.
#[derive(Debug, Clone)]
pub struct StateSpaceParams<T> {
    /// Diagonal of `A`; strictly negative entries keep the system stable.
    pub a: Vec<T>,
    /// Input vector `B` (M entries).
    pub b: Vec<T>,
    /// Output vector `C` (M entries).
    pub c: Vec<T>,
    /// Skip-connection scalar `D`.
    pub d: T,
    /// Step size, strictly positive.
    pub delta: T,
}

/// Zero-order-hold discretization of a [`StateSpaceParams`].
#[derive(Debug, Clone)]
pub struct DiscretizedParams<T> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
}

/// Closed-form evaluation of the ZOH input factor `(e^z - 1) / z`.
pub fn zoh_input_factor_closed<T: Float>(z: T) -> T {
    (z.exp() - T::one()) / z
}

/// Series evaluation `1 + z/2 + z^2/6 + z^3/24 + z^4/120` of the same
/// factor, used near `z = 0` where the closed form cancels catastrophically.
pub fn zoh_input_factor_series<T: Float>(z: T) -> T {
    let c2 = T::from(0.5).unwrap();
    let c3 = T::from(1.0 / 6.0).unwrap();
    let c4 = T::from(1.0 / 24.0).unwrap();
    let c5 = T::from(1.0 / 120.0).unwrap();
    T::one() + z * (c2 + z * (c3 + z * (c4 + z * c5)))
}

/// Branch point between the series and closed-form input factor.
pub fn zoh_series_threshold<T: Float>() -> T {
    T::from(1e-4).unwrap()
}

fn zoh_input_factor<T: Float>(z: T) -> T {
    if z.abs() < zoh_series_threshold() {
        zoh_input_factor_series(z)
    } else {
        zoh_input_factor_closed(z)
    }
}

/// Discretize a continuous diagonal system with the zero-order hold.
pub fn discretize_zoh<T: Float>(p: &StateSpaceParams<T>) -> DiscretizedParams<T> {
    let m = p.a.len();
    let mut a_bar = Vec::with_capacity(m);
    let mut b_bar = Vec::with_capacity(m);
    for s in 0..m {
        let z = p.delta * p.a[s];
        a_bar.push(z.exp());
        b_bar.push(p.delta * p.b[s] * zoh_input_factor(z));
    }
    DiscretizedParams { a_bar, b_bar }
}

/// Literal sequential evaluation of the discrete recurrence with `h_0 = 0`.
///
/// This is the reference implementation: it trades speed for being an
/// obviously-correct transcription of the recurrence, and the selective
/// scan is verified against it.
pub fn scan_reference<T: Float>(
    d: &DiscretizedParams<T>,
    c_out: &[T],
    d_skip: T,
    x: &[T],
) -> Vec<T> {
    let m = d.a_bar.len();
    let mut h = vec![T::zero(); m];
    let mut y = Vec::with_capacity(x.len());
    for &xt in x {
        let mut yt = d_skip * xt;
        for s in 0..m {
            h[s] = d.a_bar[s] * h[s] + d.b_bar[s] * xt;
            yt = yt + c_out[s] * h[s];
        }
        y.push(yt);
    }
    y
}

/// Input-selective scan parameters: `A` is fixed per channel, while
/// `B_t`, `C_t`, and `delta_t` are linear projections of each input token
/// (plus biases), with `delta_t` passed through a softplus so it stays
/// positive.
#[derive(Debug, Clone)]
pub struct SelectiveParams<T> {
    pub state_dim: usize,
    pub embed_dim: usize,
    /// Per-channel diagonal of `A`, row-major `embed_dim x state_dim`;
    /// strictly negative.
    pub a: Vec<T>,
    /// `delta` projection, row-major `embed_dim x embed_dim`, plus bias.
    pub delta_w: Vec<T>,
    pub delta_b: Vec<T>,
    /// `B_t` projection, row-major `state_dim x embed_dim`, plus bias.
    pub b_w: Vec<T>,
    pub b_b: Vec<T>,
    /// `C_t` projection, row-major `state_dim x embed_dim`, plus bias.
    pub c_w: Vec<T>,
    pub c_b: Vec<T>,
    /// Per-channel skip scalar `D`.
    pub d_skip: Vec<T>,
}

/// Initial state of a scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ScanInit {
    /// `h_0 = 0`, the contract of the public kernels.
    Zero,
    /// `h_0` set to the fixed point of the first step's discretized system,
    /// i.e. the state the scan would reach if the first token extended
    /// infinitely into the past. Grid scans use this boundary condition so
    /// that a constant input produces an exactly constant output.
    SteadyState,
}

impl<T: Float> SelectiveParams<T> {
    pub fn validate(&self) -> Result<(), SeqModelError> {
        let (e, m) = (self.embed_dim, self.state_dim);
        let checks = [
            ("a", self.a.len(), e * m),
            ("delta_w", self.delta_w.len(), e * e),
            ("delta_b", self.delta_b.len(), e),
            ("b_w", self.b_w.len(), m * e),
            ("b_b", self.b_b.len(), m),
            ("c_w", self.c_w.len(), m * e),
            ("c_b", self.c_b.len(), m),
            ("d_skip", self.d_skip.len(), e),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(SeqModelError::ShapeMismatch(format!(
                    "selective params `{name}`: {got} entries, expected {want}"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn softplus<T: Float>(x: T) -> T {
    let hi = T::from(20.0).unwrap();
    if x > hi {
        x
    } else {
        (T::one() + x.exp()).ln()
    }
}

/// Bias value that makes the initial softplus step size equal `delta0`.
pub fn softplus_inverse(delta0: f64) -> f64 {
    (delta0.exp() - 1.0).ln()
}

/// Per-token projections shared by the scan entry points.
fn project_tokens<T: Float>(
    sp: &SelectiveParams<T>,
    tokens: &[T],
    seq_len: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (e, m) = (sp.embed_dim, sp.state_dim);
    let mut delta = vec![T::zero(); seq_len * e];
    let mut b_t = vec![T::zero(); seq_len * m];
    let mut c_t = vec![T::zero(); seq_len * m];
    for t in 0..seq_len {
        let x = &tokens[t * e..(t + 1) * e];
        for ch in 0..e {
            let row = &sp.delta_w[ch * e..(ch + 1) * e];
            let mut acc = sp.delta_b[ch];
            for i in 0..e {
                acc = acc + row[i] * x[i];
            }
            delta[t * e + ch] = softplus(acc);
        }
        for s in 0..m {
            let row_b = &sp.b_w[s * e..(s + 1) * e];
            let row_c = &sp.c_w[s * e..(s + 1) * e];
            let mut acc_b = sp.b_b[s];
            let mut acc_c = sp.c_b[s];
            for i in 0..e {
                acc_b = acc_b + row_b[i] * x[i];
                acc_c = acc_c + row_c[i] * x[i];
            }
            b_t[t * m + s] = acc_b;
            c_t[t * m + s] = acc_c;
        }
    }
    (delta, b_t, c_t)
}

/// Selective scan over a `seq_len x embed_dim` row-major token buffer with
/// `h_0 = 0`; returns a buffer of the same shape.
pub fn selective_scan<T: Float>(
    sp: &SelectiveParams<T>,
    tokens: &[T],
    seq_len: usize,
) -> Result<Vec<T>, SeqModelError> {
    scan_impl(sp, tokens, seq_len, ScanInit::Zero)
}

pub(crate) fn scan_impl<T: Float>(
    sp: &SelectiveParams<T>,
    tokens: &[T],
    seq_len: usize,
    init: ScanInit,
) -> Result<Vec<T>, SeqModelError> {
    sp.validate()?;
    let (e, m) = (sp.embed_dim, sp.state_dim);
    if tokens.len() != seq_len * e {
        return Err(SeqModelError::ShapeMismatch(format!(
            "token buffer holds {} values, expected {} x {}",
            tokens.len(),
            seq_len,
            e
        )));
    }
    if seq_len == 0 {
        return Ok(Vec::new());
    }

    let (delta, b_t, c_t) = project_tokens(sp, tokens, seq_len);
    let mut out = vec![T::zero(); seq_len * e];
    let mut h = vec![T::zero(); m];

    for ch in 0..e {
        let a_row = &sp.a[ch * m..(ch + 1) * m];
        let d_ch = sp.d_skip[ch];
        match init {
            ScanInit::Zero => h.iter_mut().for_each(|v| *v = T::zero()),
            ScanInit::SteadyState => {
                let x0 = tokens[ch];
                let dt0 = delta[ch];
                for s in 0..m {
                    let z = dt0 * a_row[s];
                    let a_bar = z.exp();
                    let b_bar = dt0 * b_t[s] * zoh_input_factor(z);
                    h[s] = b_bar * x0 / (T::one() - a_bar);
                }
            }
        }
        for t in 0..seq_len {
            let xt = tokens[t * e + ch];
            let dt = delta[t * e + ch];
            let bt = &b_t[t * m..(t + 1) * m];
            let ct = &c_t[t * m..(t + 1) * m];
            let mut yt = d_ch * xt;
            for s in 0..m {
                let z = dt * a_row[s];
                let a_bar = z.exp();
                let b_bar = dt * bt[s] * zoh_input_factor(z);
                h[s] = a_bar * h[s] + b_bar * xt;
                yt = yt + ct[s] * h[s];
            }
            out[t * e + ch] = yt;
        }
    }
    Ok(out)
}

/// Naive per-step oracle for the selective scan: re-discretizes every step
/// from scratch and evaluates the recurrence token by token. The input
/// factor is computed through `exp_m1`, an independent route from the
/// series/closed-form split used by the production kernel.
pub fn selective_scan_naive<T: Float>(
    sp: &SelectiveParams<T>,
    tokens: &[T],
    seq_len: usize,
) -> Result<Vec<T>, SeqModelError> {
    sp.validate()?;
    let (e, m) = (sp.embed_dim, sp.state_dim);
    if tokens.len() != seq_len * e {
        return Err(SeqModelError::ShapeMismatch(
            "token buffer size mismatch".into(),
        ));
    }
    let mut out = vec![T::zero(); seq_len * e];
    let mut h = vec![T::zero(); e * m];
    for t in 0..seq_len {
        let x = &tokens[t * e..(t + 1) * e];
        for ch in 0..e {
            // delta_t for this channel.
            let mut acc = sp.delta_b[ch];
            for i in 0..e {
                acc = acc + sp.delta_w[ch * e + i] * x[i];
            }
            let dt = softplus(acc);
            let mut yt = sp.d_skip[ch] * x[ch];
            for s in 0..m {
                let mut b_acc = sp.b_b[s];
                let mut c_acc = sp.c_b[s];
                for i in 0..e {
                    b_acc = b_acc + sp.b_w[s * e + i] * x[i];
                    c_acc = c_acc + sp.c_w[s * e + i] * x[i];
                }
                let z = dt * sp.a[ch * m + s];
                let a_bar = z.exp();
                let factor = if z == T::zero() {
                    T::one()
                } else {
                    z.exp_m1() / z
                };
                let b_bar = dt * b_acc * factor;
                let hs = &mut h[ch * m + s];
                *hs = a_bar * *hs + b_bar * x[ch];
                yt = yt + c_acc * *hs;
            }
            out[t * e + ch] = yt;
        }
    }
    Ok(out)
}
