//! FastGRNN recurrent cell: forward step, sequence unroll, backpropagation
//! through time, and parameter initialization, in dense and low-rank forms.
//!
//! The cell shares one pre-activation a_t = W x_t + U h_{t-1} between the
//! gate and the candidate:
//!
//!   z_t = sigmoid(a_t + b_z)
//!   c_t = tanh(a_t + b_h)
//!   h_t = (zeta (1 - z_t) + nu) .* c_t + z_t .* h_{t-1}
//!
//! zeta and nu are stored as raw reals passed through a sigmoid so that the
//! effective values stay in (0, 1) under unconstrained gradient descent.

use crate::numerics::{sigmoid, softmax, LowRankMatrix, Matrix, NumericsError, Weight};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastGRNNParams {
    pub w: Weight,
    pub u: Weight,
    pub b_h: Vec<f64>,
    pub b_z: Vec<f64>,
    pub zeta_raw: f64,
    pub nu_raw: f64,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl FastGRNNParams {
    pub fn zeta(&self) -> f64 {
        sigmoid(self.zeta_raw)
    }

    pub fn nu(&self) -> f64 {
        sigmoid(self.nu_raw)
    }

    /// Zero-valued structure mirroring `self`; used as a gradient accumulator.
    pub fn zeros_like(&self) -> FastGRNNParams {
        fn zero_weight(w: &Weight) -> Weight {
            match w {
                Weight::Dense(m) => Weight::Dense(Matrix::zeros(m.rows, m.cols)),
                Weight::LowRank(lr) => Weight::LowRank(LowRankMatrix {
                    left: Matrix::zeros(lr.left.rows, lr.left.cols),
                    right: Matrix::zeros(lr.right.rows, lr.right.cols),
                }),
            }
        }
        FastGRNNParams {
            w: zero_weight(&self.w),
            u: zero_weight(&self.u),
            b_h: vec![0.0; self.hidden_dim],
            b_z: vec![0.0; self.hidden_dim],
            zeta_raw: 0.0,
            nu_raw: 0.0,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
        }
    }

    /// All-zero parameters with the given shape (dense or factored).
    pub fn zeros(input_dim: usize, hidden_dim: usize, rank: Option<usize>) -> FastGRNNParams {
        let weight = |rows: usize, cols: usize| match rank {
            None => Weight::Dense(Matrix::zeros(rows, cols)),
            Some(r) => Weight::LowRank(LowRankMatrix {
                left: Matrix::zeros(rows, r),
                right: Matrix::zeros(r, cols),
            }),
        };
        FastGRNNParams {
            w: weight(hidden_dim, input_dim),
            u: weight(hidden_dim, hidden_dim),
            b_h: vec![0.0; hidden_dim],
            b_z: vec![0.0; hidden_dim],
            zeta_raw: 0.0,
            nu_raw: 0.0,
            input_dim,
            hidden_dim,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        push_weight(&mut out, &self.w);
        push_weight(&mut out, &self.u);
        out.extend_from_slice(&self.b_h);
        out.extend_from_slice(&self.b_z);
        out.push(self.zeta_raw);
        out.push(self.nu_raw);
        out
    }

    pub fn unflatten_from(&mut self, flat: &[f64]) {
        let mut pos = 0usize;
        pop_weight(&mut self.w, flat, &mut pos);
        pop_weight(&mut self.u, flat, &mut pos);
        self.b_h.copy_from_slice(&flat[pos..pos + self.hidden_dim]);
        pos += self.hidden_dim;
        self.b_z.copy_from_slice(&flat[pos..pos + self.hidden_dim]);
        pos += self.hidden_dim;
        self.zeta_raw = flat[pos];
        self.nu_raw = flat[pos + 1];
        pos += 2;
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }

    pub fn num_params(&self) -> usize {
        self.flatten().len()
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite()
            && self.u.is_finite()
            && self.b_h.iter().all(|v| v.is_finite())
            && self.b_z.iter().all(|v| v.is_finite())
            && self.zeta_raw.is_finite()
            && self.nu_raw.is_finite()
    }
}

fn push_weight(out: &mut Vec<f64>, w: &Weight) {
    match w {
        Weight::Dense(m) => out.extend_from_slice(&m.data),
        Weight::LowRank(lr) => {
            out.extend_from_slice(&lr.left.data);
            out.extend_from_slice(&lr.right.data);
        }
    }
}

fn pop_weight(w: &mut Weight, flat: &[f64], pos: &mut usize) {
    match w {
        Weight::Dense(m) => {
            let n = m.data.len();
            m.data.copy_from_slice(&flat[*pos..*pos + n]);
            *pos += n;
        }
        Weight::LowRank(lr) => {
            let nl = lr.left.data.len();
            lr.left.data.copy_from_slice(&flat[*pos..*pos + nl]);
            *pos += nl;
            let nr = lr.right.data.len();
            lr.right.data.copy_from_slice(&flat[*pos..*pos + nr]);
            *pos += nr;
        }
    }
}

/// Intermediates saved by `cell_step` for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    /// Shared pre-activation W x_t + U h_{t-1} (before biases).
    pub pre: Vec<f64>,
    pub z: Vec<f64>,
    pub c: Vec<f64>,
    pub h_prev: Vec<f64>,
    /// right_w · x for low-rank W (empty when dense).
    pub mid_w: Vec<f64>,
    /// right_u · h_prev for low-rank U (empty when dense).
    pub mid_u: Vec<f64>,
}

pub fn cell_step(
    p: &FastGRNNParams,
    x_t: &[f64],
    h_prev: &[f64],
) -> Result<(Vec<f64>, StepCache), NumericsError> {
    cell_step_impl(p, x_t, h_prev, false)
}

/// Cell step with the piecewise-linear nonlinearities used by the integer
/// engine: gate = clamp((a+1)/2, 0, 1), candidate = clamp(a, -1, 1). Used to
/// fine-tune models so float and quantized inference make the same decisions.
pub fn clamp_cell_step(
    p: &FastGRNNParams,
    x_t: &[f64],
    h_prev: &[f64],
) -> Result<(Vec<f64>, StepCache), NumericsError> {
    cell_step_impl(p, x_t, h_prev, true)
}

fn cell_step_impl(
    p: &FastGRNNParams,
    x_t: &[f64],
    h_prev: &[f64],
    clamped: bool,
) -> Result<(Vec<f64>, StepCache), NumericsError> {
    if x_t.len() != p.input_dim || h_prev.len() != p.hidden_dim {
        return Err(NumericsError::DimMismatch(format!(
            "cell_step: expected x of length {}, h of length {}; got {}, {}",
            p.input_dim,
            p.hidden_dim,
            x_t.len(),
            h_prev.len()
        )));
    }
    // Shared pre-activation, computed once per step.
    let (wx, mid_w) = match &p.w {
        Weight::Dense(m) => (m.matvec(x_t)?, Vec::new()),
        Weight::LowRank(lr) => {
            let mid = lr.right.matvec(x_t)?;
            (lr.left.matvec(&mid)?, mid)
        }
    };
    let (uh, mid_u) = match &p.u {
        Weight::Dense(m) => (m.matvec(h_prev)?, Vec::new()),
        Weight::LowRank(lr) => {
            let mid = lr.right.matvec(h_prev)?;
            (lr.left.matvec(&mid)?, mid)
        }
    };
    let pre: Vec<f64> = wx.iter().zip(&uh).map(|(a, b)| a + b).collect();
    let zeta = p.zeta();
    let nu = p.nu();
    let mut z = vec![0.0; p.hidden_dim];
    let mut c = vec![0.0; p.hidden_dim];
    let mut h = vec![0.0; p.hidden_dim];
    for i in 0..p.hidden_dim {
        if clamped {
            z[i] = ((pre[i] + p.b_z[i] + 1.0) / 2.0).clamp(0.0, 1.0);
            c[i] = (pre[i] + p.b_h[i]).clamp(-1.0, 1.0);
        } else {
            z[i] = sigmoid(pre[i] + p.b_z[i]);
            c[i] = (pre[i] + p.b_h[i]).tanh();
        }
        h[i] = (zeta * (1.0 - z[i]) + nu) * c[i] + z[i] * h_prev[i];
    }
    let cache = StepCache {
        pre,
        z,
        c,
        h_prev: h_prev.to_vec(),
        mid_w,
        mid_u,
    };
    Ok((h, cache))
}

/// Unrolls the cell over a sequence; returns hidden states h_1..h_T and caches.
pub fn forward(
    p: &FastGRNNParams,
    xs: &[Vec<f64>],
    h0: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<StepCache>), NumericsError> {
    forward_impl(p, xs, h0, false)
}

/// `forward` with the piecewise-linear nonlinearities (see `clamp_cell_step`).
pub fn clamp_forward(
    p: &FastGRNNParams,
    xs: &[Vec<f64>],
    h0: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<StepCache>), NumericsError> {
    forward_impl(p, xs, h0, true)
}

fn forward_impl(
    p: &FastGRNNParams,
    xs: &[Vec<f64>],
    h0: &[f64],
    clamped: bool,
) -> Result<(Vec<Vec<f64>>, Vec<StepCache>), NumericsError> {
    if xs.is_empty() {
        return Err(NumericsError::InvalidArg("forward: empty input sequence".into()));
    }
    let mut states = Vec::with_capacity(xs.len());
    let mut caches = Vec::with_capacity(xs.len());
    let mut h = h0.to_vec();
    for x in xs {
        let (h_next, cache) = cell_step_impl(p, x, &h, clamped)?;
        states.push(h_next.clone());
        caches.push(cache);
        h = h_next;
    }
    Ok((states, caches))
}

/// Result of a full BPTT pass.
pub struct BackwardResult {
    /// Gradients in a structure mirroring `FastGRNNParams`
    /// (zeta_raw/nu_raw fields hold the raw-parameter gradients).
    pub grads: FastGRNNParams,
    /// Gradient of the loss with respect to each input x_t.
    pub dxs: Vec<Vec<f64>>,
    /// Gradient with respect to the initial hidden state.
    pub dh0: Vec<f64>,
}

/// Exact reverse-mode gradients of sum_t <grad_wrt_states[t], h_t> with
/// respect to every parameter and every input.
pub fn backward(
    p: &FastGRNNParams,
    xs: &[Vec<f64>],
    caches: &[StepCache],
    grad_wrt_states: &[Vec<f64>],
) -> Result<BackwardResult, NumericsError> {
    backward_impl(p, xs, caches, grad_wrt_states, false)
}

/// BPTT through `clamp_forward`. The piecewise-linear nonlinearities have
/// derivative 1/2 (gate) and 1 (candidate) inside (-1, 1) of their
/// pre-activation and 0 outside; exact almost everywhere.
pub fn clamp_backward(
    p: &FastGRNNParams,
    xs: &[Vec<f64>],
    caches: &[StepCache],
    grad_wrt_states: &[Vec<f64>],
) -> Result<BackwardResult, NumericsError> {
    backward_impl(p, xs, caches, grad_wrt_states, true)
}

fn backward_impl(
    p: &FastGRNNParams,
    xs: &[Vec<f64>],
    caches: &[StepCache],
    grad_wrt_states: &[Vec<f64>],
    clamped: bool,
) -> Result<BackwardResult, NumericsError> {
    if xs.len() != caches.len() || xs.len() != grad_wrt_states.len() {
        return Err(NumericsError::DimMismatch(format!(
            "backward: sequence length {} vs caches {} vs state grads {}",
            xs.len(),
            caches.len(),
            grad_wrt_states.len()
        )));
    }
    let d_hat = p.hidden_dim;
    let zeta = p.zeta();
    let nu = p.nu();
    let mut grads = p.zeros_like();
    let mut d_zeta = 0.0;
    let mut d_nu = 0.0;
    let mut dxs = vec![Vec::new(); xs.len()];
    let mut dh_carry = vec![0.0; d_hat];

    for t in (0..xs.len()).rev() {
        let cache = &caches[t];
        let mut dh = grad_wrt_states[t].clone();
        for (a, b) in dh.iter_mut().zip(&dh_carry) {
            *a += b;
        }
        let mut dpre = vec![0.0; d_hat];
        let mut dh_prev = vec![0.0; d_hat];
        for i in 0..d_hat {
            let z = cache.z[i];
            let c = cache.c[i];
            let gate = zeta * (1.0 - z) + nu;
            let dc = dh[i] * gate;
            let dgate = dh[i] * c;
            let dz = dh[i] * cache.h_prev[i] - dgate * zeta;
            d_zeta += dgate * (1.0 - z);
            d_nu += dgate;
            dh_prev[i] = dh[i] * z;
            let (dpre_z, dpre_c) = if clamped {
                let a_z = cache.pre[i] + p.b_z[i];
                let a_c = cache.pre[i] + p.b_h[i];
                (
                    if a_z.abs() < 1.0 { dz * 0.5 } else { 0.0 },
                    if a_c.abs() < 1.0 { dc } else { 0.0 },
                )
            } else {
                (dz * z * (1.0 - z), dc * (1.0 - c * c))
            };
            grads.b_z[i] += dpre_z;
            grads.b_h[i] += dpre_c;
            dpre[i] = dpre_z + dpre_c;
        }
        // Input map.
        let dx = accumulate_weight_grad(&p.w, &mut grads.w, &dpre, &xs[t], &cache.mid_w)?;
        dxs[t] = dx;
        // Recurrent map.
        let dh_rec = accumulate_weight_grad(&p.u, &mut grads.u, &dpre, &cache.h_prev, &cache.mid_u)?;
        for (a, b) in dh_prev.iter_mut().zip(&dh_rec) {
            *a += b;
        }
        dh_carry = dh_prev;
    }
    grads.zeta_raw = d_zeta * zeta * (1.0 - zeta);
    grads.nu_raw = d_nu * nu * (1.0 - nu);
    Ok(BackwardResult {
        grads,
        dxs,
        dh0: dh_carry,
    })
}

/// Accumulates d(pre)/d(weight) into `grad` and returns d(pre)/d(input).
fn accumulate_weight_grad(
    w: &Weight,
    grad: &mut Weight,
    dpre: &[f64],
    input: &[f64],
    mid: &[f64],
) -> Result<Vec<f64>, NumericsError> {
    match (w, grad) {
        (Weight::Dense(m), Weight::Dense(g)) => {
            g.add_outer(dpre, input);
            m.matvec_t(dpre)
        }
        (Weight::LowRank(lr), Weight::LowRank(g)) => {
            // pre = L (R x): dL += dpre ⊗ (R x), dR += (Lᵀ dpre) ⊗ x, dx = Rᵀ Lᵀ dpre
            g.left.add_outer(dpre, mid);
            let dmid = lr.left.matvec_t(dpre)?;
            g.right.add_outer(&dmid, input);
            lr.right.matvec_t(&dmid)
        }
        _ => unreachable!("gradient structure mismatch"),
    }
}

/// Weights drawn uniform in [-1/sqrt(hidden), 1/sqrt(hidden)]; zeta_raw = +2,
/// nu_raw = -4 so the cell starts in a leaky-integrator regime.
pub fn init_params(
    input_dim: usize,
    hidden_dim: usize,
    rank: Option<usize>,
    seed: u64,
) -> Result<FastGRNNParams, NumericsError> {
    if input_dim == 0 || hidden_dim == 0 {
        return Err(NumericsError::InvalidArg("dims must be >= 1".into()));
    }
    if let Some(r) = rank {
        if r == 0 || r > input_dim.min(hidden_dim) {
            return Err(NumericsError::InvalidArg(format!(
                "rank {} out of range for dims {}x{}",
                r, hidden_dim, input_dim
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (hidden_dim as f64).sqrt();
    let mut rand_matrix = |rows: usize, cols: usize| Matrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
    };
    let make = |rows: usize, cols: usize, rand_matrix: &mut dyn FnMut(usize, usize) -> Matrix| match rank {
        None => Weight::Dense(rand_matrix(rows, cols)),
        Some(r) => Weight::LowRank(LowRankMatrix {
            left: rand_matrix(rows, r),
            right: rand_matrix(r, cols),
        }),
    };
    let w = make(hidden_dim, input_dim, &mut rand_matrix);
    let u = make(hidden_dim, hidden_dim, &mut rand_matrix);
    Ok(FastGRNNParams {
        w,
        u,
        b_h: vec![0.0; hidden_dim],
        b_z: vec![0.0; hidden_dim],
        zeta_raw: 2.0,
        nu_raw: -4.0,
        input_dim,
        hidden_dim,
    })
}

/// Fully connected readout layer on top of a hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Readout {
    pub fn zeros(num_classes: usize, hidden_dim: usize) -> Self {
        Readout {
            w: Matrix::zeros(num_classes, hidden_dim),
            b: vec![0.0; num_classes],
        }
    }

    pub fn init(num_classes: usize, hidden_dim: usize, seed: u64) -> Self {
        assert!(num_classes >= 2, "readout needs at least 2 classes");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        Readout {
            w: Matrix {
                rows: num_classes,
                cols: hidden_dim,
                data: (0..num_classes * hidden_dim)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect(),
            },
            b: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w.rows
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.cols
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>, NumericsError> {
        let mut l = self.w.matvec(h)?;
        for (a, b) in l.iter_mut().zip(&self.b) {
            *a += b;
        }
        Ok(l)
    }

    pub fn predict(&self, h: &[f64]) -> Result<Vec<f64>, NumericsError> {
        Ok(softmax(&self.logits(h)?))
    }

    /// Accumulates gradients for dlogits into (gw, gb) and returns dh.
    pub fn backward(
        &self,
        h: &[f64],
        dlogits: &[f64],
        gw: &mut Matrix,
        gb: &mut [f64],
    ) -> Result<Vec<f64>, NumericsError> {
        gw.add_outer(dlogits, h);
        for (a, b) in gb.iter_mut().zip(dlogits) {
            *a += b;
        }
        self.w.matvec_t(dlogits)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.w.data.clone();
        out.extend_from_slice(&self.b);
        out
    }

    pub fn unflatten_from(&mut self, flat: &[f64]) {
        let n = self.w.data.len();
        self.w.data.copy_from_slice(&flat[..n]);
        self.b.copy_from_slice(&flat[n..]);
    }
}

/// d(cross-entropy(softmax(logits), y))/d(logits) = softmax(logits) - onehot(y).
pub fn softmax_ce_dlogits(logits: &[f64], y: usize) -> Vec<f64> {
    let mut d = softmax(logits);
    d[y] -= 1.0;
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use approx::assert_abs_diff_eq;

    fn scalar_params(w: f64, u: f64, zeta_raw: f64, nu_raw: f64) -> FastGRNNParams {
        FastGRNNParams {
            w: Weight::Dense(Matrix::from_rows(&[&[w]])),
            u: Weight::Dense(Matrix::from_rows(&[&[u]])),
            b_h: vec![0.0],
            b_z: vec![0.0],
            zeta_raw,
            nu_raw,
            input_dim: 1,
            hidden_dim: 1,
        }
    }

    // zeta_raw/nu_raw values that saturate sigmoid to ~1 and ~0 at f64 precision.
    const RAW_ONE: f64 = 60.0;
    const RAW_ZERO: f64 = -60.0;

    #[test]
    fn cell_step_zero_weights() {
        // All weights zero, zeta=1, nu=0: z = sigmoid(0) = 0.5, c = tanh(0) = 0,
        // so h = z * h_prev = 0.5.
        let p = scalar_params(0.0, 0.0, RAW_ONE, RAW_ZERO);
        let (h, _) = cell_step(&p, &[0.3], &[1.0]).unwrap();
        assert_abs_diff_eq!(h[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn cell_step_scalar_case() {
        // W=1, U=0, x=1, h_prev=1, zeta=1, nu=0:
        // z = sigmoid(1), c = tanh(1), h = (1-z)*c + z*1
        let p = scalar_params(1.0, 0.0, RAW_ONE, RAW_ZERO);
        let (h, cache) = cell_step(&p, &[1.0], &[1.0]).unwrap();
        let z = sigmoid(1.0);
        let c = 1.0_f64.tanh();
        assert_abs_diff_eq!(cache.z[0], 0.731058578630005, epsilon = 1e-12);
        assert_abs_diff_eq!(cache.c[0], 0.761594155955765, epsilon = 1e-12);
        let expected = (1.0 - z) * c + z;
        assert_abs_diff_eq!(h[0], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(h[0], 0.93594, epsilon = 1e-4);
    }

    #[test]
    fn cell_step_candidate_gated_off() {
        // zeta = nu = 0 -> h = z .* h_prev exactly.
        let p = scalar_params(0.7, -0.4, RAW_ZERO, RAW_ZERO);
        let (h, cache) = cell_step(&p, &[0.9], &[0.6]).unwrap();
        assert_abs_diff_eq!(h[0], cache.z[0] * 0.6, epsilon = 1e-15);
    }

    #[test]
    fn cell_step_dim_mismatch() {
        let p = scalar_params(1.0, 1.0, 0.0, 0.0);
        assert!(cell_step(&p, &[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn forward_single_step_matches_cell_step() {
        let p = scalar_params(0.5, -0.2, 1.0, -1.0);
        let (states, _) = forward(&p, &[vec![0.4]], &[0.1]).unwrap();
        let (h, _) = cell_step(&p, &[0.4], &[0.1]).unwrap();
        assert_eq!(states[0], h);
    }

    #[test]
    fn forward_geometric_decay() {
        // zero weights, zeta=1, nu=0, h0=1: h halves each step.
        let p = scalar_params(0.0, 0.0, RAW_ONE, RAW_ZERO);
        let xs = vec![vec![0.0]; 3];
        let (states, _) = forward(&p, &xs, &[1.0]).unwrap();
        assert_abs_diff_eq!(states[0][0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(states[1][0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(states[2][0], 0.125, epsilon = 1e-12);
    }

    #[test]
    fn forward_empty_sequence_errors() {
        let p = scalar_params(0.0, 0.0, 0.0, 0.0);
        assert!(forward(&p, &[], &[0.0]).is_err());
    }

    #[test]
    fn forward_matches_manual_composition() {
        let p = init_params(3, 4, None, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let h0 = vec![0.0; 4];
        let (states, _) = forward(&p, &xs, &h0).unwrap();
        let mut h = h0.clone();
        for (t, x) in xs.iter().enumerate() {
            let (h_next, _) = cell_step(&p, x, &h).unwrap();
            assert_eq!(states[t], h_next);
            h = h_next;
        }
    }

    #[test]
    fn backward_zero_state_grads_give_zero() {
        let p = init_params(2, 3, None, 1).unwrap();
        let xs = vec![vec![0.5, -0.5]; 4];
        let (_, caches) = forward(&p, &xs, &[0.0; 3]).unwrap();
        let gs = vec![vec![0.0; 3]; 4];
        let r = backward(&p, &xs, &caches, &gs).unwrap();
        assert!(r.grads.flatten().iter().all(|g| *g == 0.0));
        assert!(r.dxs.iter().all(|dx| dx.iter().all(|g| *g == 0.0)));
    }

    /// Finite-difference check of every parameter coordinate for a given config.
    fn grad_check(p: &FastGRNNParams, xs: &[Vec<f64>], tol: f64) {
        let h0 = vec![0.0; p.hidden_dim];
        // Loss = sum over t, i of s_ti * h_t[i] with fixed pseudo-random s.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let state_grads: Vec<Vec<f64>> = (0..xs.len())
            .map(|_| (0..p.hidden_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let (_, caches) = forward(p, xs, &h0).unwrap();
        let analytic = backward(p, xs, &caches, &state_grads).unwrap().grads.flatten();

        let theta0 = p.flatten();
        let mut probe = p.clone();
        let numeric = finite_diff_grad(
            |theta| {
                probe.unflatten_from(theta);
                let (states, _) = forward(&probe, xs, &h0).unwrap();
                states
                    .iter()
                    .zip(&state_grads)
                    .map(|(h, g)| h.iter().zip(g).map(|(a, b)| a * b).sum::<f64>())
                    .sum()
            },
            &theta0,
            1e-6,
        )
        .unwrap();

        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-6);
            let rel = (a - n).abs() / denom;
            assert!(
                rel <= tol,
                "coordinate {}: analytic {} vs numeric {} (rel {})",
                i,
                a,
                n,
                rel
            );
        }
    }

    #[test]
    fn backward_scalar_matches_finite_difference() {
        let p = scalar_params(1.0, 0.0, RAW_ONE, RAW_ZERO);
        // Loss = h_1 directly.
        let xs = vec![vec![1.0]];
        let (_, caches) = forward(&p, &xs, &[1.0]).unwrap();
        let analytic = backward(&p, &xs, &caches, &[vec![1.0]]).unwrap().grads;
        let dw_analytic = match &analytic.w {
            Weight::Dense(m) => m.data[0],
            _ => unreachable!(),
        };
        let numeric = finite_diff_grad(
            |theta| {
                let p2 = scalar_params(theta[0], 0.0, RAW_ONE, RAW_ZERO);
                cell_step(&p2, &[1.0], &[1.0]).unwrap().0[0]
            },
            &[1.0],
            1e-6,
        )
        .unwrap();
        let rel = (dw_analytic - numeric[0]).abs() / numeric[0].abs().max(1e-12);
        assert!(rel < 1e-6, "rel error {}", rel);
    }

    #[test]
    fn backward_low_rank_matches_finite_difference() {
        let p = init_params(3, 5, Some(2), 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        grad_check(&p, &xs, 1e-4);
    }

    #[test]
    fn backward_dense_matches_finite_difference() {
        let p = init_params(4, 6, None, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        grad_check(&p, &xs, 1e-4);
    }

    #[test]
    fn clamp_cell_step_zero_weights() {
        // Zero weights: gate = clamp(1/2) = 1/2, candidate = clamp(0) = 0,
        // so h = z * h_prev exactly, as in the smooth case.
        let mut p = init_params(2, 3, None, 9).unwrap();
        p.w = Weight::Dense(Matrix::zeros(3, 2));
        p.u = Weight::Dense(Matrix::zeros(3, 3));
        let (h, _) = clamp_cell_step(&p, &[0.4, -0.2], &[1.0, -0.5, 0.25]).unwrap();
        assert_eq!(h, vec![0.5, -0.25, 0.125]);
    }

    #[test]
    fn clamp_cell_step_saturates_both_nonlinearities() {
        // Large positive pre-activation: gate = 1 pins h to h_prev plus the
        // nu-weighted saturated candidate.
        let p = scalar_params(3.0, 0.0, RAW_ONE, RAW_ZERO);
        let nu = p.nu();
        let (h, _) = clamp_cell_step(&p, &[1.0], &[0.25]).unwrap();
        assert!((h[0] - (nu * 1.0 + 0.25)).abs() < 1e-12, "got {}", h[0]);
    }

    /// Finite-difference check of `clamp_backward`, mirroring `grad_check`.
    /// The loss is piecewise linear in the parameters; the check stays valid
    /// as long as no probed point crosses a kink, which the small random
    /// weights and inputs keep overwhelmingly likely.
    fn clamp_grad_check(p: &FastGRNNParams, xs: &[Vec<f64>], tol: f64) {
        let h0 = vec![0.0; p.hidden_dim];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let state_grads: Vec<Vec<f64>> = (0..xs.len())
            .map(|_| (0..p.hidden_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let (_, caches) = clamp_forward(p, xs, &h0).unwrap();
        let analytic = clamp_backward(p, xs, &caches, &state_grads)
            .unwrap()
            .grads
            .flatten();

        let theta0 = p.flatten();
        let mut probe = p.clone();
        let numeric = finite_diff_grad(
            |theta| {
                probe.unflatten_from(theta);
                let (states, _) = clamp_forward(&probe, xs, &h0).unwrap();
                states
                    .iter()
                    .zip(&state_grads)
                    .map(|(h, g)| h.iter().zip(g).map(|(a, b)| a * b).sum::<f64>())
                    .sum()
            },
            &theta0,
            1e-6,
        )
        .unwrap();

        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-6);
            let rel = (a - n).abs() / denom;
            assert!(
                rel <= tol,
                "coordinate {}: analytic {} vs numeric {} (rel {})",
                i,
                a,
                n,
                rel
            );
        }
    }

    #[test]
    fn clamp_backward_dense_matches_finite_difference() {
        let p = init_params(4, 6, None, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        clamp_grad_check(&p, &xs, 1e-4);
    }

    #[test]
    fn clamp_backward_low_rank_matches_finite_difference() {
        let p = init_params(3, 5, Some(2), 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        clamp_grad_check(&p, &xs, 1e-4);
    }

    #[test]
    fn init_deterministic_per_seed() {
        let a = init_params(2, 16, None, 123).unwrap();
        let b = init_params(2, 16, None, 123).unwrap();
        assert_eq!(a, b);
        let c = init_params(2, 16, None, 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_dense_shape() {
        let p = init_params(2, 16, None, 0).unwrap();
        match &p.w {
            Weight::Dense(m) => {
                assert_eq!((m.rows, m.cols), (16, 2));
            }
            _ => panic!("expected dense"),
        }
    }

    #[test]
    fn init_low_rank_parameter_count() {
        let p = init_params(16, 16, Some(4), 0).unwrap();
        match &p.w {
            Weight::LowRank(lr) => {
                let n = lr.left.data.len() + lr.right.data.len();
                assert_eq!(n, 2 * 16 * 4);
                assert!(n < 256);
            }
            _ => panic!("expected low-rank"),
        }
    }

    #[test]
    fn init_rank_too_large_errors() {
        assert!(init_params(2, 16, Some(3), 0).is_err());
    }

    #[test]
    fn boundedness_when_zeta_plus_nu_le_one() {
        // If zeta + nu <= 1 and |h0| <= 1 then |h_t| <= 1 for all t.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..20 {
            let mut p = init_params(3, 4, None, trial).unwrap();
            // Raw values chosen so sigmoid(zeta_raw) + sigmoid(nu_raw) <= 1.
            p.zeta_raw = rng.gen_range(-2.0..0.0);
            p.nu_raw = rng.gen_range(-6.0..-2.0);
            assert!(p.zeta() + p.nu() <= 1.0);
            let xs: Vec<Vec<f64>> = (0..20)
                .map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect();
            let h0: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (states, _) = forward(&p, &xs, &h0).unwrap();
            for h in &states {
                for v in h {
                    assert!(v.abs() <= 1.0 + 1e-12, "|h| = {}", v.abs());
                }
            }
        }
    }
}
