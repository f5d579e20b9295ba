//! Q15 fixed-point mirror of the inference path.
//!
//! Every tensor carries a per-tensor power-of-two scale: real value =
//! int / 2^15 x 2^scale_exp. Rescaling between scales is therefore a bit
//! shift; rounding is half-away-from-zero everywhere, which pins down
//! bit-exact outputs.
//!
//! Scale plan for the integer cell (32-bit accumulators throughout):
//!   - weights/biases: per-tensor scale from quantization;
//!   - inputs: one tensor (and scale) per instance;
//!   - hidden state: i16 at fixed scale_exp 2 (range +/-4), saturating;
//!   - pre-activation accumulator: i32 at scale_exp 2; every product is
//!     shifted to that scale immediately, so D̂ <= 64 terms cannot overflow;
//!   - low-rank intermediate (R x): i32 at the accumulator scale;
//!   - gates: scale_exp 0, where quantTanh(x) = clamp(x, +/-1) and
//!     quantSigm(x) = clamp((x+1)/2, 0, 1) are exact integer clamps.
//!
//! The lower tier's probability threshold is folded into a logit threshold
//! (two-class softmax is monotone in the logit difference), so thresholding
//! needs no integer softmax; the upper tier takes argmax on raw integer
//! logits.

use crate::cascade::{CascadeError, Decision, InferenceTrace, MSCModel};
use crate::cost::{flops_cell_step, flops_readout};
use crate::emi::Instance;
use crate::fastgrnn::FastGRNNParams;
use crate::numerics::{LowRankMatrix, Matrix, Weight};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("non-finite value in tensor")]
    NonFinite,
    #[error("32-bit accumulator overflow")]
    Overflow,
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Cascade(#[from] CascadeError),
}

pub const Q15_ONE: i32 = 32768;
pub const Q15_MAX: i32 = 32767;
pub const Q15_MIN: i32 = -32768;
/// Hidden state lives at this scale (range +/-4).
pub const H_SCALE_EXP: u32 = 2;
/// Pre-activation accumulator scale.
pub const PRE_SCALE_EXP: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Q15Tensor {
    pub shape: Vec<usize>,
    /// real = data / 2^15 x 2^scale_exp
    pub scale_exp: u32,
    pub data: Vec<i16>,
}

impl Q15Tensor {
    pub fn dequantize(&self) -> Vec<f64> {
        let s = (self.scale_exp as f64).exp2() / 32768.0;
        self.data.iter().map(|v| *v as f64 * s).collect()
    }
}

/// Smallest e >= 0 with max|x| <= 2^e; data = round-half-away-from-zero of
/// x / 2^e x 32768, clamped to the i16 range (saturation by contract).
pub fn quantize_q15(x: &[f64], shape: Vec<usize>) -> Result<Q15Tensor, QuantError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite);
    }
    assert_eq!(x.len(), shape.iter().product::<usize>());
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut e = 0u32;
    while max > (e as f64).exp2() {
        e += 1;
    }
    let scale = 32768.0 / (e as f64).exp2();
    let data = x
        .iter()
        .map(|v| (v * scale).round().clamp(Q15_MIN as f64, Q15_MAX as f64) as i16)
        .collect();
    Ok(Q15Tensor {
        shape,
        scale_exp: e,
        data,
    })
}

fn quantize_scalar_unit(x: f64) -> i16 {
    (x * 32768.0)
        .round()
        .clamp(Q15_MIN as f64, Q15_MAX as f64) as i16
}

/// Right shift by `s` with round-half-away-from-zero; negative `s` is a
/// checked left shift.
fn shift_scaled(v: i32, s: i32) -> Result<i32, QuantError> {
    if s <= 0 {
        let f = 1i32.checked_shl((-s) as u32).ok_or(QuantError::Overflow)?;
        return v.checked_mul(f).ok_or(QuantError::Overflow);
    }
    if s >= 32 {
        return Ok(0);
    }
    let add = 1i64 << (s - 1);
    let v64 = v as i64;
    let r = if v64 >= 0 {
        (v64 + add) >> s
    } else {
        -((-v64 + add) >> s)
    };
    i32::try_from(r).map_err(|_| QuantError::Overflow)
}

/// clamp(x, -1, 1) on a scale-0 operand.
pub fn quant_tanh(x: i32) -> i16 {
    x.clamp(Q15_MIN, Q15_MAX) as i16
}

/// clamp((x+1)/2, 0, 1) on a scale-0 operand.
pub fn quant_sigm(x: i32) -> i16 {
    let y = shift_scaled(x.saturating_add(Q15_ONE), 1).unwrap_or(i32::MAX);
    y.clamp(0, Q15_MAX) as i16
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum QWeight {
    Dense(Q15Tensor),
    LowRank { left: Q15Tensor, right: Q15Tensor },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedCell {
    pub w: QWeight,
    pub u: QWeight,
    pub b_z: Q15Tensor,
    pub b_h: Q15Tensor,
    /// Scale-0 Q15 scalars.
    pub zeta_q15: i16,
    pub nu_q15: i16,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedReadout {
    pub w: Q15Tensor,
    pub b: Q15Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub lower_cell: QuantizedCell,
    pub lower_readout: QuantizedReadout,
    pub upper_cell: QuantizedCell,
    pub upper_readout: QuantizedReadout,
    pub k: usize,
    pub p_hat: f64,
    /// logit(p_hat) as a Q15 scalar; the lower tier compares the integer
    /// logit difference against this.
    pub p_hat_logit: Q15Tensor,
}

fn quantize_weight(w: &Weight) -> Result<QWeight, QuantError> {
    Ok(match w {
        Weight::Dense(m) => QWeight::Dense(quantize_q15(&m.data, vec![m.rows, m.cols])?),
        Weight::LowRank(lr) => QWeight::LowRank {
            left: quantize_q15(&lr.left.data, vec![lr.left.rows, lr.left.cols])?,
            right: quantize_q15(&lr.right.data, vec![lr.right.rows, lr.right.cols])?,
        },
    })
}

fn dequantize_weight(w: &QWeight) -> Weight {
    match w {
        QWeight::Dense(t) => Weight::Dense(Matrix {
            rows: t.shape[0],
            cols: t.shape[1],
            data: t.dequantize(),
        }),
        QWeight::LowRank { left, right } => Weight::LowRank(LowRankMatrix {
            left: Matrix {
                rows: left.shape[0],
                cols: left.shape[1],
                data: left.dequantize(),
            },
            right: Matrix {
                rows: right.shape[0],
                cols: right.shape[1],
                data: right.dequantize(),
            },
        }),
    }
}

pub fn quantize_cell(p: &FastGRNNParams) -> Result<QuantizedCell, QuantError> {
    Ok(QuantizedCell {
        w: quantize_weight(&p.w)?,
        u: quantize_weight(&p.u)?,
        b_z: quantize_q15(&p.b_z, vec![p.hidden_dim])?,
        b_h: quantize_q15(&p.b_h, vec![p.hidden_dim])?,
        zeta_q15: quantize_scalar_unit(p.zeta()),
        nu_q15: quantize_scalar_unit(p.nu()),
        input_dim: p.input_dim,
        hidden_dim: p.hidden_dim,
    })
}

/// Float cell with the quantized tensors' values (gate parameters exact on
/// the Q15 grid). zeta/nu raws are recovered through the logit, saturating
/// at the grid endpoints.
pub fn dequantize_cell(c: &QuantizedCell) -> FastGRNNParams {
    let inv_logit = |q: i16| {
        let p = (q as f64 / 32768.0).clamp(1.0 / 65536.0, 1.0 - 1.0 / 65536.0);
        (p / (1.0 - p)).ln()
    };
    FastGRNNParams {
        w: dequantize_weight(&c.w),
        u: dequantize_weight(&c.u),
        b_z: c.b_z.dequantize(),
        b_h: c.b_h.dequantize(),
        zeta_raw: inv_logit(c.zeta_q15),
        nu_raw: inv_logit(c.nu_q15),
        input_dim: c.input_dim,
        hidden_dim: c.hidden_dim,
    }
}

pub fn quantize_model(m: &MSCModel) -> Result<QuantizedModel, QuantError> {
    let p = m.lower.p_hat.clamp(1e-6, 1.0 - 1e-6);
    let logit = (p / (1.0 - p)).ln();
    Ok(QuantizedModel {
        lower_cell: quantize_cell(&m.lower.cell)?,
        lower_readout: QuantizedReadout {
            w: quantize_q15(&m.lower.readout.w.data, vec![2, m.lower.cell.hidden_dim])?,
            b: quantize_q15(&m.lower.readout.b, vec![2])?,
        },
        upper_cell: quantize_cell(&m.upper_cell)?,
        upper_readout: QuantizedReadout {
            w: quantize_q15(
                &m.upper_readout.w.data,
                vec![m.upper_readout.w.rows, m.upper_cell.hidden_dim],
            )?,
            b: quantize_q15(&m.upper_readout.b, vec![m.upper_readout.b.len()])?,
        },
        k: m.lower.k,
        p_hat: m.lower.p_hat,
        p_hat_logit: quantize_q15(&[logit], vec![1])?,
    })
}

/// Dense rows x cols matvec with per-product rescale into the accumulator
/// scale: each i16 x i16 product is shifted by 15 + PRE - e_w - e_x before
/// accumulation, so at most 2^(e_w + e_x + 13) per term.
fn qmatvec_dense(t: &Q15Tensor, x: &[i16], e_x: u32) -> Result<Vec<i32>, QuantError> {
    let (rows, cols) = (t.shape[0], t.shape[1]);
    assert_eq!(x.len(), cols);
    let s = 15 + PRE_SCALE_EXP as i32 - t.scale_exp as i32 - e_x as i32;
    let mut out = vec![0i32; rows];
    for r in 0..rows {
        let mut acc = 0i32;
        for c in 0..cols {
            let p = t.data[r * cols + c] as i32 * x[c] as i32;
            acc = acc
                .checked_add(shift_scaled(p, s)?)
                .ok_or(QuantError::Overflow)?;
        }
        out[r] = acc;
    }
    Ok(out)
}

/// Like `qmatvec_dense` but the input is already an i32 vector at the
/// accumulator scale (the low-rank intermediate).
fn qmatvec_dense_i32(t: &Q15Tensor, x: &[i32]) -> Result<Vec<i32>, QuantError> {
    let (rows, cols) = (t.shape[0], t.shape[1]);
    assert_eq!(x.len(), cols);
    let s = 15 - t.scale_exp as i32;
    let mut out = vec![0i32; rows];
    for r in 0..rows {
        let mut acc = 0i32;
        for c in 0..cols {
            let p = (t.data[r * cols + c] as i32)
                .checked_mul(x[c])
                .ok_or(QuantError::Overflow)?;
            acc = acc
                .checked_add(shift_scaled(p, s)?)
                .ok_or(QuantError::Overflow)?;
        }
        out[r] = acc;
    }
    Ok(out)
}

fn qmatvec(w: &QWeight, x: &[i16], e_x: u32) -> Result<Vec<i32>, QuantError> {
    match w {
        QWeight::Dense(t) => qmatvec_dense(t, x, e_x),
        QWeight::LowRank { left, right } => {
            let mid = qmatvec_dense(right, x, e_x)?;
            qmatvec_dense_i32(left, &mid)
        }
    }
}

/// Bias (its own scale) re-expressed in accumulator units.
fn bias_at_pre(b: &Q15Tensor) -> Result<Vec<i32>, QuantError> {
    let s = PRE_SCALE_EXP as i32 - b.scale_exp as i32;
    b.data
        .iter()
        .map(|v| shift_scaled(*v as i32, s))
        .collect()
}

/// One integer cell step. `qx` is the quantized input at scale `e_x`;
/// `qh` is the hidden state at scale H_SCALE_EXP. The output hidden state
/// saturates at the i16 range rather than erroring; accumulator overflow
/// (impossible under the scale plan for D̂ <= 64) is an error.
pub fn quant_cell_step(
    c: &QuantizedCell,
    qx: &[i16],
    e_x: u32,
    qh: &[i16],
) -> Result<Vec<i16>, QuantError> {
    let pre_w = qmatvec(&c.w, qx, e_x)?;
    let pre_u = qmatvec(&c.u, qh, H_SCALE_EXP)?;
    let bz = bias_at_pre(&c.b_z)?;
    let bh = bias_at_pre(&c.b_h)?;
    let zeta = c.zeta_q15 as i32;
    let nu = c.nu_q15 as i32;
    let mut h_next = vec![0i16; c.hidden_dim];
    for i in 0..c.hidden_dim {
        let shared = pre_w[i].checked_add(pre_u[i]).ok_or(QuantError::Overflow)?;
        // To scale 0 for the clamp nonlinearities.
        let z_pre = shift_scaled(
            shared.checked_add(bz[i]).ok_or(QuantError::Overflow)?,
            -(PRE_SCALE_EXP as i32),
        )?;
        let c_pre = shift_scaled(
            shared.checked_add(bh[i]).ok_or(QuantError::Overflow)?,
            -(PRE_SCALE_EXP as i32),
        )?;
        let z = quant_sigm(z_pre) as i32;
        let ct = quant_tanh(c_pre) as i32;
        // gate = zeta*(1-z) + nu, scale 0.
        let gate = shift_scaled(zeta * (Q15_ONE - z), 15)? + nu;
        // h = gate*c + z*h_prev at scale H_SCALE_EXP.
        let t1 = shift_scaled(shift_scaled(gate * ct, 15)?, H_SCALE_EXP as i32)?;
        let t2 = shift_scaled(z * qh[i] as i32, 15)?;
        h_next[i] = (t1 + t2).clamp(Q15_MIN, Q15_MAX) as i16;
    }
    Ok(h_next)
}

/// Integer readout logits at the accumulator scale.
fn quant_logits(r: &QuantizedReadout, qh: &[i16]) -> Result<Vec<i32>, QuantError> {
    let mut l = qmatvec_dense(&r.w, qh, H_SCALE_EXP)?;
    let b = bias_at_pre(&r.b)?;
    for (v, bi) in l.iter_mut().zip(b) {
        *v = v.checked_add(bi).ok_or(QuantError::Overflow)?;
    }
    Ok(l)
}

fn quantize_instance(inst: &Instance) -> Result<(Vec<i16>, u32, usize), QuantError> {
    let dim = inst[0].len();
    let flat: Vec<f64> = inst.iter().flatten().copied().collect();
    let t = quantize_q15(&flat, vec![inst.len(), dim])?;
    Ok((t.data, t.scale_exp, dim))
}

/// Integer hidden trajectory of the lower cell over one instance.
pub fn quant_lower_states(
    m: &QuantizedModel,
    inst: &Instance,
) -> Result<Vec<Vec<i16>>, QuantError> {
    let (qx, e_x, dim) = quantize_instance(inst)?;
    let mut h = vec![0i16; m.lower_cell.hidden_dim];
    let mut states = Vec::with_capacity(inst.len());
    for t in 0..inst.len() {
        h = quant_cell_step(&m.lower_cell, &qx[t * dim..(t + 1) * dim], e_x, &h)?;
        states.push(h.clone());
    }
    Ok(states)
}

fn quant_embed(m: &QuantizedModel, inst: &Instance) -> Result<Vec<i16>, QuantError> {
    Ok(quant_lower_states(m, inst)?.pop().unwrap())
}

/// Lower-tier instance test: logit(Source) - logit(Clutter) >= logit(p_hat),
/// all at the accumulator scale.
fn quant_instance_positive(m: &QuantizedModel, emb: &[i16]) -> Result<bool, QuantError> {
    let l = quant_logits(&m.lower_readout, emb)?;
    let thresh = shift_scaled(
        m.p_hat_logit.data[0] as i32,
        PRE_SCALE_EXP as i32 - m.p_hat_logit.scale_exp as i32,
    )?;
    Ok(l[1].checked_sub(l[0]).ok_or(QuantError::Overflow)? >= thresh)
}

/// Fully integer cascaded inference with the same early-exit rule, gating
/// and FLOP accounting as the float path.
pub fn quant_msc_infer(
    m: &QuantizedModel,
    instances: &[Instance],
) -> Result<InferenceTrace, QuantError> {
    if instances.is_empty() {
        return Err(QuantError::ArchMismatch("empty instance sequence".into()));
    }
    let omega = instances[0].len();
    let input_dim = instances[0][0].len();
    if input_dim != m.lower_cell.input_dim {
        return Err(QuantError::ArchMismatch(format!(
            "feature dim {} != model input dim {}",
            input_dim, m.lower_cell.input_dim
        )));
    }
    let lower_rank = match &m.lower_cell.w {
        QWeight::Dense(_) => None,
        QWeight::LowRank { right, .. } => Some(right.shape[0]),
    };
    let upper_rank = match &m.upper_cell.w {
        QWeight::Dense(_) => None,
        QWeight::LowRank { right, .. } => Some(right.shape[0]),
    };
    let f_cell = flops_cell_step(input_dim, m.lower_cell.hidden_dim, lower_rank);
    let f_embed = omega as u64 * f_cell;
    let f_instance = f_embed + flops_readout(2, m.lower_cell.hidden_dim);

    let n_inst = instances.len();
    let mut embeddings: Vec<Vec<i16>> = Vec::with_capacity(n_inst);
    let mut run = 0usize;
    let mut consumed = n_inst;
    let mut fired = false;
    for (idx, inst) in instances.iter().enumerate() {
        let emb = quant_embed(m, inst)?;
        let pos = quant_instance_positive(m, &emb)?;
        embeddings.push(emb);
        if pos {
            run += 1;
            if run >= m.k {
                consumed = idx + 1;
                fired = true;
                break;
            }
        } else {
            run = 0;
        }
    }
    let flops_lower = consumed as u64 * f_instance;
    if !fired {
        return Ok(InferenceTrace {
            decision: Decision::Clutter,
            lower_instances_consumed: consumed,
            upper_invoked: false,
            flops_lower,
            flops_upper: 0,
        });
    }
    for inst in &instances[consumed..] {
        embeddings.push(quant_embed(m, inst)?);
    }
    let mut h = vec![0i16; m.upper_cell.hidden_dim];
    for emb in &embeddings {
        h = quant_cell_step(&m.upper_cell, emb, H_SCALE_EXP, &h)?;
    }
    let logits = quant_logits(&m.upper_readout, &h)?;
    let mut best = 0usize;
    for (i, l) in logits.iter().enumerate() {
        if *l > logits[best] {
            best = i;
        }
    }
    let deferred = (n_inst - consumed) as u64;
    let flops_upper = deferred * f_embed
        + n_inst as u64 * flops_cell_step(m.lower_cell.hidden_dim, m.upper_cell.hidden_dim, upper_rank)
        + flops_readout(m.upper_readout.w.shape[0], m.upper_cell.hidden_dim);
    Ok(InferenceTrace {
        decision: Decision::Source(best),
        lower_instances_consumed: consumed,
        upper_invoked: true,
        flops_lower,
        flops_upper,
    })
}

/// Float-arithmetic cell step with the piecewise-linear nonlinearities and
/// the hidden-state saturation mirrored, used to isolate integer rounding
/// error from the tanh/sigmoid approximation error.
pub fn float_ref_cell_step(p: &FastGRNNParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let wx = p.w.matvec(x).unwrap();
    let uh = p.u.matvec(h).unwrap();
    let zeta = p.zeta();
    let nu = p.nu();
    let h_max = 4.0 * (Q15_MAX as f64) / 32768.0;
    (0..p.hidden_dim)
        .map(|i| {
            let shared = wx[i] + uh[i];
            let z = ((shared + p.b_z[i] + 1.0) / 2.0).clamp(0.0, 1.0);
            let c = (shared + p.b_h[i]).clamp(-1.0, 1.0);
            ((zeta * (1.0 - z) + nu) * c + z * h[i]).clamp(-4.0, h_max)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgreementReport {
    pub n_windows: usize,
    /// Final-decision agreement between float and integer cascades.
    pub label_agreement: f64,
    /// Clutter/source agreement of the lower tier alone.
    pub lower_decision_agreement: f64,
    /// Max per-step, per-coordinate deviation between the integer lower
    /// cell and the float reference on dequantized weights and inputs.
    pub max_hidden_deviation: f64,
}

pub fn agreement_report(
    float_m: &MSCModel,
    q_m: &QuantizedModel,
    data: &[crate::emi::InstanceSet],
) -> Result<AgreementReport, QuantError> {
    if data.is_empty() {
        return Err(QuantError::EmptyDataset);
    }
    if float_m.lower.cell.hidden_dim != q_m.lower_cell.hidden_dim
        || float_m.lower.cell.input_dim != q_m.lower_cell.input_dim
        || float_m.upper_cell.hidden_dim != q_m.upper_cell.hidden_dim
        || float_m.lower.k != q_m.k
    {
        return Err(QuantError::ArchMismatch(
            "float and quantized architectures differ".into(),
        ));
    }
    let ref_cell = dequantize_cell(&q_m.lower_cell);
    let mut labels_equal = 0usize;
    let mut lower_equal = 0usize;
    let mut max_dev = 0.0f64;
    for set in data {
        let ft = crate::cascade::msc_infer(float_m, &set.instances)?;
        let qt = quant_msc_infer(q_m, &set.instances)?;
        if ft.decision == qt.decision {
            labels_equal += 1;
        }
        if ft.upper_invoked == qt.upper_invoked {
            lower_equal += 1;
        }
        for inst in &set.instances {
            let q_states = quant_lower_states(q_m, inst)?;
            let (qx, e_x, dim) = quantize_instance(inst)?;
            let x_scale = (e_x as f64).exp2() / 32768.0;
            let mut h = vec![0.0; ref_cell.hidden_dim];
            for (t, qs) in q_states.iter().enumerate() {
                let x: Vec<f64> = qx[t * dim..(t + 1) * dim]
                    .iter()
                    .map(|v| *v as f64 * x_scale)
                    .collect();
                h = float_ref_cell_step(&ref_cell, &x, &h);
                for (a, b) in h.iter().zip(qs) {
                    let qv = *b as f64 * (H_SCALE_EXP as f64).exp2() / 32768.0;
                    max_dev = max_dev.max((a - qv).abs());
                }
            }
        }
    }
    Ok(AgreementReport {
        n_windows: data.len(),
        label_agreement: labels_equal as f64 / data.len() as f64,
        lower_decision_agreement: lower_equal as f64 / data.len() as f64,
        max_hidden_deviation: max_dev,
    })
}

/// Float model built from the quantized tensors; quantizing it again is a
/// fixed point.
pub fn dequantize_model(q: &QuantizedModel) -> MSCModel {
    let mk_readout = |r: &QuantizedReadout| crate::fastgrnn::Readout {
        w: Matrix {
            rows: r.w.shape[0],
            cols: r.w.shape[1],
            data: r.w.dequantize(),
        },
        b: r.b.dequantize(),
    };
    MSCModel {
        lower: crate::emi::EMIModel {
            cell: dequantize_cell(&q.lower_cell),
            readout: mk_readout(&q.lower_readout),
            k: q.k,
            p_hat: q.p_hat,
        },
        upper_cell: dequantize_cell(&q.upper_cell),
        upper_readout: mk_readout(&q.upper_readout),
    }
}
