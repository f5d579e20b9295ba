//! Multi-instance learning over sub-windows: instance extraction,
//! instance-level classification, MI-phase relabeling, EMI-phase per-step
//! loss, and early-exit inference. This is the lower tier of the cascade.
//!
//! A T x F window is split into overlapping omega x F instances at a fixed
//! stride. Source windows carry a coarse label; the MI phase alternates
//! between gradient steps restricted to the current best span of k
//! consecutive instances and re-labeling that span from the classifier's
//! own predictions. The EMI phase switches to a loss summed over every
//! time step, which is what makes confident early exits possible at
//! inference time.

use crate::fastgrnn::{
    backward, forward, init_params, softmax_ce_dlogits, FastGRNNParams, Readout, StepCache,
};
use crate::numerics::{cross_entropy, Matrix, NumericsError, Weight};
use crate::optim::{Optimizer, OptimizerKind};
use crate::radar::{Label, Split, WindowedDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmiError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("no source windows in training data")]
    NoSourceWindows,
    #[error("non-finite loss at round {round}, epoch {epoch} ({phase})")]
    NonFiniteLoss {
        round: usize,
        epoch: usize,
        phase: &'static str,
    },
}

/// One omega x F instance: a sequence of omega feature vectors.
pub type Instance = Vec<Vec<f64>>;

/// A window reshaped into overlapping fixed-width instances.
#[derive(Debug, Clone)]
pub struct InstanceSet {
    pub instances: Vec<Instance>,
    pub window_label: Label,
    pub origin: usize,
}

impl InstanceSet {
    pub fn num_instances(&self) -> usize {
        self.instances.len()
    }
}

/// Splits a T x F row-major block into (T-omega)/stride + 1 instances.
/// Windows whose length minus omega is not a stride multiple are rejected.
pub fn make_instances(
    window: &[f64],
    t_len: usize,
    num_features: usize,
    omega: usize,
    stride: usize,
) -> Result<Vec<Instance>, EmiError> {
    if window.len() != t_len * num_features {
        return Err(EmiError::InvalidArg(format!(
            "window has {} values, expected {}x{}",
            window.len(),
            t_len,
            num_features
        )));
    }
    if t_len < omega {
        return Err(EmiError::InvalidArg(format!(
            "window length {} shorter than instance width {}",
            t_len, omega
        )));
    }
    if stride == 0 {
        return Err(EmiError::InvalidArg("stride must be >= 1".into()));
    }
    if (t_len - omega) % stride != 0 {
        return Err(EmiError::InvalidArg(format!(
            "window length {} minus omega {} is not a multiple of stride {}",
            t_len, omega, stride
        )));
    }
    let n_inst = (t_len - omega) / stride + 1;
    let mut out = Vec::with_capacity(n_inst);
    for tau in 0..n_inst {
        let start = tau * stride;
        let mut inst = Vec::with_capacity(omega);
        for row in start..start + omega {
            inst.push(window[row * num_features..(row + 1) * num_features].to_vec());
        }
        out.push(inst);
    }
    Ok(out)
}

/// Reshape every window of a dataset into its instance set.
pub fn dataset_instances(ds: &WindowedDataset) -> Result<Vec<InstanceSet>, EmiError> {
    ds.windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let data: Vec<f64> = w.data.iter().map(|v| *v as f64).collect();
            Ok(InstanceSet {
                instances: make_instances(
                    &data,
                    ds.window_len,
                    crate::radar::NUM_FEATURES,
                    ds.omega,
                    ds.stride,
                )?,
                window_label: w.label,
                origin: i,
            })
        })
        .collect()
}

/// Instance sets for one split only; `origin` still indexes the full dataset.
pub fn split_instances(ds: &WindowedDataset, split: Split) -> Result<Vec<InstanceSet>, EmiError> {
    Ok(dataset_instances(ds)?
        .into_iter()
        .filter(|s| ds.windows[s.origin].split == split)
        .collect())
}

pub const CLASS_CLUTTER: usize = 0;
pub const CLASS_SOURCE: usize = 1;

/// Lower-tier model: binary clutter/source discriminator with early exit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EMIModel {
    pub cell: FastGRNNParams,
    pub readout: Readout,
    /// Consecutive positive instances required for a Source decision.
    pub k: usize,
    /// Probability threshold for an instance to count as positive.
    pub p_hat: f64,
}

impl EMIModel {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.cell.flatten();
        v.extend(self.readout.flatten());
        v
    }

    pub fn unflatten_from(&mut self, flat: &[f64]) {
        let n = self.cell.num_params();
        self.cell.unflatten_from(&flat[..n]);
        self.readout.unflatten_from(&flat[n..]);
    }
}

/// Runs the cell over one instance and returns (class probabilities, final
/// hidden state). The hidden state doubles as the instance embedding.
pub fn instance_predict(m: &EMIModel, instance: &Instance) -> Result<(Vec<f64>, Vec<f64>), EmiError> {
    let h0 = vec![0.0; m.cell.hidden_dim];
    let (states, _) = forward(&m.cell, instance, &h0)?;
    let h_last = states.last().unwrap().clone();
    let probs = m.readout.predict(&h_last)?;
    Ok((probs, h_last))
}

/// Start of the k-wide span with maximum prediction sum; ties broken toward
/// the smallest start index.
pub fn mi_relabel(source_probs: &[f64], k: usize) -> Result<usize, EmiError> {
    let n = source_probs.len();
    if k == 0 || k > n {
        return Err(EmiError::InvalidArg(format!(
            "k = {} out of range for {} instances",
            k, n
        )));
    }
    let mut sum: f64 = source_probs[..k].iter().sum();
    let mut best_sum = sum;
    let mut best_start = 0usize;
    for s in 1..=n - k {
        sum += source_probs[s + k - 1] - source_probs[s - 1];
        if sum > best_sum {
            best_sum = sum;
            best_start = s;
        }
    }
    Ok(best_start)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LowerDecision {
    Clutter,
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmiDecision {
    pub decision: LowerDecision,
    pub instances_consumed: usize,
    /// Index of the k-th consecutive positive instance, when one exists.
    pub positive_run_end: Option<usize>,
}

/// Pure early-exit scan over per-instance source probabilities.
pub fn scan_consecutive(source_probs: &[f64], p_hat: f64, k: usize) -> EmiDecision {
    let mut run = 0usize;
    for (idx, p) in source_probs.iter().enumerate() {
        if *p >= p_hat {
            run += 1;
            if run >= k {
                return EmiDecision {
                    decision: LowerDecision::Source,
                    instances_consumed: idx + 1,
                    positive_run_end: Some(idx),
                };
            }
        } else {
            run = 0;
        }
    }
    EmiDecision {
        decision: LowerDecision::Clutter,
        instances_consumed: source_probs.len(),
        positive_run_end: None,
    }
}

/// Early-exit inference: stops at the k-th consecutive positive instance.
pub fn emi_infer(m: &EMIModel, instances: &[Instance]) -> Result<EmiDecision, EmiError> {
    let mut run = 0usize;
    for (idx, inst) in instances.iter().enumerate() {
        let (probs, _) = instance_predict(m, inst)?;
        if probs[CLASS_SOURCE] >= m.p_hat {
            run += 1;
            if run >= m.k {
                return Ok(EmiDecision {
                    decision: LowerDecision::Source,
                    instances_consumed: idx + 1,
                    positive_run_end: Some(idx),
                });
            }
        } else {
            run = 0;
        }
    }
    Ok(EmiDecision {
        decision: LowerDecision::Clutter,
        instances_consumed: instances.len(),
        positive_run_end: None,
    })
}

/// Lower-tier training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmiConfig {
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub k: usize,
    pub p_hat: f64,
    pub omega: usize,
    pub stride: usize,
    pub hidden_dim: usize,
    pub rank: Option<usize>,
    pub optimizer: OptimizerKind,
}

impl Default for EmiConfig {
    fn default() -> Self {
        EmiConfig {
            rounds: 6,
            epochs_per_round: 8,
            lr: 0.01,
            batch_size: 64,
            k: 10,
            p_hat: 0.5,
            omega: 48,
            stride: 16,
            hidden_dim: 16,
            rank: None,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Accumulator for gradients of the lower tier (cell + readout).
pub(crate) struct LowerGrads {
    pub cell: FastGRNNParams,
    pub ro_w: Matrix,
    pub ro_b: Vec<f64>,
}

impl LowerGrads {
    pub fn zeros(m: &EMIModel) -> Self {
        LowerGrads {
            cell: m.cell.zeros_like(),
            ro_w: Matrix::zeros(m.readout.w.rows, m.readout.w.cols),
            ro_b: vec![0.0; m.readout.b.len()],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.cell.flatten();
        v.extend_from_slice(&self.ro_w.data);
        v.extend_from_slice(&self.ro_b);
        v
    }

    pub fn add_cell(&mut self, g: &FastGRNNParams) {
        add_weight(&mut self.cell.w, &g.w);
        add_weight(&mut self.cell.u, &g.u);
        for (a, b) in self.cell.b_h.iter_mut().zip(&g.b_h) {
            *a += b;
        }
        for (a, b) in self.cell.b_z.iter_mut().zip(&g.b_z) {
            *a += b;
        }
        self.cell.zeta_raw += g.zeta_raw;
        self.cell.nu_raw += g.nu_raw;
    }
}

fn add_weight(dst: &mut Weight, src: &Weight) {
    match (dst, src) {
        (Weight::Dense(a), Weight::Dense(b)) => {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        (Weight::LowRank(a), Weight::LowRank(b)) => {
            for (x, y) in a.left.data.iter_mut().zip(&b.left.data) {
                *x += y;
            }
            for (x, y) in a.right.data.iter_mut().zip(&b.right.data) {
                *x += y;
            }
        }
        _ => unreachable!("weight structure mismatch"),
    }
}

/// Which loss the lower tier optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LowerLossMode {
    /// Cross-entropy at the final time step of an instance.
    FinalStep,
    /// Cross-entropy summed over every time step of an instance.
    EveryStep,
}

/// Forward + backward for one instance. Accumulates parameter gradients into
/// `grads` and returns the loss contribution. `extra_dh_final`, when present,
/// is an additional gradient flowing into the final hidden state (used by the
/// joint cascade loss through the embedding); `loss_weight` scales the lower
/// classification loss (0 disables it while still propagating the extra
/// gradient).
pub(crate) fn instance_backward(
    m: &EMIModel,
    instance: &Instance,
    label: usize,
    mode: LowerLossMode,
    loss_weight: f64,
    extra_dh_final: Option<&[f64]>,
    grads: &mut LowerGrads,
) -> Result<f64, EmiError> {
    let h0 = vec![0.0; m.cell.hidden_dim];
    let (states, caches) = forward(&m.cell, instance, &h0)?;
    instance_backward_from(m, instance, &states, &caches, label, mode, loss_weight, extra_dh_final, grads)
}

/// Same as `instance_backward` but reusing an existing forward pass.
#[allow(clippy::too_many_arguments)]
pub(crate) fn instance_backward_from(
    m: &EMIModel,
    instance: &Instance,
    states: &[Vec<f64>],
    caches: &[StepCache],
    label: usize,
    mode: LowerLossMode,
    loss_weight: f64,
    extra_dh_final: Option<&[f64]>,
    grads: &mut LowerGrads,
) -> Result<f64, EmiError> {
    let t_len = instance.len();
    let mut state_grads = vec![vec![0.0; m.cell.hidden_dim]; t_len];
    let mut loss = 0.0;
    if loss_weight != 0.0 {
        let steps: Box<dyn Iterator<Item = usize>> = match mode {
            LowerLossMode::FinalStep => Box::new(std::iter::once(t_len - 1)),
            LowerLossMode::EveryStep => Box::new(0..t_len),
        };
        for t in steps {
            let logits = m.readout.logits(&states[t])?;
            let probs = crate::numerics::softmax(&logits);
            loss += loss_weight * cross_entropy(&probs, label);
            let mut dlogits = softmax_ce_dlogits(&logits, label);
            for d in &mut dlogits {
                *d *= loss_weight;
            }
            let dh = m
                .readout
                .backward(&states[t], &dlogits, &mut grads.ro_w, &mut grads.ro_b)?;
            for (a, b) in state_grads[t].iter_mut().zip(&dh) {
                *a += b;
            }
        }
    }
    if let Some(extra) = extra_dh_final {
        for (a, b) in state_grads[t_len - 1].iter_mut().zip(extra) {
            *a += b;
        }
    }
    let r = backward(&m.cell, instance, caches, &state_grads)?;
    grads.add_cell(&r.grads);
    Ok(loss)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub phase: String,
    pub epoch_losses: Vec<f64>,
}

/// Relative-improvement early stop: true once the best loss has not improved
/// by more than `rel_tol` (relatively) for `patience` consecutive epochs.
pub(crate) struct EarlyStop {
    best: f64,
    stale: usize,
    rel_tol: f64,
    patience: usize,
}

impl EarlyStop {
    pub fn new(rel_tol: f64, patience: usize) -> Self {
        EarlyStop {
            best: f64::INFINITY,
            stale: 0,
            rel_tol,
            patience,
        }
    }

    pub fn update(&mut self, loss: f64) -> bool {
        if loss < self.best * (1.0 - self.rel_tol) || self.best.is_infinite() {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

pub(crate) const EARLY_STOP_REL_TOL: f64 = 1e-4;
pub(crate) const EARLY_STOP_PATIENCE: usize = 3;

struct TrainItem {
    window: usize,
    instance: usize,
    label: usize,
}

/// Builds the per-instance training items for the current spans: every
/// instance of a clutter window, and the instances inside the current span
/// for source windows.
fn build_items(data: &[InstanceSet], spans: &[Option<usize>], k: usize) -> Vec<TrainItem> {
    let mut items = Vec::new();
    for (w, set) in data.iter().enumerate() {
        match spans[w] {
            None => {
                for i in 0..set.num_instances() {
                    items.push(TrainItem {
                        window: w,
                        instance: i,
                        label: CLASS_CLUTTER,
                    });
                }
            }
            Some(s) => {
                for i in s..s + k {
                    items.push(TrainItem {
                        window: w,
                        instance: i,
                        label: CLASS_SOURCE,
                    });
                }
            }
        }
    }
    items
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Recomputes the best span per source window from current model predictions.
pub(crate) fn relabel_spans(
    m: &EMIModel,
    data: &[InstanceSet],
    spans: &mut [Option<usize>],
) -> Result<(), EmiError> {
    for (w, set) in data.iter().enumerate() {
        if spans[w].is_some() {
            let probs: Vec<f64> = set
                .instances
                .iter()
                .map(|inst| instance_predict(m, inst).map(|(p, _)| p[CLASS_SOURCE]))
                .collect::<Result<_, _>>()?;
            spans[w] = Some(mi_relabel(&probs, m.k)?);
        }
    }
    Ok(())
}

/// Centered width-k span, the round-0 initialization.
pub(crate) fn initial_spans(data: &[InstanceSet], k: usize) -> Vec<Option<usize>> {
    data.iter()
        .map(|set| {
            if set.window_label.is_clutter() {
                None
            } else {
                Some((set.num_instances() - k) / 2)
            }
        })
        .collect()
}

pub fn train_emi(
    data: &[InstanceSet],
    cfg: &EmiConfig,
    seed: u64,
) -> Result<(EMIModel, Vec<RoundRecord>), EmiError> {
    let n_source = data.iter().filter(|s| !s.window_label.is_clutter()).count();
    if n_source == 0 {
        return Err(EmiError::NoSourceWindows);
    }
    for set in data {
        if !set.window_label.is_clutter() && set.num_instances() < cfg.k {
            return Err(EmiError::InvalidArg(format!(
                "window {} has {} instances, fewer than k = {}",
                set.origin,
                set.num_instances(),
                cfg.k
            )));
        }
    }
    let num_features = data[0].instances[0][0].len();
    let cell = init_params(num_features, cfg.hidden_dim, cfg.rank, seed)?;
    let readout = Readout::init(2, cfg.hidden_dim, seed.wrapping_add(1));
    let mut model = EMIModel {
        cell,
        readout,
        k: cfg.k,
        p_hat: cfg.p_hat,
    };
    let history = train_emi_continue(&mut model, data, cfg, seed, 0)?;
    Ok((model, history))
}

/// Runs the MI/EMI round schedule on an existing model (used both by
/// `train_emi` and by the cascade's phase 1). `round_offset` shifts the seed
/// stream so repeated invocations do not reuse shuffles.
pub fn train_emi_continue(
    model: &mut EMIModel,
    data: &[InstanceSet],
    cfg: &EmiConfig,
    seed: u64,
    round_offset: usize,
) -> Result<Vec<RoundRecord>, EmiError> {
    let mut spans = initial_spans(data, cfg.k);
    let mut history = Vec::new();
    let mut flat = model.flatten();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, flat.len());
    for round in 0..cfg.rounds {
        let mi_phase = (round as f64) < cfg.rounds as f64 / 2.0;
        let phase_name = if mi_phase { "mi" } else { "emi" };
        let mode = if mi_phase {
            LowerLossMode::FinalStep
        } else {
            LowerLossMode::EveryStep
        };
        if mi_phase && round > 0 {
            relabel_spans(model, data, &mut spans)?;
        }
        let mut items = build_items(data, &spans, cfg.k);
        let mut epoch_losses = Vec::new();
        let mut stop = EarlyStop::new(EARLY_STOP_REL_TOL, EARLY_STOP_PATIENCE);
        for epoch in 0..cfg.epochs_per_round {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ 0x5EED_0000_0000_0000
                    ^ ((round + round_offset) as u64) << 24
                    ^ (epoch as u64),
            );
            shuffle(&mut items, &mut rng);
            let mut epoch_loss = 0.0;
            for batch in items.chunks(cfg.batch_size.max(1)) {
                let mut grads = LowerGrads::zeros(model);
                let mut batch_loss = 0.0;
                for item in batch {
                    batch_loss += instance_backward(
                        model,
                        &data[item.window].instances[item.instance],
                        item.label,
                        mode,
                        1.0,
                        None,
                        &mut grads,
                    )?;
                }
                let scale = 1.0 / batch.len() as f64;
                let mut g = grads.flatten();
                for v in &mut g {
                    *v *= scale;
                }
                opt.step(&mut flat, &g);
                model.unflatten_from(&flat);
                epoch_loss += batch_loss;
            }
            let epoch_loss = epoch_loss / items.len().max(1) as f64;
            if !epoch_loss.is_finite() {
                return Err(EmiError::NonFiniteLoss {
                    round,
                    epoch,
                    phase: if mi_phase { "mi" } else { "emi" },
                });
            }
            epoch_losses.push(epoch_loss);
            if stop.update(epoch_loss) {
                break;
            }
        }
        history.push(RoundRecord {
            round,
            phase: phase_name.to_string(),
            epoch_losses,
        });
    }
    Ok(history)
}

/// Final hidden state per instance, with no readout applied.
pub fn embed_instances(m: &EMIModel, instances: &[Instance]) -> Result<Vec<Vec<f64>>, EmiError> {
    instances
        .iter()
        .map(|inst| {
            let h0 = vec![0.0; m.cell.hidden_dim];
            let (states, _) = forward(&m.cell, inst, &h0)?;
            Ok(states.last().unwrap().clone())
        })
        .collect()
}
