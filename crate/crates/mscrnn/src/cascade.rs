//! The cascade itself: a window-level source-type classifier running on the
//! instance embeddings of the lower tier, a clutter-masked conditional loss,
//! three-phase joint training, and gated inference.
//!
//! Training schedule:
//!   phase 1 — lower tier alone on binarized (clutter/source) labels;
//!   phase 2 — upper tier on frozen lower-tier embeddings;
//!   phase 3 — n_r joint rounds minimizing L_lower + conditional upper loss
//!             (unit weights), MI-style final-step lower loss with span
//!             relabeling for the first half of the rounds, per-step loss
//!             with frozen spans after.
//!
//! At inference the upper tier runs only when the lower tier's early-exit
//! scan fires; embeddings the scan skipped are computed on demand and
//! charged to the upper invocation in the FLOP trace.

use crate::cost::{flops_cell_step, flops_readout, CascadeDims};
use crate::emi::{
    embed_instances, emi_infer, initial_spans, instance_backward, instance_backward_from,
    relabel_spans, train_emi, EarlyStop, EmiConfig, EmiError, EMIModel, Instance, InstanceSet,
    LowerDecision, LowerGrads, LowerLossMode, RoundRecord, CLASS_SOURCE, EARLY_STOP_PATIENCE,
    EARLY_STOP_REL_TOL,
};
use crate::fastgrnn::{
    backward, clamp_backward, clamp_forward, forward, init_params, softmax_ce_dlogits,
    FastGRNNParams, Readout,
};
use crate::numerics::{cross_entropy, softmax, NumericsError};
use crate::optim::Optimizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Lower(#[from] EmiError),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("no source windows in training data")]
    NoSourceWindows,
    #[error("non-finite loss in phase {phase} at epoch {epoch}")]
    NonFiniteLoss { phase: &'static str, epoch: usize },
}

/// The deployable cascade: binary early-exit lower tier plus a source-type
/// upper tier whose input is the lower tier's hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MSCModel {
    pub lower: EMIModel,
    pub upper_cell: FastGRNNParams,
    pub upper_readout: Readout,
}

impl MSCModel {
    pub fn validate(&self) -> Result<(), CascadeError> {
        if self.upper_cell.input_dim != self.lower.cell.hidden_dim {
            return Err(CascadeError::InvalidArg(format!(
                "upper input dim {} != lower hidden dim {}",
                self.upper_cell.input_dim, self.lower.cell.hidden_dim
            )));
        }
        if self.upper_readout.w.rows < 2 {
            return Err(CascadeError::InvalidArg(
                "upper tier needs at least 2 source classes".into(),
            ));
        }
        if self.lower.readout.w.rows != 2 {
            return Err(CascadeError::InvalidArg(
                "lower tier must be binary".into(),
            ));
        }
        Ok(())
    }

    pub fn num_source_classes(&self) -> usize {
        self.upper_readout.w.rows
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.lower.flatten();
        v.extend(self.upper_cell.flatten());
        v.extend(self.upper_readout.flatten());
        v
    }

    pub fn unflatten_from(&mut self, flat: &[f64]) {
        let nl = self.lower.flatten().len();
        let nc = self.upper_cell.num_params();
        self.lower.unflatten_from(&flat[..nl]);
        self.upper_cell.unflatten_from(&flat[nl..nl + nc]);
        self.upper_readout.unflatten_from(&flat[nl + nc..]);
    }

    /// Shape summary for cost accounting. `instances_per_window` and
    /// `window_len` come from the data layout, not the weights.
    pub fn dims(&self, window_len: usize, omega: usize, instances_per_window: usize) -> CascadeDims {
        CascadeDims {
            input_dim: self.lower.cell.input_dim,
            lower_hidden: self.lower.cell.hidden_dim,
            lower_rank: self.lower.cell.w.low_rank(),
            upper_hidden: self.upper_cell.hidden_dim,
            upper_rank: self.upper_cell.w.low_rank(),
            num_source_classes: self.num_source_classes(),
            omega,
            window_len,
            instances_per_window,
        }
    }
}

/// Final decision of the cascade on one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Clutter,
    /// Index into the upper tier's source classes.
    Source(usize),
}

impl Decision {
    pub fn is_clutter(&self) -> bool {
        matches!(self, Decision::Clutter)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub decision: Decision,
    pub lower_instances_consumed: usize,
    pub upper_invoked: bool,
    pub flops_lower: u64,
    pub flops_upper: u64,
}

/// Runs the upper cell over an embedding sequence; softmax readout of the
/// final hidden state.
pub fn upper_predict(m: &MSCModel, embeddings: &[Vec<f64>]) -> Result<Vec<f64>, CascadeError> {
    if embeddings.is_empty() {
        return Err(CascadeError::InvalidArg("empty embedding sequence".into()));
    }
    let h0 = vec![0.0; m.upper_cell.hidden_dim];
    let (states, _) = forward(&m.upper_cell, embeddings, &h0)?;
    Ok(m.upper_readout.predict(states.last().unwrap())?)
}

/// Mean upper-tier cross-entropy over the non-clutter windows of a batch;
/// exactly zero when the batch is all clutter.
pub fn conditional_upper_loss(m: &MSCModel, batch: &[InstanceSet]) -> Result<f64, CascadeError> {
    if batch.is_empty() {
        return Err(CascadeError::InvalidArg("empty batch".into()));
    }
    let mut total = 0.0;
    let mut n_source = 0usize;
    for set in batch {
        if let Some(class) = set.window_label.source_class() {
            let emb = embed_instances(&m.lower, &set.instances)?;
            let probs = upper_predict(m, &emb)?;
            total += cross_entropy(&probs, class);
            n_source += 1;
        }
    }
    if n_source == 0 {
        Ok(0.0)
    } else {
        Ok(total / n_source as f64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MscConfig {
    /// Lower-tier architecture and phase-1 schedule.
    pub lower: EmiConfig,
    pub upper_hidden_dim: usize,
    pub upper_rank: Option<usize>,
    pub num_source_classes: usize,
    pub upper_epochs: usize,
    pub upper_lr: f64,
    /// n_r: number of joint rounds in phase 3.
    pub joint_rounds: usize,
    pub joint_epochs_per_round: usize,
    pub joint_lr: f64,
    pub joint_batch_size: usize,
    /// Epochs of the post-training robustness pass that fits both tiers under
    /// the piecewise-linear inference nonlinearities as well as the exact
    /// ones, so float and quantized inference make the same decisions.
    /// 0 disables the pass.
    pub quant_finetune_epochs: usize,
    pub quant_finetune_lr: f64,
}

impl Default for MscConfig {
    fn default() -> Self {
        MscConfig {
            lower: EmiConfig::default(),
            upper_hidden_dim: 16,
            upper_rank: None,
            num_source_classes: 2,
            upper_epochs: 40,
            upper_lr: 0.01,
            joint_rounds: 4,
            joint_epochs_per_round: 5,
            joint_lr: 0.003,
            joint_batch_size: 16,
            quant_finetune_epochs: 80,
            quant_finetune_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MscHistory {
    pub phase1: Vec<RoundRecord>,
    pub phase2_epoch_losses: Vec<f64>,
    pub phase3: Vec<RoundRecord>,
    #[serde(default)]
    pub finetune_lower_epoch_losses: Vec<f64>,
    #[serde(default)]
    pub finetune_upper_epoch_losses: Vec<f64>,
}

struct UpperGrads {
    cell: FastGRNNParams,
    ro_w: crate::numerics::Matrix,
    ro_b: Vec<f64>,
}

impl UpperGrads {
    fn zeros(m: &MSCModel) -> Self {
        UpperGrads {
            cell: m.upper_cell.zeros_like(),
            ro_w: crate::numerics::Matrix::zeros(m.upper_readout.w.rows, m.upper_readout.w.cols),
            ro_b: vec![0.0; m.upper_readout.b.len()],
        }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = self.cell.flatten();
        v.extend_from_slice(&self.ro_w.data);
        v.extend_from_slice(&self.ro_b);
        v
    }
}

/// Upper-tier forward + backward on one embedding sequence. Returns the
/// weighted loss and the gradient with respect to each embedding.
fn upper_backward(
    m: &MSCModel,
    embeddings: &[Vec<f64>],
    class: usize,
    weight: f64,
    grads: &mut UpperGrads,
) -> Result<(f64, Vec<Vec<f64>>), CascadeError> {
    let h0 = vec![0.0; m.upper_cell.hidden_dim];
    let (states, caches) = forward(&m.upper_cell, embeddings, &h0)?;
    let h_last = states.last().unwrap();
    let logits = m.upper_readout.logits(h_last)?;
    let probs = softmax(&logits);
    let loss = weight * cross_entropy(&probs, class);
    let mut dlogits = softmax_ce_dlogits(&logits, class);
    for d in &mut dlogits {
        *d *= weight;
    }
    let dh_last = m
        .upper_readout
        .backward(h_last, &dlogits, &mut grads.ro_w, &mut grads.ro_b)?;
    let mut state_grads = vec![vec![0.0; m.upper_cell.hidden_dim]; embeddings.len()];
    *state_grads.last_mut().unwrap() = dh_last;
    let r = backward(&m.upper_cell, embeddings, &caches, &state_grads)?;
    // Accumulate upper-cell gradients.
    let mut acc = LowerGrads {
        cell: std::mem::replace(&mut grads.cell, m.upper_cell.zeros_like()),
        ro_w: crate::numerics::Matrix::zeros(1, 1),
        ro_b: vec![],
    };
    acc.add_cell(&r.grads);
    grads.cell = acc.cell;
    Ok((loss, r.dxs))
}

/// Loss and full-model gradient of L_lower + conditional upper loss over the
/// windows `idxs` of `data`. The lower loss is the batch-mean per-instance
/// cross-entropy over kept instances (every instance of clutter windows, the
/// current span of source windows); the upper loss is the mean over source
/// windows in the batch. Gradients from the upper loss reach the lower tier
/// through the embeddings.
pub fn joint_batch_grad(
    m: &MSCModel,
    data: &[InstanceSet],
    spans: &[Option<usize>],
    idxs: &[usize],
    mode: LowerLossMode,
) -> Result<(f64, Vec<f64>), CascadeError> {
    let k = m.lower.k;
    let mut n_items = 0usize;
    let mut n_source = 0usize;
    for &w in idxs {
        match spans[w] {
            None => n_items += data[w].num_instances(),
            Some(_) => {
                n_items += k;
                n_source += 1;
            }
        }
    }
    let lower_scale = 1.0 / n_items.max(1) as f64;
    let upper_scale = 1.0 / n_source.max(1) as f64;
    let mut lg = LowerGrads::zeros(&m.lower);
    let mut ug = UpperGrads::zeros(m);
    let mut loss = 0.0;
    for &w in idxs {
        let set = &data[w];
        let n_inst = set.num_instances();
        // One forward pass per instance, reused by both tiers.
        let h0 = vec![0.0; m.lower.cell.hidden_dim];
        let mut fw = Vec::with_capacity(n_inst);
        for inst in &set.instances {
            fw.push(forward(&m.lower.cell, inst, &h0)?);
        }
        // Upper loss and its gradient on the embeddings.
        let mut demb: Option<Vec<Vec<f64>>> = None;
        if let Some(class) = set.window_label.source_class() {
            let embeddings: Vec<Vec<f64>> = fw
                .iter()
                .map(|(states, _)| states.last().unwrap().clone())
                .collect();
            let (l, d) = upper_backward(m, &embeddings, class, upper_scale, &mut ug)?;
            loss += l;
            demb = Some(d);
        }
        // Lower loss per instance plus the embedding gradient flowing back.
        for tau in 0..n_inst {
            let (kept, label) = match spans[w] {
                None => (true, 0),
                Some(s) => ((s..s + k).contains(&tau), CLASS_SOURCE),
            };
            let weight = if kept { lower_scale } else { 0.0 };
            let extra = demb.as_ref().map(|d| d[tau].as_slice());
            if weight == 0.0 && extra.is_none() {
                continue;
            }
            let (states, caches) = &fw[tau];
            loss += instance_backward_from(
                &m.lower,
                &set.instances[tau],
                states,
                caches,
                label,
                mode,
                weight,
                extra,
                &mut lg,
            )?;
        }
    }
    let mut grad = lg.flatten();
    grad.extend(ug.flatten());
    Ok((loss, grad))
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    v
}

/// Three-phase training. Labels: clutter windows train the lower tier only;
/// source windows train both tiers (binarized for the lower, source class
/// for the upper).
pub fn train_msc(
    data: &[InstanceSet],
    cfg: &MscConfig,
    seed: u64,
) -> Result<(MSCModel, MscHistory), CascadeError> {
    if data.iter().all(|s| s.window_label.is_clutter()) {
        return Err(CascadeError::NoSourceWindows);
    }
    let mut history = MscHistory::default();

    // Phase 1: lower tier alone, upper frozen (not yet created).
    let (lower, phase1) = train_emi(data, &cfg.lower, seed)?;
    history.phase1 = phase1;
    let mut model = MSCModel {
        lower,
        upper_cell: init_params(
            cfg.lower.hidden_dim,
            cfg.upper_hidden_dim,
            cfg.upper_rank,
            seed.wrapping_add(0x0FF5E7),
        )?,
        upper_readout: Readout::init(
            cfg.num_source_classes,
            cfg.upper_hidden_dim,
            seed.wrapping_add(0x0FF5E8),
        ),
    };
    model.validate()?;

    // Phase 2: upper tier on frozen embeddings.
    if cfg.joint_rounds > 0 || cfg.upper_epochs > 0 {
        history.phase2_epoch_losses = train_upper_frozen(&mut model, data, cfg, seed)?;
    }

    // Phase 3: joint rounds.
    let mut spans = initial_spans(data, model.lower.k);
    let mut flat = model.flatten();
    let mut opt = Optimizer::new(cfg.lower.optimizer, cfg.joint_lr, flat.len());
    for round in 0..cfg.joint_rounds {
        let mi_phase = (round as f64) < cfg.joint_rounds as f64 / 2.0;
        let mode = if mi_phase {
            LowerLossMode::FinalStep
        } else {
            LowerLossMode::EveryStep
        };
        if mi_phase {
            relabel_spans(&model.lower, data, &mut spans)?;
        }
        let mut epoch_losses = Vec::new();
        let mut stop = EarlyStop::new(EARLY_STOP_REL_TOL, EARLY_STOP_PATIENCE);
        for epoch in 0..cfg.joint_epochs_per_round {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ 0x301A_7000_0000_0000 ^ ((round as u64) << 24) ^ epoch as u64,
            );
            let order = shuffled_indices(data.len(), &mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.joint_batch_size.max(1)) {
                let (l, g) = joint_batch_grad(&model, data, &spans, chunk, mode)?;
                opt.step(&mut flat, &g);
                model.unflatten_from(&flat);
                epoch_loss += l;
                batches += 1;
            }
            let epoch_loss = epoch_loss / batches.max(1) as f64;
            if !epoch_loss.is_finite() {
                return Err(CascadeError::NonFiniteLoss {
                    phase: "joint",
                    epoch,
                });
            }
            epoch_losses.push(epoch_loss);
            if stop.update(epoch_loss) {
                break;
            }
        }
        history.phase3.push(RoundRecord {
            round,
            phase: if mi_phase { "joint-mi" } else { "joint-emi" }.to_string(),
            epoch_losses,
        });
    }

    // Robustness pass: align decisions under the piecewise-linear inference
    // nonlinearities with the float path.
    if cfg.quant_finetune_epochs > 0 {
        let (lower_losses, upper_losses) = quant_finetune(&mut model, data, cfg, seed)?;
        history.finetune_lower_epoch_losses = lower_losses;
        history.finetune_upper_epoch_losses = upper_losses;
    }
    Ok((model, history))
}

/// Phase 2: trains upper cell + readout on embeddings from the frozen lower
/// tier. Embeddings are computed once up front.
fn train_upper_frozen(
    model: &mut MSCModel,
    data: &[InstanceSet],
    cfg: &MscConfig,
    seed: u64,
) -> Result<Vec<f64>, CascadeError> {
    let sources: Vec<(Vec<Vec<f64>>, usize)> = data
        .iter()
        .filter_map(|set| {
            set.window_label
                .source_class()
                .map(|c| embed_instances(&model.lower, &set.instances).map(|e| (e, c)))
        })
        .collect::<Result<_, _>>()?;
    if sources.is_empty() {
        return Err(CascadeError::NoSourceWindows);
    }
    let mut flat = model.upper_cell.flatten();
    flat.extend(model.upper_readout.flatten());
    let nc = model.upper_cell.num_params();
    let mut opt = Optimizer::new(cfg.lower.optimizer, cfg.upper_lr, flat.len());
    let mut losses = Vec::new();
    let mut stop = EarlyStop::new(EARLY_STOP_REL_TOL, EARLY_STOP_PATIENCE);
    for epoch in 0..cfg.upper_epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ 0x0BB5_0000_0000_0000 ^ epoch as u64);
        let order = shuffled_indices(sources.len(), &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.joint_batch_size.max(1)) {
            let mut ug = UpperGrads::zeros(model);
            let w = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (emb, class) = &sources[i];
                let (l, _) = upper_backward(model, emb, *class, w, &mut ug)?;
                batch_loss += l;
            }
            opt.step(&mut flat, &ug.flatten());
            model.upper_cell.unflatten_from(&flat[..nc]);
            model.upper_readout.unflatten_from(&flat[nc..]);
            epoch_loss += batch_loss * chunk.len() as f64;
        }
        let epoch_loss = epoch_loss / sources.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(CascadeError::NonFiniteLoss {
                phase: "upper",
                epoch,
            });
        }
        losses.push(epoch_loss);
        if stop.update(epoch_loss) {
            break;
        }
    }
    Ok(losses)
}

/// Final hidden state per instance under the piecewise-linear nonlinearities.
fn clamp_embed_instances(
    m: &EMIModel,
    instances: &[Instance],
) -> Result<Vec<Vec<f64>>, CascadeError> {
    instances
        .iter()
        .map(|inst| {
            let h0 = vec![0.0; m.cell.hidden_dim];
            let (states, _) = clamp_forward(&m.cell, inst, &h0)?;
            Ok(states.last().unwrap().clone())
        })
        .collect()
}

/// Cross-entropy backward through the lower tier with the piecewise-linear
/// nonlinearities; the loss is applied per `mode`, mirroring
/// `instance_backward`.
fn lower_clamp_backward(
    m: &EMIModel,
    instance: &Instance,
    label: usize,
    mode: LowerLossMode,
    weight: f64,
    grads: &mut LowerGrads,
) -> Result<f64, CascadeError> {
    let h0 = vec![0.0; m.cell.hidden_dim];
    let (states, caches) = clamp_forward(&m.cell, instance, &h0)?;
    let t_len = instance.len();
    let mut state_grads = vec![vec![0.0; m.cell.hidden_dim]; t_len];
    let mut loss = 0.0;
    let steps: Box<dyn Iterator<Item = usize>> = match mode {
        LowerLossMode::FinalStep => Box::new(std::iter::once(t_len - 1)),
        LowerLossMode::EveryStep => Box::new(0..t_len),
    };
    for t in steps {
        let logits = m.readout.logits(&states[t])?;
        let probs = softmax(&logits);
        loss += weight * cross_entropy(&probs, label);
        let mut dlogits = softmax_ce_dlogits(&logits, label);
        for d in &mut dlogits {
            *d *= weight;
        }
        let dh = m
            .readout
            .backward(&states[t], &dlogits, &mut grads.ro_w, &mut grads.ro_b)?;
        for (a, b) in state_grads[t].iter_mut().zip(&dh) {
            *a += b;
        }
    }
    let r = clamp_backward(&m.cell, instance, &caches, &state_grads)?;
    grads.add_cell(&r.grads);
    Ok(loss)
}

/// `upper_backward` with the piecewise-linear nonlinearities.
fn upper_clamp_backward(
    m: &MSCModel,
    embeddings: &[Vec<f64>],
    class: usize,
    weight: f64,
    grads: &mut UpperGrads,
) -> Result<f64, CascadeError> {
    let h0 = vec![0.0; m.upper_cell.hidden_dim];
    let (states, caches) = clamp_forward(&m.upper_cell, embeddings, &h0)?;
    let h_last = states.last().unwrap();
    let logits = m.upper_readout.logits(h_last)?;
    let probs = softmax(&logits);
    let loss = weight * cross_entropy(&probs, class);
    let mut dlogits = softmax_ce_dlogits(&logits, class);
    for d in &mut dlogits {
        *d *= weight;
    }
    let dh_last = m
        .upper_readout
        .backward(h_last, &dlogits, &mut grads.ro_w, &mut grads.ro_b)?;
    let mut state_grads = vec![vec![0.0; m.upper_cell.hidden_dim]; embeddings.len()];
    *state_grads.last_mut().unwrap() = dh_last;
    let r = clamp_backward(&m.upper_cell, embeddings, &caches, &state_grads)?;
    let mut acc = LowerGrads {
        cell: std::mem::replace(&mut grads.cell, m.upper_cell.zeros_like()),
        ro_w: crate::numerics::Matrix::zeros(1, 1),
        ro_b: vec![],
    };
    acc.add_cell(&r.grads);
    grads.cell = acc.cell;
    Ok(loss)
}

/// Post-training robustness pass. Each gradient step sums the same example's
/// loss under the exact nonlinearities and under the piecewise-linear ones
/// the integer engine uses, so both inference paths converge to the same
/// decisions. Stage one fits the lower tier, anchored to its own pre-pass
/// instance predictions (so float behavior is preserved while the clamped
/// branch is pulled to match); stage two refits the upper tier on both
/// embedding variants against the true source labels.
fn quant_finetune(
    model: &mut MSCModel,
    data: &[InstanceSet],
    cfg: &MscConfig,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>), CascadeError> {
    // The two-branch loss plateaus and dips repeatedly while the clamped
    // branch catches up with the exact one, so this pass waits longer than
    // the main phases before stopping.
    const FINETUNE_PATIENCE: usize = 15;
    // Stage one: lower tier. Distillation targets from the current model.
    // A single source instance flipped by the nonlinearity substitution can
    // break the k-consecutive scan and lose the whole window, while a clutter
    // false positive is harmless unless k of them line up, so source
    // instances carry extra loss weight.
    const SOURCE_ITEM_WEIGHT: f64 = 8.0;
    let mut items: Vec<(usize, usize, usize, f64)> = Vec::new();
    for (wi, set) in data.iter().enumerate() {
        let emb = embed_instances(&model.lower, &set.instances)?;
        for (ii, h) in emb.iter().enumerate() {
            let logits = model.lower.readout.logits(h)?;
            let label = if logits[CLASS_SOURCE] > logits[1 - CLASS_SOURCE] {
                CLASS_SOURCE
            } else {
                1 - CLASS_SOURCE
            };
            let item_w = if label == CLASS_SOURCE {
                SOURCE_ITEM_WEIGHT
            } else {
                1.0
            };
            items.push((wi, ii, label, item_w));
        }
    }
    let mut flat = model.lower.flatten();
    let mut opt = Optimizer::new(cfg.lower.optimizer, cfg.quant_finetune_lr, flat.len());
    let mut lower_losses = Vec::new();
    let mut stop = EarlyStop::new(EARLY_STOP_REL_TOL, FINETUNE_PATIENCE);
    for epoch in 0..cfg.quant_finetune_epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ 0x4F17_0000_0000_0000 ^ epoch as u64);
        let order = shuffled_indices(items.len(), &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.lower.batch_size.max(1)) {
            let mut grads = LowerGrads::zeros(&model.lower);
            let weight_sum: f64 = chunk.iter().map(|&i| items[i].3).sum();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (wi, ii, label, item_w) = items[i];
                let w = item_w / (2.0 * weight_sum);
                let instance = &data[wi].instances[ii];
                // Only the final-step decision feeds the scan, so the pass
                // supervises that step alone; per-step supervision buries the
                // rare disagreeing instances under the irreducible loss of
                // the ambiguous early steps.
                batch_loss += instance_backward(
                    &model.lower,
                    instance,
                    label,
                    LowerLossMode::FinalStep,
                    w,
                    None,
                    &mut grads,
                )?;
                batch_loss += lower_clamp_backward(
                    &model.lower,
                    instance,
                    label,
                    LowerLossMode::FinalStep,
                    w,
                    &mut grads,
                )?;
            }
            opt.step(&mut flat, &grads.flatten());
            model.lower.unflatten_from(&flat);
            epoch_loss += batch_loss * chunk.len() as f64;
        }
        let epoch_loss = epoch_loss / items.len().max(1) as f64;
        if !epoch_loss.is_finite() {
            return Err(CascadeError::NonFiniteLoss {
                phase: "finetune-lower",
                epoch,
            });
        }
        lower_losses.push(epoch_loss);
        if stop.update(epoch_loss) {
            break;
        }
    }

    // Stage two: upper tier on both embedding variants of the updated lower.
    let sources: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>, usize)> = data
        .iter()
        .filter_map(|set| {
            set.window_label.source_class().map(|c| {
                let exact = embed_instances(&model.lower, &set.instances)?;
                let clamped = clamp_embed_instances(&model.lower, &set.instances)?;
                Ok((exact, clamped, c))
            })
        })
        .collect::<Result<_, CascadeError>>()?;
    if sources.is_empty() {
        return Err(CascadeError::NoSourceWindows);
    }
    let mut flat = model.upper_cell.flatten();
    flat.extend(model.upper_readout.flatten());
    let nc = model.upper_cell.num_params();
    let mut opt = Optimizer::new(cfg.lower.optimizer, cfg.quant_finetune_lr, flat.len());
    let mut upper_losses = Vec::new();
    let mut stop = EarlyStop::new(EARLY_STOP_REL_TOL, FINETUNE_PATIENCE);
    for epoch in 0..cfg.quant_finetune_epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ 0x4F17_7000_0000_0000 ^ epoch as u64);
        let order = shuffled_indices(sources.len(), &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.joint_batch_size.max(1)) {
            let mut ug = UpperGrads::zeros(model);
            let w = 1.0 / (2 * chunk.len()) as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (exact, clamped, class) = &sources[i];
                let (l, _) = upper_backward(model, exact, *class, w, &mut ug)?;
                batch_loss += l;
                batch_loss += upper_clamp_backward(model, clamped, *class, w, &mut ug)?;
            }
            opt.step(&mut flat, &ug.flatten());
            model.upper_cell.unflatten_from(&flat[..nc]);
            model.upper_readout.unflatten_from(&flat[nc..]);
            epoch_loss += batch_loss * chunk.len() as f64;
        }
        let epoch_loss = epoch_loss / sources.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(CascadeError::NonFiniteLoss {
                phase: "finetune-upper",
                epoch,
            });
        }
        upper_losses.push(epoch_loss);
        if stop.update(epoch_loss) {
            break;
        }
    }
    Ok((lower_losses, upper_losses))
}

/// Cascaded inference with FLOP accounting. The lower tier scans with early
/// exit; on a Source decision all embeddings are (re)computed and the upper
/// tier classifies. Embeddings the scan skipped are priced into
/// `flops_upper`, since the upper invocation caused them.
pub fn msc_infer(m: &MSCModel, instances: &[Instance]) -> Result<InferenceTrace, CascadeError> {
    if instances.is_empty() {
        return Err(CascadeError::InvalidArg("empty instance sequence".into()));
    }
    let omega = instances[0].len();
    let input_dim = instances[0][0].len();
    if input_dim != m.lower.cell.input_dim {
        return Err(CascadeError::InvalidArg(format!(
            "feature dim {} != model input dim {}",
            input_dim, m.lower.cell.input_dim
        )));
    }
    let n_inst = instances.len();
    let f_cell_lower = flops_cell_step(input_dim, m.lower.cell.hidden_dim, m.lower.cell.w.low_rank());
    let f_embed = omega as u64 * f_cell_lower;
    let f_instance = f_embed + flops_readout(2, m.lower.cell.hidden_dim);

    let scan = emi_infer(&m.lower, instances)?;
    let flops_lower = scan.instances_consumed as u64 * f_instance;
    if scan.decision == LowerDecision::Clutter {
        return Ok(InferenceTrace {
            decision: Decision::Clutter,
            lower_instances_consumed: scan.instances_consumed,
            upper_invoked: false,
            flops_lower,
            flops_upper: 0,
        });
    }
    let embeddings = embed_instances(&m.lower, instances)?;
    let probs = upper_predict(m, &embeddings)?;
    let mut best = 0usize;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    let deferred = (n_inst - scan.instances_consumed) as u64;
    let flops_upper = deferred * f_embed
        + n_inst as u64
            * flops_cell_step(
                m.lower.cell.hidden_dim,
                m.upper_cell.hidden_dim,
                m.upper_cell.w.low_rank(),
            )
        + flops_readout(m.num_source_classes(), m.upper_cell.hidden_dim);
    Ok(InferenceTrace {
        decision: Decision::Source(best),
        lower_instances_consumed: scan.instances_consumed,
        upper_invoked: true,
        flops_lower,
        flops_upper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radar::Label;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn toy_instance(value: f64, omega: usize) -> Instance {
        vec![vec![value]; omega]
    }

    /// Clutter near 0, Human near +1, NonHuman near -1; one feature.
    fn toy_dataset(n_each: usize, n_inst: usize, omega: usize, seed: u64) -> Vec<InstanceSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut origin = 0;
        for label in [Label::Clutter, Label::Human, Label::NonHuman] {
            for _ in 0..n_each {
                let center = match label {
                    Label::Clutter => 0.0,
                    Label::Human => 1.0,
                    Label::NonHuman => -1.0,
                };
                let instances = (0..n_inst)
                    .map(|_| toy_instance(center + 0.05 * rng.gen_range(-1.0..1.0), omega))
                    .collect();
                data.push(InstanceSet {
                    instances,
                    window_label: label,
                    origin,
                });
                origin += 1;
            }
        }
        data
    }

    fn toy_cfg() -> MscConfig {
        MscConfig {
            lower: EmiConfig {
                rounds: 2,
                epochs_per_round: 20,
                lr: 0.05,
                batch_size: 16,
                k: 2,
                p_hat: 0.5,
                omega: 4,
                stride: 4,
                hidden_dim: 4,
                rank: None,
                optimizer: crate::optim::OptimizerKind::Adam,
            },
            upper_hidden_dim: 4,
            upper_rank: None,
            num_source_classes: 2,
            upper_epochs: 40,
            upper_lr: 0.05,
            joint_rounds: 2,
            joint_epochs_per_round: 8,
            joint_lr: 0.01,
            joint_batch_size: 8,
            quant_finetune_epochs: 4,
            quant_finetune_lr: 0.001,
        }
    }

    fn toy_model(seed: u64) -> MSCModel {
        MSCModel {
            lower: EMIModel {
                cell: init_params(1, 4, None, seed).unwrap(),
                readout: Readout::init(2, 4, seed + 1),
                k: 2,
                p_hat: 0.5,
            },
            upper_cell: init_params(4, 3, None, seed + 2).unwrap(),
            upper_readout: Readout::init(2, 3, seed + 3),
        }
    }

    #[test]
    fn embeddings_zero_for_zero_cell_with_unit_gate() {
        // Zero weights with zeta -> 1, nu -> 0 keep h at exactly 0.
        let mut m = toy_model(1);
        m.lower.cell = FastGRNNParams {
            w: crate::numerics::Weight::Dense(crate::numerics::Matrix::zeros(4, 1)),
            u: crate::numerics::Weight::Dense(crate::numerics::Matrix::zeros(4, 4)),
            b_h: vec![0.0; 4],
            b_z: vec![0.0; 4],
            zeta_raw: 60.0,
            nu_raw: -60.0,
            input_dim: 1,
            hidden_dim: 4,
        };
        let emb = embed_instances(&m.lower, &[toy_instance(0.9, 5)]).unwrap();
        assert!(emb[0].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn upper_predict_uniform_with_zero_readout() {
        let mut m = toy_model(2);
        m.upper_readout = Readout::zeros(2, 3);
        let emb = vec![vec![0.1, 0.2, -0.3, 0.4]; 3];
        let p = upper_predict(&m, &emb).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn upper_predict_empty_errors() {
        let m = toy_model(2);
        assert!(upper_predict(&m, &[]).is_err());
    }

    #[test]
    fn upper_predict_matches_manual_composition() {
        let m = toy_model(7);
        let emb: Vec<Vec<f64>> = (0..4).map(|i| vec![0.1 * i as f64; 4]).collect();
        let p = upper_predict(&m, &emb).unwrap();
        let (states, _) = forward(&m.upper_cell, &emb, &vec![0.0; 3]).unwrap();
        let manual = m.upper_readout.predict(states.last().unwrap()).unwrap();
        assert_eq!(p, manual);
    }

    #[test]
    fn conditional_loss_zero_on_all_clutter() {
        let m = toy_model(3);
        let batch: Vec<InstanceSet> = (0..3)
            .map(|i| InstanceSet {
                instances: vec![toy_instance(0.0, 4); 3],
                window_label: Label::Clutter,
                origin: i,
            })
            .collect();
        assert_eq!(conditional_upper_loss(&m, &batch).unwrap(), 0.0);
        // And the gradient through the upper tier is identically zero.
        let spans = initial_spans(&batch, m.lower.k);
        let idxs: Vec<usize> = (0..batch.len()).collect();
        let (_, g) = joint_batch_grad(&m, &batch, &spans, &idxs, LowerLossMode::FinalStep).unwrap();
        let n_lower = m.lower.flatten().len();
        assert!(g[n_lower..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conditional_loss_uniform_prediction_is_ln2() {
        let mut m = toy_model(4);
        m.upper_readout = Readout::zeros(2, 3);
        let batch = vec![InstanceSet {
            instances: vec![toy_instance(0.5, 4); 3],
            window_label: Label::Human,
            origin: 0,
        }];
        let l = conditional_upper_loss(&m, &batch).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn conditional_loss_ignores_clutter_members() {
        let m = toy_model(5);
        let source = InstanceSet {
            instances: vec![toy_instance(0.8, 4); 3],
            window_label: Label::NonHuman,
            origin: 0,
        };
        let clutter = InstanceSet {
            instances: vec![toy_instance(0.0, 4); 3],
            window_label: Label::Clutter,
            origin: 1,
        };
        let mixed = vec![clutter.clone(), source.clone(), clutter];
        let only = vec![source];
        assert_abs_diff_eq!(
            conditional_upper_loss(&m, &mixed).unwrap(),
            conditional_upper_loss(&m, &only).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let data = toy_dataset(2, 3, 4, 40);
        let m0 = MSCModel {
            lower: EMIModel {
                cell: init_params(1, 3, None, 50).unwrap(),
                readout: Readout::init(2, 3, 51),
                k: 2,
                p_hat: 0.5,
            },
            upper_cell: init_params(3, 3, Some(2), 52).unwrap(),
            upper_readout: Readout::init(2, 3, 53),
        };
        let spans = initial_spans(&data, m0.lower.k);
        let idxs: Vec<usize> = (0..data.len()).collect();
        for mode in [LowerLossMode::FinalStep, LowerLossMode::EveryStep] {
            let (_, analytic) =
                joint_batch_grad(&m0, &data, &spans, &idxs, mode).unwrap();
            let theta = m0.flatten();
            let f = |t: &[f64]| {
                let mut m = m0.clone();
                m.unflatten_from(t);
                joint_batch_grad(&m, &data, &spans, &idxs, mode).unwrap().0
            };
            let numeric = crate::numerics::finite_diff_grad(&f, &theta, 1e-5).unwrap();
            for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!(
                    (a - n).abs() / denom < 1e-4,
                    "param {}: analytic {} vs numeric {}",
                    i,
                    a,
                    n
                );
            }
        }
    }

    #[test]
    fn train_msc_separable_reaches_full_accuracy() {
        let data = toy_dataset(8, 4, 4, 60);
        let (m, hist) = train_msc(&data, &toy_cfg(), 17).unwrap();
        assert!(!hist.phase1.is_empty());
        assert!(!hist.phase2_epoch_losses.is_empty());
        assert_eq!(hist.phase3.len(), 2);
        let mut correct = 0;
        for set in &data {
            let t = msc_infer(&m, &set.instances).unwrap();
            let want = match set.window_label {
                Label::Clutter => Decision::Clutter,
                Label::Human => Decision::Source(0),
                Label::NonHuman => Decision::Source(1),
            };
            if t.decision == want {
                correct += 1;
            }
        }
        assert_eq!(correct, data.len(), "{}/{} windows correct", correct, data.len());
    }

    #[test]
    fn phase1_only_leaves_upper_at_init() {
        let data = toy_dataset(2, 3, 4, 61);
        let mut cfg = toy_cfg();
        cfg.joint_rounds = 0;
        cfg.upper_epochs = 0;
        cfg.quant_finetune_epochs = 0;
        let (m, hist) = train_msc(&data, &cfg, 5).unwrap();
        assert!(hist.phase2_epoch_losses.is_empty());
        assert!(hist.phase3.is_empty());
        let fresh = init_params(
            cfg.lower.hidden_dim,
            cfg.upper_hidden_dim,
            cfg.upper_rank,
            5u64.wrapping_add(0x0FF5E7),
        )
        .unwrap();
        assert_eq!(m.upper_cell, fresh);
        assert_eq!(
            m.upper_readout,
            Readout::init(2, cfg.upper_hidden_dim, 5u64.wrapping_add(0x0FF5E8))
        );
    }

    #[test]
    fn phase2_freezes_lower_bitwise() {
        let data = toy_dataset(2, 3, 4, 62);
        let mut cfg = toy_cfg();
        cfg.joint_rounds = 0; // phases 1 and 2 only
        cfg.quant_finetune_epochs = 0;
        let (m_full, _) = train_msc(&data, &cfg, 9).unwrap();
        let (lower_only, _) = train_emi(&data, &cfg.lower, 9).unwrap();
        assert_eq!(m_full.lower.flatten(), lower_only.flatten());
    }

    #[test]
    fn train_msc_deterministic() {
        let data = toy_dataset(3, 3, 4, 63);
        let cfg = toy_cfg();
        let (a, _) = train_msc(&data, &cfg, 123).unwrap();
        let (b, _) = train_msc(&data, &cfg, 123).unwrap();
        assert_eq!(a.flatten(), b.flatten());
    }

    #[test]
    fn train_msc_all_clutter_errors() {
        let data: Vec<InstanceSet> = (0..3)
            .map(|i| InstanceSet {
                instances: vec![toy_instance(0.0, 4); 3],
                window_label: Label::Clutter,
                origin: i,
            })
            .collect();
        assert!(matches!(
            train_msc(&data, &toy_cfg(), 0),
            Err(CascadeError::NoSourceWindows)
        ));
    }

    #[test]
    fn clutter_decision_has_zero_upper_flops() {
        // Readout biased hard toward clutter so the scan never fires.
        let mut m = toy_model(70);
        m.lower.readout.b = vec![10.0, -10.0];
        let instances = vec![toy_instance(0.2, 4); 5];
        let t = msc_infer(&m, &instances).unwrap();
        assert_eq!(t.decision, Decision::Clutter);
        assert!(!t.upper_invoked);
        assert_eq!(t.flops_upper, 0);
        assert_eq!(t.lower_instances_consumed, 5);
    }

    #[test]
    fn zero_upper_readout_tie_breaks_to_class_zero() {
        let mut m = toy_model(71);
        m.lower.readout.b = vec![-10.0, 10.0]; // always Source
        m.upper_readout = Readout::zeros(2, 3);
        let instances = vec![toy_instance(0.2, 4); 5];
        let t = msc_infer(&m, &instances).unwrap();
        assert_eq!(t.decision, Decision::Source(0));
        assert!(t.upper_invoked);
    }

    #[test]
    fn trace_flops_match_cost_model() {
        let mut m = toy_model(72);
        m.lower.readout.b = vec![-10.0, 10.0]; // force upper invocation
        let n_inst = 5;
        let omega = 4;
        let instances = vec![toy_instance(0.2, omega); n_inst];
        let t = msc_infer(&m, &instances).unwrap();
        assert!(t.upper_invoked);
        let dims = m.dims(omega + (n_inst - 1), omega, n_inst);
        // Early exit after k=2 instances: 2 classified, 3 deferred.
        assert_eq!(t.lower_instances_consumed, 2);
        assert_eq!(t.flops_lower, 2 * dims.flops_lower_per_instance());
        let expect_upper = 3 * dims.flops_embed_instance() + dims.flops_upper_per_window();
        assert_eq!(t.flops_upper, expect_upper);
        // Total never exceeds pricing every instance through both tiers.
        assert!(
            t.flops_lower + t.flops_upper
                <= dims.flops_lower_per_window() + dims.flops_upper_per_window()
        );
    }

    #[test]
    fn gating_invariant_upper_iff_source() {
        let m = toy_model(73);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let n = rng.gen_range(2..8);
            let instances: Vec<Instance> = (0..n)
                .map(|_| toy_instance(rng.gen_range(-2.0..2.0), 4))
                .collect();
            let scan = emi_infer(&m.lower, &instances).unwrap();
            let t = msc_infer(&m, &instances).unwrap();
            assert_eq!(t.upper_invoked, scan.decision == LowerDecision::Source);
            assert_eq!(t.decision.is_clutter(), !t.upper_invoked);
            if !t.upper_invoked {
                assert_eq!(t.flops_upper, 0);
            }
        }
    }

    #[test]
    fn msc_infer_rejects_wrong_feature_dim() {
        let m = toy_model(74);
        let bad = vec![vec![vec![0.1, 0.2]; 4]];
        assert!(msc_infer(&m, &bad).is_err());
    }

    #[test]
    fn validate_rejects_dim_mismatch() {
        let mut m = toy_model(75);
        m.upper_cell = init_params(5, 3, None, 0).unwrap();
        assert!(m.validate().is_err());
    }
}
