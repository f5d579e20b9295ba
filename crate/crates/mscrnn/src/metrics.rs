//! Window-level evaluation of a cascade (float or quantized): accuracy,
//! per-class recall with Clutter as its own class, confusion matrix, and
//! early-exit statistics.

use crate::cascade::{msc_infer, CascadeError, Decision, InferenceTrace, MSCModel};
use crate::emi::InstanceSet;
use crate::quant::{quant_msc_infer, QuantError, QuantizedModel};
use crate::radar::Label;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// True-class index: Clutter first, then the source classes.
pub fn label_class_index(l: Label) -> usize {
    match l.source_class() {
        None => 0,
        Some(c) => c + 1,
    }
}

pub fn decision_class_index(d: Decision) -> usize {
    match d {
        Decision::Clutter => 0,
        Decision::Source(c) => c + 1,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_windows: usize,
    pub accuracy: f64,
    pub class_names: Vec<String>,
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<u64>>,
    /// TP / (TP + FN) per class; NaN-free (0 when a class is absent).
    pub per_class_recall: Vec<f64>,
    pub mean_instances_consumed: f64,
    pub upper_invocation_rate: f64,
    pub mean_flops_lower: f64,
    pub mean_flops_upper: f64,
}

impl EvalMetrics {
    pub fn clutter_recall(&self) -> f64 {
        self.per_class_recall[0]
    }

    /// Aligned text table for terminal output.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "windows: {}   accuracy: {:.4}   upper invoked: {:.4}\n",
            self.n_windows, self.accuracy, self.upper_invocation_rate
        ));
        s.push_str(&format!(
            "mean instances consumed: {:.2}   mean FLOPs lower/upper: {:.0}/{:.0}\n",
            self.mean_instances_consumed, self.mean_flops_lower, self.mean_flops_upper
        ));
        let w = self
            .class_names
            .iter()
            .map(|n| n.len())
            .max()
            .unwrap_or(8)
            .max(8);
        s.push_str(&format!("{:>w$} | recall | predicted counts\n", "class", w = w));
        for (i, name) in self.class_names.iter().enumerate() {
            let row: Vec<String> = self.confusion[i].iter().map(|c| c.to_string()).collect();
            s.push_str(&format!(
                "{:>w$} | {:.4} | {}\n",
                name,
                self.per_class_recall[i],
                row.join(" "),
                w = w
            ));
        }
        s
    }
}

fn summarize(
    truths: &[usize],
    traces: &[InferenceTrace],
    class_names: Vec<String>,
) -> EvalMetrics {
    let n_classes = class_names.len();
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    let mut correct = 0usize;
    let mut consumed = 0.0;
    let mut invoked = 0usize;
    let mut fl = 0.0;
    let mut fu = 0.0;
    for (t, trace) in truths.iter().zip(traces) {
        let p = decision_class_index(trace.decision);
        confusion[*t][p] += 1;
        if *t == p {
            correct += 1;
        }
        consumed += trace.lower_instances_consumed as f64;
        invoked += trace.upper_invoked as usize;
        fl += trace.flops_lower as f64;
        fu += trace.flops_upper as f64;
    }
    let n = truths.len();
    let per_class_recall = (0..n_classes)
        .map(|c| {
            let total: u64 = confusion[c].iter().sum();
            if total == 0 {
                0.0
            } else {
                confusion[c][c] as f64 / total as f64
            }
        })
        .collect();
    EvalMetrics {
        n_windows: n,
        accuracy: correct as f64 / n.max(1) as f64,
        class_names,
        confusion,
        per_class_recall,
        mean_instances_consumed: consumed / n.max(1) as f64,
        upper_invocation_rate: invoked as f64 / n.max(1) as f64,
        mean_flops_lower: fl / n.max(1) as f64,
        mean_flops_upper: fu / n.max(1) as f64,
    }
}

pub fn evaluate(m: &MSCModel, data: &[InstanceSet]) -> Result<EvalMetrics, CascadeError> {
    if data.is_empty() {
        return Err(CascadeError::InvalidArg("empty evaluation set".into()));
    }
    let traces: Vec<InferenceTrace> = data
        .par_iter()
        .map(|set| msc_infer(m, &set.instances))
        .collect::<Result<_, _>>()?;
    let truths: Vec<usize> = data
        .iter()
        .map(|s| label_class_index(s.window_label))
        .collect();
    Ok(summarize(
        &truths,
        &traces,
        crate::format::default_class_names(m.num_source_classes()),
    ))
}

pub fn evaluate_quant(
    q: &QuantizedModel,
    data: &[InstanceSet],
) -> Result<EvalMetrics, QuantError> {
    if data.is_empty() {
        return Err(QuantError::EmptyDataset);
    }
    let traces: Vec<InferenceTrace> = data
        .par_iter()
        .map(|set| quant_msc_infer(q, &set.instances))
        .collect::<Result<_, _>>()?;
    let truths: Vec<usize> = data
        .iter()
        .map(|s| label_class_index(s.window_label))
        .collect();
    Ok(summarize(
        &truths,
        &traces,
        crate::format::default_class_names(q.upper_readout.w.shape[0]),
    ))
}
