//! Operation counting and expected-compute estimation.
//!
//! Accounting convention: one FLOP is one multiply-add or one elementwise
//! op; a nonlinearity (sigmoid/tanh) counts as 1. A dense m x n matvec is
//! 2mn (multiply + accumulate counted separately), a rank-r factored matvec
//! is 2r(m+n). One cell step with shared pre-activation costs
//!
//!   mv(W: D̂xD) + mv(U: D̂xD̂)      the shared pre-activation
//! + 2D̂ x 2                         bias adds for the two branches
//! + 6D̂                             gate/update elementwise ops
//! + 2D̂                             two nonlinearities
//!
//! Published per-window figures use an unstated convention, so they are
//! treated as consistency anchors (within ~20%), not exact targets.

use serde::{Deserialize, Serialize};

/// Dense m x n matrix-vector product.
pub fn flops_matvec_dense(m: usize, n: usize) -> u64 {
    2 * (m as u64) * (n as u64)
}

/// Rank-r factored m x n matrix-vector product (two skinny matvecs).
pub fn flops_matvec_low_rank(m: usize, n: usize, r: usize) -> u64 {
    2 * (r as u64) * ((m + n) as u64)
}

fn flops_matvec(m: usize, n: usize, rank: Option<usize>) -> u64 {
    match rank {
        None => flops_matvec_dense(m, n),
        Some(r) => flops_matvec_low_rank(m, n, r),
    }
}

/// One gated-recurrent cell step for input dim `d`, hidden dim `d_hat`.
/// Both weight matrices share the rank setting.
pub fn flops_cell_step(d: usize, d_hat: usize, rank: Option<usize>) -> u64 {
    let dh = d_hat as u64;
    flops_matvec(d_hat, d, rank) + flops_matvec(d_hat, d_hat, rank) + 4 * dh + 6 * dh + 2 * dh
}

/// Linear readout over `classes` outputs: matvec + bias.
pub fn flops_readout(classes: usize, d_hat: usize) -> u64 {
    flops_matvec_dense(classes, d_hat) + classes as u64
}

/// Static shape description of a cascade, enough to price every path.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CascadeDims {
    pub input_dim: usize,
    pub lower_hidden: usize,
    pub lower_rank: Option<usize>,
    pub upper_hidden: usize,
    pub upper_rank: Option<usize>,
    pub num_source_classes: usize,
    pub omega: usize,
    pub window_len: usize,
    pub instances_per_window: usize,
}

impl CascadeDims {
    /// One lower-tier cell step over a feature vector.
    pub fn flops_lower_cell(&self) -> u64 {
        flops_cell_step(self.input_dim, self.lower_hidden, self.lower_rank)
    }

    /// Embedding one instance: omega cell steps, no readout.
    pub fn flops_embed_instance(&self) -> u64 {
        self.omega as u64 * self.flops_lower_cell()
    }

    /// Classifying one instance: embedding plus binary readout.
    pub fn flops_lower_per_instance(&self) -> u64 {
        self.flops_embed_instance() + flops_readout(2, self.lower_hidden)
    }

    /// Lower tier over every instance of a window.
    pub fn flops_lower_per_window(&self) -> u64 {
        self.instances_per_window as u64 * self.flops_lower_per_instance()
    }

    /// Upper tier over a full embedding sequence plus source readout.
    /// Excludes any on-demand embedding work.
    pub fn flops_upper_per_window(&self) -> u64 {
        self.instances_per_window as u64
            * flops_cell_step(self.lower_hidden, self.upper_hidden, self.upper_rank)
            + flops_readout(self.num_source_classes, self.upper_hidden)
    }

    /// A single cell of the upper tier's size run over the raw window, with
    /// a readout over every class including clutter: the always-on
    /// monolithic comparison point.
    pub fn flops_monolithic_per_window(&self) -> u64 {
        self.window_len as u64
            * flops_cell_step(self.input_dim, self.upper_hidden, self.upper_rank)
            + flops_readout(self.num_source_classes + 1, self.upper_hidden)
    }
}

/// Measured early-exit behaviour of a trained cascade on a stream.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EarlyExitStats {
    /// Mean lower-tier instances consumed per window (all windows).
    pub mean_instances_consumed: f64,
    /// Mean instances embedded on demand per upper invocation.
    pub mean_deferred_instances: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub flops_lower_per_instance: u64,
    pub instances_per_window: usize,
    pub flops_upper_per_window: u64,
    pub clutter_fraction: f64,
    pub expected_flops_per_window: f64,
    pub monolithic_flops_per_window: u64,
    pub lower_only_flops_per_window: u64,
    pub early_exit: Option<EarlyExitStats>,
}

/// expected = lower-tier cost + (1 - c) x upper cost. Exposed raw so the
/// per-window aggregates can be plugged in directly.
pub fn expected_flops_per_window(lower_total: f64, upper_per_window: f64, c: f64) -> f64 {
    lower_total + (1.0 - c) * upper_per_window
}

/// Expected per-window compute at clutter fraction `c`. With early-exit
/// statistics the lower-tier term uses the measured mean instances consumed,
/// and deferred embeddings are charged to the upper invocation.
pub fn expected_cost(
    dims: &CascadeDims,
    clutter_fraction: f64,
    early_exit: Option<EarlyExitStats>,
) -> Result<CostReport, String> {
    if !(0.0..=1.0).contains(&clutter_fraction) {
        return Err(format!(
            "clutter fraction {} outside [0, 1]",
            clutter_fraction
        ));
    }
    let f_li = dims.flops_lower_per_instance() as f64;
    let (lower_total, upper) = match early_exit {
        None => (
            dims.instances_per_window as f64 * f_li,
            dims.flops_upper_per_window() as f64,
        ),
        Some(s) => (
            s.mean_instances_consumed * f_li,
            dims.flops_upper_per_window() as f64
                + s.mean_deferred_instances * dims.flops_embed_instance() as f64,
        ),
    };
    Ok(CostReport {
        flops_lower_per_instance: dims.flops_lower_per_instance(),
        instances_per_window: dims.instances_per_window,
        flops_upper_per_window: dims.flops_upper_per_window(),
        clutter_fraction,
        expected_flops_per_window: expected_flops_per_window(lower_total, upper, clutter_fraction),
        monolithic_flops_per_window: dims.flops_monolithic_per_window(),
        lower_only_flops_per_window: dims.flops_lower_per_window(),
        early_exit,
    })
}

/// Fraction of a device's compute budget one window costs:
/// FLOPs / (device MFLOPS x window period).
pub fn duty_cycle(flops_per_window: f64, device_mflops: f64, window_period_s: f64) -> f64 {
    flops_per_window / (device_mflops * 1e6 * window_period_s)
}
