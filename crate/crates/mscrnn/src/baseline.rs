//! Shallow comparator: phase unwrapping to radial displacement, clutter
//! threshold calibration by log-scale tail extrapolation, and M-out-of-N
//! sliding-window displacement detection.
//!
//! Calibration assumes per-window false alarms are Bernoulli, so a target
//! false-alarm rate per second becomes a per-window probability
//! p = rate x window length. The empirical ln(CCDF) of clutter window
//! displacements is fit by least squares over its top decile and the
//! threshold is the displacement where the fitted line crosses ln(p).

use crate::radar::{wavelength_m, IQSeries};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("need at least {need} clutter windows, got {got}")]
    TooFewWindows { got: usize, need: usize },
    #[error("degenerate displacement tail (no spread to extrapolate)")]
    DegenerateTail,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub window_len_s: f64,
    pub threshold_m: f64,
    pub m: usize,
    pub n: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            window_len_s: 0.5,
            threshold_m: 0.3,
            m: 3,
            n: 4,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.m < 1 || self.m > self.n {
            return Err(BaselineError::InvalidArg(format!(
                "need 1 <= M <= N, got M={} N={}",
                self.m, self.n
            )));
        }
        if !(self.threshold_m > 0.0) || !(self.window_len_s > 0.0) {
            return Err(BaselineError::InvalidArg(
                "threshold and window length must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Per-window threshold of the M-of-N rule: threshold x M/N.
    pub fn per_window_threshold(&self) -> f64 {
        self.threshold_m * self.m as f64 / self.n as f64
    }
}

/// Cumulative radial displacement in meters per sample: atan2 phase,
/// successive deltas wrapped into (-pi, pi], cumulative sum scaled by
/// lambda / 4 pi. First element is 0.
pub fn unwrap_phase(s: &IQSeries) -> Result<Vec<f64>, BaselineError> {
    if s.i_samples.is_empty() {
        return Err(BaselineError::InvalidArg("empty series".into()));
    }
    let scale = wavelength_m() / (4.0 * std::f64::consts::PI);
    let mut out = Vec::with_capacity(s.i_samples.len());
    let mut prev = (s.q_samples[0]).atan2(s.i_samples[0]);
    let mut acc = 0.0;
    out.push(0.0);
    for t in 1..s.i_samples.len() {
        let theta = (s.q_samples[t]).atan2(s.i_samples[t]);
        let mut d = theta - prev;
        while d > std::f64::consts::PI {
            d -= 2.0 * std::f64::consts::PI;
        }
        while d <= -std::f64::consts::PI {
            d += 2.0 * std::f64::consts::PI;
        }
        acc += d * scale;
        out.push(acc);
        prev = theta;
    }
    Ok(out)
}

/// |net displacement| over consecutive non-overlapping windows of
/// `window_len` samples.
pub fn window_displacements(displacement: &[f64], window_len: usize) -> Vec<f64> {
    if window_len == 0 {
        return Vec::new();
    }
    displacement
        .chunks_exact(window_len)
        .map(|w| (w[w.len() - 1] - w[0]).abs())
        .collect()
}

pub const MIN_CALIBRATION_WINDOWS: usize = 100;

/// Threshold where the tail-fitted ln(CCDF) of clutter window displacements
/// equals ln(target_fa_per_s x window_len_s).
pub fn calibrate_threshold(
    clutter_windows: &[f64],
    target_fa_per_s: f64,
    window_len_s: f64,
) -> Result<f64, BaselineError> {
    if clutter_windows.len() < MIN_CALIBRATION_WINDOWS {
        return Err(BaselineError::TooFewWindows {
            got: clutter_windows.len(),
            need: MIN_CALIBRATION_WINDOWS,
        });
    }
    if !(target_fa_per_s > 0.0) || !(window_len_s > 0.0) {
        return Err(BaselineError::InvalidArg(
            "target rate and window length must be positive".into(),
        ));
    }
    let p = target_fa_per_s * window_len_s;
    if p >= 1.0 {
        return Err(BaselineError::InvalidArg(format!(
            "per-window false-alarm probability {} >= 1",
            p
        )));
    }
    let n = clutter_windows.len();
    let mut xs = clutter_windows.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Top decile: points (x_(j), ln((n - j) / n)) for the largest values.
    let tail = (n / 10).max(2);
    let start = n - tail;
    if xs[start] == xs[n - 1] {
        return Err(BaselineError::DegenerateTail);
    }
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for j in start..n {
        let x = xs[j];
        let y = ((n - j) as f64 / n as f64).ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let m = tail as f64;
    let denom = m * sxx - sx * sx;
    let slope = (m * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / m;
    if !slope.is_finite() || slope >= 0.0 {
        return Err(BaselineError::DegenerateTail);
    }
    Ok((p.ln() - intercept) / slope)
}

/// Sliding M-of-N detector over per-window displacement magnitudes. A
/// window is positive iff it reaches threshold x M/N; position t (for
/// t >= N-1) fires iff at least M of windows t-N+1..=t are positive.
/// Fewer than N windows yields no decisions.
pub fn m_of_n_detect(
    displacements: &[f64],
    cfg: &DetectorConfig,
) -> Result<Vec<bool>, BaselineError> {
    cfg.validate()?;
    let thr = cfg.per_window_threshold();
    if displacements.len() < cfg.n {
        return Ok(Vec::new());
    }
    let pos: Vec<bool> = displacements.iter().map(|d| d.abs() >= thr).collect();
    let mut count = pos[..cfg.n].iter().filter(|p| **p).count();
    let mut out = Vec::with_capacity(displacements.len() - cfg.n + 1);
    out.push(count >= cfg.m);
    for t in cfg.n..displacements.len() {
        count += pos[t] as usize;
        count -= pos[t - cfg.n] as usize;
        out.push(count >= cfg.m);
    }
    Ok(out)
}
