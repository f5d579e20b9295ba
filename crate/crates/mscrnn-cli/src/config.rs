//! Declarative run configuration: one JSON document drives data generation
//! and training. Unknown keys are rejected; every command that consumes a
//! config writes the fully resolved version next to its outputs so a rerun
//! from that file is bit-reproducible.

use mscrnn::cascade::MscConfig;
use mscrnn::radar::GenConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_clutter_series: usize,
    pub n_human_series: usize,
    pub n_nonhuman_series: usize,
    pub series_duration_s: f64,
    pub window_len_s: f64,
    /// Train/val/test ratios; must sum to 1.
    pub split: (f64, f64, f64),
    pub gen: GenConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_clutter_series: 40,
            n_human_series: 20,
            n_nonhuman_series: 20,
            series_duration_s: 30.0,
            window_len_s: 1.0,
            split: (0.6, 0.2, 0.2),
            gen: GenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Target false-alarm rate (events per second).
    pub target_fa_per_s: f64,
    pub window_len_s: f64,
    pub m: usize,
    pub n: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            target_fa_per_s: 1.0 / 3600.0,
            window_len_s: 0.5,
            m: 3,
            n: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; per-series and per-phase seeds are derived from it.
    pub seed: u64,
    pub data: DataConfig,
    pub train: MscConfig,
    pub baseline: BaselineConfig,
    /// Device throughput assumed by `bench` for duty-cycle estimates.
    pub device_mflops: f64,
    /// Clutter fraction assumed by `bench` when no stream is measured.
    pub clutter_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            data: DataConfig::default(),
            train: MscConfig::default(),
            baseline: BaselineConfig::default(),
            device_mflops: 10.0,
            clutter_fraction: 0.97,
        }
    }
}
