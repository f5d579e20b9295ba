//! Synthetic pulse-Doppler I/Q generation for clutter and source classes,
//! windowing, labeling, dataset splits, and a binary file format.
//!
//! The sample rate is fixed at 256 Hz so that 1 s of data is exactly 256
//! I-Q sample pairs. Sources follow a piecewise-constant-velocity radial
//! trajectory d(t) with phase 4*pi*d(t)/lambda at a 5.8 GHz carrier;
//! clutter is a superposition of small zero-mean oscillating scatterers
//! whose unwrapped phase self-cancels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

pub const SAMPLE_RATE_HZ: f64 = 256.0;
pub const CENTER_FREQ_HZ: f64 = 5.8e9;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn wavelength_m() -> f64 {
    SPEED_OF_LIGHT / CENTER_FREQ_HZ
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Window/series class label. Dataset-level integer encoding keeps clutter
/// at -1 and source classes at 0..N-1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Clutter,
    Human,
    NonHuman,
}

impl Label {
    pub fn to_i16(self) -> i16 {
        match self {
            Label::Clutter => -1,
            Label::Human => 0,
            Label::NonHuman => 1,
        }
    }

    pub fn from_i16(v: i16) -> Result<Self, DataError> {
        match v {
            -1 => Ok(Label::Clutter),
            0 => Ok(Label::Human),
            1 => Ok(Label::NonHuman),
            other => Err(DataError::Parse(format!("unknown label code {}", other))),
        }
    }

    pub fn is_clutter(self) -> bool {
        self == Label::Clutter
    }

    /// Source class index for the upper tier (clutter has none).
    pub fn source_class(self) -> Option<usize> {
        match self {
            Label::Clutter => None,
            Label::Human => Some(0),
            Label::NonHuman => Some(1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Clutter => "clutter",
            Label::Human => "human",
            Label::NonHuman => "nonhuman",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceKind {
    Human,
    NonHuman,
}

/// Generator configuration. Speed ranges are disjoint by default so that the
/// synthetic classes are separable by mean Doppler rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub snr_db: f64,
    pub amplitude: f64,
    /// Human radial speed range (m/s), with gait micro-modulation on top.
    pub human_speed: (f64, f64),
    pub gait_freq_hz: f64,
    /// Relative depth of the gait speed modulation.
    pub gait_depth: f64,
    /// Non-human radial speed range (m/s), smooth trajectory.
    pub nonhuman_speed: (f64, f64),
    /// Trajectory segment duration range (s) for piecewise-constant velocity.
    pub segment_s: (f64, f64),
    pub clutter_scatterers: usize,
    /// Peak micro-displacement amplitude of a clutter scatterer (m).
    pub clutter_amp_m: f64,
    pub clutter_freq_hz: (f64, f64),
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            snr_db: 25.0,
            amplitude: 0.7,
            human_speed: (0.5, 1.2),
            gait_freq_hz: 2.0,
            gait_depth: 0.4,
            nonhuman_speed: (1.8, 3.0),
            segment_s: (0.8, 2.5),
            clutter_scatterers: 8,
            // Small enough that the noise floor, identical across series,
            // dominates per-window displacement: the pooled displacement
            // tail then stays lighter than exponential, which keeps the
            // baseline detector's log-scale tail extrapolation conservative.
            clutter_amp_m: 0.0005,
            clutter_freq_hz: (0.2, 2.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IQSeries {
    pub i_samples: Vec<f64>,
    pub q_samples: Vec<f64>,
    pub sample_rate_hz: f64,
    pub label: Label,
    pub seed: u64,
}

impl IQSeries {
    pub fn len(&self) -> usize {
        self.i_samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i_samples.is_empty()
    }
}

fn noise_std(amplitude: f64, snr_db: f64) -> f64 {
    // Per-channel signal power of a rotating phasor of amplitude A is A^2/2.
    (amplitude * amplitude / 2.0 / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// Radial trajectory d(t) sampled at the configured rate: piecewise-constant
/// speed with random sign per segment, plus kind-dependent micro-modulation.
fn source_displacement(
    kind: SourceKind,
    n: usize,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let dt = 1.0 / SAMPLE_RATE_HZ;
    let (lo, hi) = match kind {
        SourceKind::Human => cfg.human_speed,
        SourceKind::NonHuman => cfg.nonhuman_speed,
    };
    let mut d = Vec::with_capacity(n);
    let mut pos = 0.0;
    let mut remaining = 0usize;
    let mut speed = 0.0;
    let mut dir = 1.0;
    for t in 0..n {
        if remaining == 0 {
            let seg_s = rng.gen_range(cfg.segment_s.0..cfg.segment_s.1);
            remaining = (seg_s * SAMPLE_RATE_HZ) as usize;
            speed = rng.gen_range(lo..hi);
            dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
        remaining -= 1;
        let v = match kind {
            SourceKind::Human => {
                let phase = 2.0 * std::f64::consts::PI * cfg.gait_freq_hz * (t as f64) * dt;
                speed * (1.0 + cfg.gait_depth * phase.sin())
            }
            SourceKind::NonHuman => speed,
        };
        pos += dir * v * dt;
        d.push(pos);
    }
    d
}

pub fn gen_source(
    kind: SourceKind,
    duration_s: f64,
    seed: u64,
    cfg: &GenConfig,
) -> Result<IQSeries, DataError> {
    if duration_s <= 0.0 {
        return Err(DataError::InvalidArg("duration must be positive".into()));
    }
    let n = (duration_s * SAMPLE_RATE_HZ).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = wavelength_m();
    let d = source_displacement(kind, n, cfg, &mut rng);
    let sigma = noise_std(cfg.amplitude, cfg.snr_db);
    let normal = Normal::new(0.0, sigma.max(1e-300)).unwrap();
    let dt = 1.0 / SAMPLE_RATE_HZ;
    let mut i_samples = Vec::with_capacity(n);
    let mut q_samples = Vec::with_capacity(n);
    for t in 0..n {
        let phi = 4.0 * std::f64::consts::PI * d[t] / lambda;
        let amp = match kind {
            SourceKind::Human => {
                // Gait also modulates the return strength.
                let g = 2.0 * std::f64::consts::PI * cfg.gait_freq_hz * (t as f64) * dt;
                cfg.amplitude * (1.0 + 0.75 * cfg.gait_depth * g.sin())
            }
            SourceKind::NonHuman => cfg.amplitude,
        };
        let ni = if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        let nq = if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        i_samples.push(amp * phi.cos() + ni);
        q_samples.push(amp * phi.sin() + nq);
    }
    Ok(IQSeries {
        i_samples,
        q_samples,
        sample_rate_hz: SAMPLE_RATE_HZ,
        label: match kind {
            SourceKind::Human => Label::Human,
            SourceKind::NonHuman => Label::NonHuman,
        },
        seed,
    })
}

pub fn gen_clutter(duration_s: f64, seed: u64, cfg: &GenConfig) -> Result<IQSeries, DataError> {
    if duration_s <= 0.0 {
        return Err(DataError::InvalidArg("duration must be positive".into()));
    }
    let n = (duration_s * SAMPLE_RATE_HZ).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = wavelength_m();
    let k = cfg.clutter_scatterers;
    // A strong static background return plus zero-mean sinusoidal
    // micro-displacements: the static phasor anchors the aggregate phase so
    // it never becomes noise-dominated, and the scatterer excursions stay
    // well below pi so the unwrap self-cancels.
    let bg_phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let mut amp = Vec::with_capacity(k);
    let mut disp = Vec::with_capacity(k);
    let mut freq = Vec::with_capacity(k);
    let mut ph0 = Vec::with_capacity(k);
    let mut psi = Vec::with_capacity(k);
    for _ in 0..k {
        // Divided by k so the scatterer sum can never cancel the static
        // background and leave the phase noise-dominated.
        amp.push(rng.gen_range(0.3..1.0) * cfg.amplitude / k.max(1) as f64);
        disp.push(rng.gen_range(0.2..1.0) * cfg.clutter_amp_m);
        freq.push(rng.gen_range(cfg.clutter_freq_hz.0..cfg.clutter_freq_hz.1));
        ph0.push(rng.gen_range(0.0..2.0 * std::f64::consts::PI));
        psi.push(rng.gen_range(0.0..2.0 * std::f64::consts::PI));
    }
    // The background phasor completes the scatterers' static sum to a fixed
    // resultant of magnitude cfg.amplitude, so every series sees the same
    // carrier magnitude and therefore the same phase-noise scale. Without
    // this, per-series carrier magnitudes vary with the random scatterer
    // directions, pooled window displacements become a variance mixture with
    // a heavier-than-exponential tail, and exponential tail extrapolation
    // (the baseline detector's calibration) under-estimates extreme
    // quantiles.
    let mut bg_re = cfg.amplitude * bg_phase.cos();
    let mut bg_im = cfg.amplitude * bg_phase.sin();
    for s in 0..k {
        bg_re -= amp[s] * psi[s].cos();
        bg_im -= amp[s] * psi[s].sin();
    }
    let sigma = noise_std(cfg.amplitude, cfg.snr_db);
    let normal = Normal::new(0.0, sigma.max(1e-300)).unwrap();
    let dt = 1.0 / SAMPLE_RATE_HZ;
    let mut i_samples = Vec::with_capacity(n);
    let mut q_samples = Vec::with_capacity(n);
    for t in 0..n {
        let time = t as f64 * dt;
        let mut re = bg_re;
        let mut im = bg_im;
        for s in 0..k {
            let d = disp[s] * (2.0 * std::f64::consts::PI * freq[s] * time + ph0[s]).sin();
            let phi = 4.0 * std::f64::consts::PI * d / lambda + psi[s];
            re += amp[s] * phi.cos();
            im += amp[s] * phi.sin();
        }
        let ni = if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        let nq = if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        i_samples.push(re + ni);
        q_samples.push(im + nq);
    }
    Ok(IQSeries {
        i_samples,
        q_samples,
        sample_rate_hz: SAMPLE_RATE_HZ,
        label: Label::Clutter,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn to_u8(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_u8(v: u8) -> Result<Self, DataError> {
        match v {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            other => Err(DataError::Parse(format!("unknown split tag {}", other))),
        }
    }
}

/// One T x F window. Samples are stored at f32 precision, matching the file
/// payload, so save/load round trips are exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    /// Row-major T x F block; F = 2 (I then Q per row).
    pub data: Vec<f32>,
    pub label: Label,
    pub split: Split,
}

pub const NUM_FEATURES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    pub windows: Vec<Window>,
    /// Samples per window.
    pub window_len: usize,
    pub window_len_s: f64,
    pub sample_rate_hz: f64,
    /// Instance width and stride used downstream (time steps).
    pub omega: usize,
    pub stride: usize,
    /// Series too short for a single window, skipped with a warning count.
    pub skipped_series: usize,
}

impl WindowedDataset {
    pub fn split_windows(&self, split: Split) -> impl Iterator<Item = &Window> {
        self.windows.iter().filter(move |w| w.split == split)
    }

    pub fn window_f64(w: &Window) -> Vec<f64> {
        w.data.iter().map(|v| *v as f64).collect()
    }
}

/// Cuts non-overlapping windows from each series and shuffles them into
/// train/val/test splits deterministically by seed.
pub fn window_dataset(
    series: &[IQSeries],
    window_len_s: f64,
    split: (f64, f64, f64),
    omega: usize,
    stride: usize,
    seed: u64,
) -> Result<WindowedDataset, DataError> {
    let (a, b, c) = split;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidArg(
            "split ratios must be positive and sum to 1".into(),
        ));
    }
    if window_len_s <= 0.0 {
        return Err(DataError::InvalidArg("window length must be positive".into()));
    }
    let t = (window_len_s * SAMPLE_RATE_HZ).round() as usize;
    let mut raw: Vec<(Vec<f32>, Label)> = Vec::new();
    let mut skipped = 0usize;
    for s in series {
        if s.len() < t {
            skipped += 1;
            continue;
        }
        let count = s.len() / t;
        for w in 0..count {
            let mut data = Vec::with_capacity(t * NUM_FEATURES);
            for k in 0..t {
                let idx = w * t + k;
                data.push(s.i_samples[idx] as f32);
                data.push(s.q_samples[idx] as f32);
            }
            raw.push((data, s.label));
        }
    }
    let n = raw.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (n as f64 * a).round() as usize;
    let n_val = (n as f64 * b).round() as usize;
    let mut windows: Vec<Option<Window>> = vec![None; n];
    for (pos, &idx) in order.iter().enumerate() {
        let split = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let (data, label) = raw[idx].clone();
        windows[idx] = Some(Window { data, label, split });
    }
    Ok(WindowedDataset {
        windows: windows.into_iter().map(|w| w.unwrap()).collect(),
        window_len: t,
        window_len_s,
        sample_rate_hz: SAMPLE_RATE_HZ,
        omega,
        stride,
        skipped_series: skipped,
    })
}

const DATASET_MAGIC: &[u8; 4] = b"MSCR";
const DATASET_VERSION: u16 = 1;

pub fn save_dataset(ds: &WindowedDataset, path: &Path) -> Result<(), DataError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&ds.sample_rate_hz.to_le_bytes());
    buf.extend_from_slice(&ds.window_len_s.to_le_bytes());
    buf.extend_from_slice(&(ds.window_len as u32).to_le_bytes());
    buf.extend_from_slice(&(NUM_FEATURES as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.omega as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.stride as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.skipped_series as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.windows.len() as u32).to_le_bytes());
    for w in &ds.windows {
        buf.extend_from_slice(&w.label.to_i16().to_le_bytes());
        buf.push(w.split.to_u8());
        for v in &w.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    crate::format::write_atomic(path, &buf)?;
    Ok(())
}

pub(crate) struct Cursor<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.buf.len() {
            return Err(DataError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn i16(&mut self, what: &str) -> Result<i16, DataError> {
        Ok(i16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32, DataError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8, DataError> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn load_dataset(path: &Path) -> Result<WindowedDataset, DataError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 4 {
        return Err(DataError::Truncated("header".into()));
    }
    if &buf[..4] != DATASET_MAGIC {
        return Err(DataError::BadMagic);
    }
    if buf.len() < 8 {
        return Err(DataError::Truncated("checksum".into()));
    }
    let body = &buf[..buf.len() - 4];
    let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(DataError::ChecksumMismatch { stored, computed });
    }
    let mut cur = Cursor { buf: body, pos: 4 };
    let version = cur.u16("version")?;
    if version != DATASET_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let sample_rate_hz = cur.f64("sample_rate")?;
    let window_len_s = cur.f64("window_len_s")?;
    let t = cur.u32("window_len")? as usize;
    let f = cur.u32("features")? as usize;
    if f != NUM_FEATURES {
        return Err(DataError::Parse(format!("unsupported feature count {}", f)));
    }
    let omega = cur.u32("omega")? as usize;
    let stride = cur.u32("stride")? as usize;
    let skipped_series = cur.u32("skipped")? as usize;
    let n = cur.u32("window count")? as usize;
    let mut windows = Vec::with_capacity(n);
    for _ in 0..n {
        let label = Label::from_i16(cur.i16("label")?)?;
        let split = Split::from_u8(cur.u8("split")?)?;
        let mut data = Vec::with_capacity(t * f);
        for _ in 0..t * f {
            data.push(cur.f32("sample")?);
        }
        windows.push(Window { data, label, split });
    }
    Ok(WindowedDataset {
        windows,
        window_len: t,
        window_len_s,
        sample_rate_hz,
        omega,
        stride,
        skipped_series,
    })
}

/// CSV ingestion adapter: one `I,Q` pair per row, one file per cut.
pub fn load_csv_series(path: &Path, label: Label) -> Result<IQSeries, DataError> {
    let mut text = String::new();
    std::fs::File::open(path)?.read_to_string(&mut text)?;
    let mut i_samples = Vec::new();
    let mut q_samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',');
        let parse = |v: Option<&str>| -> Result<f64, DataError> {
            v.ok_or_else(|| DataError::Parse(format!("line {}: expected I,Q", lineno + 1)))?
                .trim()
                .parse()
                .map_err(|e| DataError::Parse(format!("line {}: {}", lineno + 1, e)))
        };
        i_samples.push(parse(parts.next())?);
        q_samples.push(parse(parts.next())?);
    }
    Ok(IQSeries {
        i_samples,
        q_samples,
        sample_rate_hz: SAMPLE_RATE_HZ,
        label,
        seed: 0,
    })
}

/// splitmix64, used to derive independent per-series seeds from a master seed.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
