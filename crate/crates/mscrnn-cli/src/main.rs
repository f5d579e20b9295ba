//! `mscrnn`: command-line frontend for the cascade toolkit.
//!
//! One subcommand per stage of the pipeline: gen-data, train, eval, quantize,
//! infer, bench, calibrate-baseline. Every report is printed as a table and
//! written as JSON; every output file is written atomically. Exit codes:
//! 0 ok, 2 config error, 3 data error, 4 numeric failure.

mod config;

use clap::{Parser, Subcommand, ValueEnum};
use config::RunConfig;
use mscrnn::baseline::{
    calibrate_threshold, unwrap_phase, window_displacements, BaselineError, DetectorConfig,
};
use mscrnn::cascade::{msc_infer, train_msc, CascadeError};
use mscrnn::cost::{duty_cycle, expected_cost, CostReport, EarlyExitStats};
use mscrnn::emi::{dataset_instances, split_instances, EmiError, InstanceSet};
use mscrnn::format::{load_model, save_model, write_atomic, ModelMeta};
use mscrnn::metrics::{evaluate, evaluate_quant, EvalMetrics};
use mscrnn::quant::{agreement_report, quant_msc_infer, quantize_model, QuantError};
use mscrnn::radar::{
    gen_clutter, gen_source, load_dataset, save_dataset, splitmix64, window_dataset, DataError,
    IQSeries, Label, SourceKind, Split, WindowedDataset,
};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Hardware-study reference numbers shipped with the toolkit so `eval` can
/// print synthetic results next to them. Synthetic data is not directly
/// comparable; these are context, not a target the code can reproduce.
const REFERENCE_ACCURACY: f64 = 0.972;
const REFERENCE_CLUTTER_RECALL: f64 = 1.0;
const REFERENCE_HUMAN_RECALL: f64 = 0.92;

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn class(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidArg(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EmiError> for CliError {
    fn from(e: EmiError) -> Self {
        match e {
            EmiError::InvalidArg(_) => CliError::Config(e.to_string()),
            EmiError::NoSourceWindows => CliError::Data(e.to_string()),
            EmiError::Numerics(_) | EmiError::NonFiniteLoss { .. } => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

impl From<CascadeError> for CliError {
    fn from(e: CascadeError) -> Self {
        match e {
            CascadeError::InvalidArg(_) => CliError::Config(e.to_string()),
            CascadeError::NoSourceWindows => CliError::Data(e.to_string()),
            CascadeError::Lower(inner) => inner.into(),
            CascadeError::Numerics(_) | CascadeError::NonFiniteLoss { .. } => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

impl From<QuantError> for CliError {
    fn from(e: QuantError) -> Self {
        match e {
            QuantError::ArchMismatch(_) => CliError::Config(e.to_string()),
            QuantError::EmptyDataset => CliError::Data(e.to_string()),
            QuantError::Cascade(inner) => inner.into(),
            QuantError::NonFinite | QuantError::Overflow => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::InvalidArg(_) => CliError::Config(e.to_string()),
            BaselineError::TooFewWindows { .. } | BaselineError::DegenerateTail => {
                CliError::Data(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "mscrnn",
    about = "Cascaded recurrent radar classifiers: data synthesis, training, quantized inference",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn to_split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labeled I/Q window dataset from a run config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output dataset file (.mscr).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the two-tier cascade on the train split of a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output model file (.mscm); loss history lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model on one split: accuracy, per-class recall, confusion.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Run the integer engine from the model's quantized section.
        #[arg(long)]
        quantized: bool,
        /// Metrics document destination (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add a Q15 quantized section to a model file.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset for the float/integer agreement report (test split).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-window decisions with full inference traces.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(long)]
        quantized: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic FLOP cost of a model, optionally refined by measured traces.
    Bench {
        #[arg(long)]
        model: PathBuf,
        /// Assumed fraction of clutter windows in the deployment stream.
        #[arg(long, default_value_t = 0.97)]
        clutter_fraction: f64,
        /// Device throughput (MFLOP/s) for the duty-cycle estimate.
        #[arg(long, default_value_t = 10.0)]
        device_mflops: f64,
        /// Measure early-exit statistics on this dataset's test split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the phase-unwrap detector threshold on clutter windows.
    CalibrateBaseline {
        #[arg(long)]
        data: PathBuf,
        /// Target false-alarm rate, events per second.
        #[arg(long, default_value_t = 1.0 / 3600.0)]
        target_fa_per_s: f64,
        /// Detector window length in seconds.
        #[arg(long, default_value_t = 0.5)]
        window_len_s: f64,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {}", path.display(), e)))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("config {}: {}", path.display(), e)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::Numeric(format!("serialization failed: {}", e)))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

/// Resolved-config sidecar: `<out>.config.json` next to the primary artifact.
fn emit_resolved_config(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let mut p = out.as_os_str().to_owned();
    p.push(".config.json");
    write_json(Path::new(&p), cfg)
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

fn load_instances(
    path: &Path,
    split: Option<Split>,
) -> Result<(WindowedDataset, Vec<InstanceSet>), CliError> {
    let ds = load_dataset(path)?;
    let sets = match split {
        Some(s) => split_instances(&ds, s)?,
        None => dataset_instances(&ds)?,
    };
    if sets.is_empty() {
        return Err(CliError::Data(format!(
            "no windows in requested split of {}",
            path.display()
        )));
    }
    Ok((ds, sets))
}

fn cmd_gen_data(config: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let d = &cfg.data;
    let mut seed_state = cfg.seed ^ 0xD474_5EED_0000_0000;
    let mut series: Vec<IQSeries> = Vec::new();
    for _ in 0..d.n_clutter_series {
        series.push(gen_clutter(
            d.series_duration_s,
            splitmix64(&mut seed_state),
            &d.gen,
        )?);
    }
    for _ in 0..d.n_human_series {
        series.push(gen_source(
            SourceKind::Human,
            d.series_duration_s,
            splitmix64(&mut seed_state),
            &d.gen,
        )?);
    }
    for _ in 0..d.n_nonhuman_series {
        series.push(gen_source(
            SourceKind::NonHuman,
            d.series_duration_s,
            splitmix64(&mut seed_state),
            &d.gen,
        )?);
    }
    let ds = window_dataset(
        &series,
        d.window_len_s,
        d.split,
        cfg.train.lower.omega,
        cfg.train.lower.stride,
        cfg.seed ^ 0x5BA1_1755,
    )?;
    save_dataset(&ds, out)?;
    emit_resolved_config(out, &cfg)?;
    let count = |s| ds.split_windows(s).count();
    println!(
        "wrote {}: {} windows ({} train / {} val / {} test), {} samples each",
        out.display(),
        ds.windows.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        ds.window_len
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    history: mscrnn::cascade::MscHistory,
    final_train_metrics: EvalMetrics,
}

fn cmd_train(config: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let (ds, train_sets) = load_instances(data, Some(Split::Train))?;
    if ds.omega != cfg.train.lower.omega || ds.stride != cfg.train.lower.stride {
        return Err(CliError::Config(format!(
            "dataset was cut with omega={} stride={}, config says omega={} stride={}",
            ds.omega, ds.stride, cfg.train.lower.omega, cfg.train.lower.stride
        )));
    }
    let (model, history) = train_msc(&train_sets, &cfg.train, cfg.seed)?;
    let final_train_metrics = evaluate(&model, &train_sets)?;
    let meta = ModelMeta::from_model(&model, ds.omega, ds.stride, ds.window_len);
    save_model(out, &model, &meta, None)?;
    write_json(
        &sidecar(out, ".history.json"),
        &TrainReport {
            history,
            final_train_metrics: final_train_metrics.clone(),
        },
    )?;
    emit_resolved_config(out, &cfg)?;
    println!("wrote {}", out.display());
    print!("{}", final_train_metrics.render_table());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    split: String,
    quantized: bool,
    metrics: EvalMetrics,
    /// Field-study numbers for side-by-side context (different data; the
    /// synthetic metrics above are not expected to match them).
    reference: ReferenceResults,
}

#[derive(Serialize)]
struct ReferenceResults {
    accuracy: f64,
    clutter_recall: f64,
    human_recall: f64,
}

fn cmd_eval(
    model_path: &Path,
    data: &Path,
    split: SplitArg,
    quantized: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (model, _meta, quant) = load_model(model_path)?;
    let (_ds, sets) = load_instances(data, split.to_split())?;
    let metrics = if quantized {
        let q = quant.ok_or_else(|| {
            CliError::Config(format!(
                "{} has no quantized section (run `mscrnn quantize` first)",
                model_path.display()
            ))
        })?;
        evaluate_quant(&q, &sets)?
    } else {
        evaluate(&model, &sets)?
    };
    print!("{}", metrics.render_table());
    println!(
        "reference (field-collected dataset, for context): accuracy {:.3}  clutter recall {:.3}  human recall {:.3}",
        REFERENCE_ACCURACY, REFERENCE_CLUTTER_RECALL, REFERENCE_HUMAN_RECALL
    );
    let report = EvalReport {
        split: format!("{:?}", split).to_lowercase(),
        quantized,
        metrics,
        reference: ReferenceResults {
            accuracy: REFERENCE_ACCURACY,
            clutter_recall: REFERENCE_CLUTTER_RECALL,
            human_recall: REFERENCE_HUMAN_RECALL,
        },
    };
    if let Some(out) = out {
        write_json(out, &report)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_quantize(model_path: &Path, out: &Path, data: Option<&Path>) -> Result<(), CliError> {
    let (model, meta, _old_quant) = load_model(model_path)?;
    let q = quantize_model(&model)?;
    save_model(out, &model, &meta, Some(&q))?;
    println!("wrote {} (quantized section added)", out.display());
    if let Some(data) = data {
        let (_ds, sets) = load_instances(data, Some(Split::Test))?;
        let report = agreement_report(&model, &q, &sets)?;
        println!(
            "agreement over {} windows: labels {:.4}, lower decisions {:.4}, max hidden deviation {:.3e}",
            report.n_windows,
            report.label_agreement,
            report.lower_decision_agreement,
            report.max_hidden_deviation
        );
        let p = sidecar(out, ".agreement.json");
        write_json(&p, &report)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct InferRecord {
    window: usize,
    true_label: String,
    trace: mscrnn::cascade::InferenceTrace,
}

fn cmd_infer(
    model_path: &Path,
    data: &Path,
    split: SplitArg,
    quantized: bool,
    out: &Path,
) -> Result<(), CliError> {
    let (model, _meta, quant) = load_model(model_path)?;
    let (_ds, sets) = load_instances(data, split.to_split())?;
    let q = if quantized {
        Some(quant.ok_or_else(|| {
            CliError::Config(format!(
                "{} has no quantized section (run `mscrnn quantize` first)",
                model_path.display()
            ))
        })?)
    } else {
        None
    };
    let mut records = Vec::with_capacity(sets.len());
    for set in &sets {
        let trace = match &q {
            Some(q) => quant_msc_infer(q, &set.instances)?,
            None => msc_infer(&model, &set.instances)?,
        };
        records.push(InferRecord {
            window: set.origin,
            true_label: set.window_label.name().to_string(),
            trace,
        });
    }
    let n_source = records
        .iter()
        .filter(|r| !r.trace.decision.is_clutter())
        .count();
    write_json(out, &records)?;
    println!(
        "wrote {}: {} windows, {} source decisions, {} clutter",
        out.display(),
        records.len(),
        n_source,
        records.len() - n_source
    );
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    report: CostReport,
    device_mflops: f64,
    window_period_s: f64,
    duty_cycle: f64,
}

fn render_cost_table(b: &BenchReport) -> String {
    let r = &b.report;
    let mut s = String::new();
    s.push_str(&format!(
        "{:<34} {:>12}\n",
        "lower tier, per instance",
        r.flops_lower_per_instance
    ));
    s.push_str(&format!(
        "{:<34} {:>12}\n",
        "instances per window", r.instances_per_window
    ));
    s.push_str(&format!(
        "{:<34} {:>12}\n",
        "lower tier, full window",
        r.lower_only_flops_per_window
    ));
    s.push_str(&format!(
        "{:<34} {:>12}\n",
        "upper tier, per invocation",
        r.flops_upper_per_window
    ));
    s.push_str(&format!(
        "{:<34} {:>12.0}\n",
        format!("expected per window (c={})", r.clutter_fraction),
        r.expected_flops_per_window
    ));
    s.push_str(&format!(
        "{:<34} {:>12}\n",
        "monolithic single-tier equivalent",
        r.monolithic_flops_per_window
    ));
    if let Some(e) = &r.early_exit {
        s.push_str(&format!(
            "{:<34} {:>12.2}\n",
            "measured mean instances consumed",
            e.mean_instances_consumed
        ));
        s.push_str(&format!(
            "{:<34} {:>12.2}\n",
            "measured mean deferred instances",
            e.mean_deferred_instances
        ));
    }
    s.push_str(&format!(
        "{:<34} {:>12.3e}\n",
        format!("duty cycle at {} MFLOP/s", b.device_mflops),
        b.duty_cycle
    ));
    s
}

fn cmd_bench(
    model_path: &Path,
    clutter_fraction: f64,
    device_mflops: f64,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (model, meta, _quant) = load_model(model_path)?;
    if meta.window_len < meta.omega || (meta.window_len - meta.omega) % meta.stride != 0 {
        return Err(CliError::Config(format!(
            "model metadata has incompatible window/omega/stride {}/{}/{}",
            meta.window_len, meta.omega, meta.stride
        )));
    }
    let n_inst = (meta.window_len - meta.omega) / meta.stride + 1;
    let dims = model.dims(meta.window_len, meta.omega, n_inst);
    let early_exit = match data {
        None => None,
        Some(data) => {
            let (_ds, sets) = load_instances(data, Some(Split::Test))?;
            let mut consumed = 0.0;
            let mut deferred = 0.0;
            let mut invocations = 0usize;
            for set in &sets {
                let t = msc_infer(&model, &set.instances)?;
                consumed += t.lower_instances_consumed as f64;
                if t.upper_invoked {
                    deferred += (n_inst - t.lower_instances_consumed) as f64;
                    invocations += 1;
                }
            }
            Some(EarlyExitStats {
                mean_instances_consumed: consumed / sets.len() as f64,
                mean_deferred_instances: deferred / invocations.max(1) as f64,
            })
        }
    };
    let report = expected_cost(&dims, clutter_fraction, early_exit).map_err(CliError::Config)?;
    let window_period_s = meta.window_len as f64 / mscrnn::radar::SAMPLE_RATE_HZ;
    let bench = BenchReport {
        duty_cycle: duty_cycle(report.expected_flops_per_window, device_mflops, window_period_s),
        device_mflops,
        window_period_s,
        report,
    };
    print!("{}", render_cost_table(&bench));
    if let Some(out) = out {
        write_json(out, &bench)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct ThresholdReport {
    n_clutter_windows: usize,
    target_fa_per_s: f64,
    window_len_s: f64,
    threshold_m: f64,
    m: usize,
    n: usize,
    per_window_threshold_m: f64,
}

fn cmd_calibrate_baseline(
    data: &Path,
    target_fa_per_s: f64,
    window_len_s: f64,
    m: usize,
    n: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let ds = load_dataset(data)?;
    let sub_len = (window_len_s * ds.sample_rate_hz).round() as usize;
    if sub_len == 0 || sub_len > ds.window_len {
        return Err(CliError::Config(format!(
            "detector window of {} s does not fit the dataset's {}-sample windows",
            window_len_s, ds.window_len
        )));
    }
    let mut displacements = Vec::new();
    for w in ds.windows.iter().filter(|w| w.label == Label::Clutter) {
        let series = IQSeries {
            i_samples: w.data.iter().step_by(2).map(|v| *v as f64).collect(),
            q_samples: w.data.iter().skip(1).step_by(2).map(|v| *v as f64).collect(),
            sample_rate_hz: ds.sample_rate_hz,
            label: Label::Clutter,
            seed: 0,
        };
        displacements.extend(window_displacements(&unwrap_phase(&series)?, sub_len));
    }
    let threshold_m = calibrate_threshold(&displacements, target_fa_per_s, window_len_s)?;
    let det = DetectorConfig {
        window_len_s,
        threshold_m,
        m,
        n,
    };
    det.validate()?;
    let report = ThresholdReport {
        n_clutter_windows: displacements.len(),
        target_fa_per_s,
        window_len_s,
        threshold_m,
        m,
        n,
        per_window_threshold_m: det.per_window_threshold(),
    };
    println!(
        "calibrated on {} clutter windows: threshold {:.4} m, per-window ({}-of-{}) {:.4} m at {:.3e} FA/s",
        report.n_clutter_windows,
        report.threshold_m,
        m,
        n,
        report.per_window_threshold_m,
        target_fa_per_s
    );
    if let Some(out) = out {
        write_json(out, &report)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("MSCR_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Config(format!("MSCR_THREADS={} is not a thread count", v)))?;
        if n == 0 {
            return Err(CliError::Config("MSCR_THREADS must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {}", e)))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match &cli.command {
        Command::GenData { config, out } => cmd_gen_data(config, out),
        Command::Train { config, data, out } => cmd_train(config, data, out),
        Command::Eval {
            model,
            data,
            split,
            quantized,
            out,
        } => cmd_eval(model, data, *split, *quantized, out.as_deref()),
        Command::Quantize { model, out, data } => cmd_quantize(model, out, data.as_deref()),
        Command::Infer {
            model,
            data,
            split,
            quantized,
            out,
        } => cmd_infer(model, data, *split, *quantized, out),
        Command::Bench {
            model,
            clutter_fraction,
            device_mflops,
            data,
            out,
        } => cmd_bench(
            model,
            *clutter_fraction,
            *device_mflops,
            data.as_deref(),
            out.as_deref(),
        ),
        Command::CalibrateBaseline {
            data,
            target_fa_per_s,
            window_len_s,
            m,
            n,
            out,
        } => cmd_calibrate_baseline(data, *target_fa_per_s, *window_len_s, *m, *n, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.message());
            ExitCode::from(e.code())
        }
    }
}
