//! `nbm`: simulate SCADA data, train normal behaviour models, raise alarms and
//! score them against failure records.
//!
//! Config precedence: built-in defaults < config file < command-line flags.
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use nbm_core::detection::{
    absolute_sweep, default_quantiles, moving_average, raw_target_scores, save_episodes_csv, threshold_sweep,
    SweepPoint, DEFAULT_MERGE_GAP_S,
};
use nbm_core::evaluation::{pr_curve, save_pr_curve_csv, Coverage, EvalConfig};
use nbm_core::experiment::{
    load_data, regression_csv, run_experiment_to_dir, train_models, write_simulation, DataSource, ExperimentConfig,
    INCOMPLETE_MARKER,
};
use nbm_core::features::ModelName;
use nbm_core::nbm::{compute_residuals, healthy_values, NbmModel, ResidualSeries};
use nbm_core::scada_data::{
    load_failures_csv, load_scada_csv, FailureRecord, FarmDataset, Interval, Timestamp, DEFAULT_RESOLUTION_S,
    IMS_BEARING_TEMP,
};
use nbm_core::simulator::SimConfig;

#[derive(Parser, Debug)]
#[command(name = "nbm", version, about = "Wind turbine normal behaviour models and fault-detection evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic farm: scada.csv, failures.csv and a manifest.
    Simulate(SimulateArgs),
    /// Train normal behaviour models and report regression metrics.
    Train(TrainArgs),
    /// Threshold residuals (or raw temperatures) into alarm episodes.
    Detect(DetectArgs),
    /// Score alarm episodes against failure records.
    Evaluate(EvaluateArgs),
    /// Train all four models, sweep thresholds, evaluate and report.
    RunExperiment(RunArgs),
    /// Print a default configuration file.
    DefaultConfig(DefaultConfigArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scenario TOML; the built-in default scenario when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

/// Flags shared by commands that read an experiment config.
#[derive(Args, Debug)]
struct ExperimentFlags {
    /// Experiment TOML; the built-in simulated experiment when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// SCADA CSV; replaces the config's data source (requires --failures).
    #[arg(long, requires = "failures")]
    scada: Option<PathBuf>,
    #[arg(long, requires = "scada")]
    failures: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    experiment: ExperimentFlags,
    /// Models to train; all four when omitted.
    #[arg(long = "model", value_name = "NAME")]
    models: Vec<ModelName>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    experiment: ExperimentFlags,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("scorer").required(true).args(["model", "baseline"])))]
struct DetectArgs {
    /// Trained model JSON.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Threshold the raw IMS bearing temperature instead of residuals.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    scada: PathBuf,
    /// Failure records, used to keep the quantile reference healthy.
    #[arg(long)]
    failures: Option<PathBuf>,
    /// Absolute thresholds in °C (repeatable).
    #[arg(long = "threshold", conflicts_with = "quantiles")]
    thresholds: Vec<f64>,
    /// Quantiles of the healthy reference (repeatable); a default grid when
    /// neither thresholds nor quantiles are given.
    #[arg(long = "quantile")]
    quantiles: Vec<f64>,
    /// Period to score, `START/END` in RFC 3339; defaults to the model's test
    /// period, or all data for the baseline.
    #[arg(long, value_parser = parse_interval)]
    score_period: Option<Interval>,
    /// Period supplying the quantile reference; defaults to the model's
    /// training period.
    #[arg(long, value_parser = parse_interval)]
    reference_period: Option<Interval>,
    #[arg(long, default_value_t = DEFAULT_MERGE_GAP_S)]
    merge_gap_s: i64,
    /// Trailing moving-average length applied before thresholding.
    #[arg(long, default_value_t = 0)]
    smoothing_window: usize,
    /// Days before a failure excluded from the healthy reference.
    #[arg(long, default_value_t = EvalConfig::default().window_days)]
    window_days: i64,
    #[arg(long, default_value_t = DEFAULT_RESOLUTION_S)]
    resolution_s: i64,
    /// Episodes CSV to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    episodes: PathBuf,
    #[arg(long)]
    failures: PathBuf,
    /// SCADA CSV whose per-turbine span defines data coverage.
    #[arg(long)]
    scada: PathBuf,
    #[arg(long, default_value_t = EvalConfig::default().window_days)]
    window_days: i64,
    #[arg(long, default_value_t = EvalConfig::default().lead_days)]
    lead_days: i64,
    #[arg(long, default_value_t = EvalConfig::default().blackout_days)]
    blackout_days: i64,
    #[arg(long, default_value_t = DEFAULT_RESOLUTION_S)]
    resolution_s: i64,
    /// Output directory for counts.toml and pr_curve.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DefaultConfigArgs {
    /// Print the simulator scenario instead of the experiment config.
    #[arg(long)]
    scenario: bool,
}

fn parse_interval(s: &str) -> Result<Interval, String> {
    let (a, b) = s.split_once('/').ok_or_else(|| format!("expected START/END, got `{s}`"))?;
    let start: Timestamp = a.parse()?;
    let end: Timestamp = b.parse()?;
    Interval::new(start, end).map_err(|e| e.to_string())
}

/// Errors in flag combinations that clap cannot express.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.chain().find_map(|e| e.downcast_ref::<nbm_core::Error>()) {
        Some(e) if e.is_data_error() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Detect(a) => detect(a),
        Command::Evaluate(a) => evaluate(a),
        Command::RunExperiment(a) => run_experiment(a),
        Command::DefaultConfig(a) => {
            let text = if a.scenario {
                SimConfig::default().to_toml()?
            } else {
                ExperimentConfig::simulated_default("runs/default").to_toml()?
            };
            print!("{text}");
            Ok(())
        }
    }
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.scenario {
        Some(path) => SimConfig::load(path)?,
        None => SimConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let manifest = write_simulation(&cfg, &a.out)?;
    println!(
        "wrote {} SCADA rows for {} turbines and {} failures to {} (seed {}, params {})",
        manifest.scada_rows,
        manifest.n_turbines,
        manifest.failure_rows,
        a.out.display(),
        manifest.seed,
        &manifest.params_sha256[..12]
    );
    Ok(())
}

fn experiment_config(flags: &ExperimentFlags) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &flags.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::simulated_default("runs/default"),
    };
    if let (Some(scada), Some(failures)) = (&flags.scada, &flags.failures) {
        cfg.data = DataSource::Files {
            scada: scada.clone(),
            failures: failures.clone(),
            resolution_s: DEFAULT_RESOLUTION_S,
        };
    }
    if let Some(out) = &flags.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = experiment_config(&a.experiment)?;
    let names = if a.models.is_empty() {
        ModelName::ALL.to_vec()
    } else {
        a.models.clone()
    };
    let (d, failures) = load_data(&cfg.data)?;
    let trained = train_models(&cfg, &d, &failures, &names)?;
    let dir = &cfg.output_dir;
    let models_dir = dir.join("models");
    std::fs::create_dir_all(&models_dir).with_context(|| format!("creating {}", models_dir.display()))?;
    write(&dir.join("config.toml"), &cfg.to_toml()?)?;
    for (model, _) in &trained {
        model.save(models_dir.join(format!("{}.json", model.config.name)))?;
    }
    let table = regression_csv(trained.iter().map(|(m, r)| (m.config.name, r)));
    write(&dir.join("metrics.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn restrict(d: &FarmDataset, period: Option<Interval>) -> FarmDataset {
    match period {
        Some(iv) => d.retain_rows(|_, t| iv.contains(t)),
        None => d.clone(),
    }
}

fn smooth(series: Vec<ResidualSeries>, window: usize) -> Vec<ResidualSeries> {
    series.iter().map(|r| moving_average(r, window)).collect()
}

fn detect(a: DetectArgs) -> anyhow::Result<()> {
    let d = load_scada_csv(&a.scada, a.resolution_s)?;
    let failures: Vec<FailureRecord> = match &a.failures {
        Some(p) => load_failures_csv(p)?,
        None => Vec::new(),
    };
    let model = a.model.as_ref().map(NbmModel::load).transpose()?;
    let score_period = a.score_period.or(model.as_ref().map(|m| m.metadata.split.test));
    let reference_period = a.reference_period.or(model.as_ref().map(|m| m.metadata.split.train));
    let exclusion = model.as_ref().map(|m| m.metadata.exclusion).unwrap_or_default();

    let scores_for = |data: &FarmDataset| -> anyhow::Result<Vec<ResidualSeries>> {
        Ok(match &model {
            Some(m) => compute_residuals(m, data)?,
            None => raw_target_scores(data, IMS_BEARING_TEMP)?,
        })
    };
    let scores = smooth(scores_for(&restrict(&d, score_period))?, a.smoothing_window);

    let sweep: Vec<SweepPoint> = if !a.thresholds.is_empty() {
        absolute_sweep(&scores, &a.thresholds, a.merge_gap_s)
    } else {
        let Some(reference_period) = reference_period else {
            return Err(UsageError("quantile thresholds with --baseline need --reference-period".into()).into());
        };
        let reference = healthy_values(
            &scores_for(&restrict(&d, Some(reference_period)))?,
            &failures,
            a.window_days,
            exclusion,
        );
        let quantiles = if a.quantiles.is_empty() {
            default_quantiles()
        } else {
            a.quantiles.clone()
        };
        threshold_sweep(&scores, &reference, &quantiles, a.merge_gap_s)?
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    save_episodes_csv(&sweep, &a.out)?;
    let total: usize = sweep.iter().map(SweepPoint::n_episodes).sum();
    println!("wrote {total} episodes over {} thresholds to {}", sweep.len(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let cfg = EvalConfig {
        window_days: a.window_days,
        lead_days: a.lead_days,
        blackout_days: a.blackout_days,
    };
    cfg.validate()?;
    let sweep = nbm_core::detection::load_episodes_csv(&a.episodes)?;
    if sweep.is_empty() {
        bail!(nbm_core::Error::Empty(format!("{} holds no episodes", a.episodes.display())));
    }
    let failures = load_failures_csv(&a.failures)?;
    let d = load_scada_csv(&a.scada, a.resolution_s)?;
    let coverage = Coverage::from_dataset(&d);
    let curve = pr_curve(&sweep, &failures, &cfg, &coverage)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    #[derive(serde::Serialize)]
    struct Counts<'a> {
        evaluation: EvalConfig,
        failures: usize,
        points: &'a [nbm_core::evaluation::PrPoint],
    }
    let counts = Counts {
        evaluation: cfg,
        failures: failures.len(),
        points: &curve.points,
    };
    write(&a.out.join("counts.toml"), &toml::to_string(&counts).context("serializing counts")?)?;
    save_pr_curve_csv(&curve, a.out.join("pr_curve.csv"))?;
    let auprc = nbm_core::evaluation::auprc(&curve)
        .map(|v| format!("{v:.4}"))
        .unwrap_or_else(|_| "undefined".into());
    println!("{} thresholds, {} failures, AUPRC {auprc}", curve.points.len(), failures.len());
    Ok(())
}

fn run_experiment(a: RunArgs) -> anyhow::Result<()> {
    let cfg = experiment_config(&a.experiment)?;
    let result = run_experiment_to_dir(&cfg).with_context(|| {
        format!(
            "experiment failed; partial outputs in {} are flagged by {INCOMPLETE_MARKER}",
            cfg.output_dir.display()
        )
    })?;
    for m in &result.models {
        let auprc = m.detection.auprc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into());
        println!(
            "{:6} test MAE {:.4} RMSE {:.4} AUPRC {auprc}",
            m.model.config.name, m.regression.test.mae, m.regression.test.rmse
        );
    }
    let auprc = result.baseline.auprc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into());
    println!("baseline AUPRC {auprc}");
    println!("outputs in {}", cfg.output_dir.display());
    Ok(())
}
