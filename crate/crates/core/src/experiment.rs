//! End-to-end experiment: train the four standard models, score the test
//! period, sweep thresholds for each model and for the raw-temperature
//! baseline, and write a self-describing output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detection::{
    default_quantiles, moving_average, raw_target_scores, threshold_sweep, DEFAULT_MERGE_GAP_S,
};
use crate::error::{Error, Result};
use crate::evaluation::{auprc, pr_curve, save_pr_curve_csv, Coverage, EvalConfig, PrCurve};
use crate::features::{standard_configs, ModelName, DEFAULT_LAG_STEPS};
use crate::gbdt::TrainParams;
use crate::nbm::{
    compute_residuals, healthy_values, regression_report, ExclusionSettings, NbmModel, Pooling, RegressionReport,
    ResidualSeries, TrainSpec,
};
use crate::scada_data::{
    load_failures_csv, load_scada_csv, split_by_period, warn_uncovered_failures, FailureRecord, FarmDataset,
    SplitIntervals, DEFAULT_RESOLUTION_S, IMS_BEARING_TEMP,
};
use crate::simulator::{simulate_farm, SimConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generate the farm in memory from a scenario.
    Simulate(SimConfig),
    Files {
        scada: PathBuf,
        failures: PathBuf,
        #[serde(default = "default_resolution")]
        resolution_s: i64,
    },
}

fn default_resolution() -> i64 {
    DEFAULT_RESOLUTION_S
}

fn default_lags() -> Vec<u32> {
    DEFAULT_LAG_STEPS.to_vec()
}

fn default_merge_gap() -> i64 {
    DEFAULT_MERGE_GAP_S
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Overrides the scenario seed and the recorded training seed.
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_lags")]
    pub lag_steps: Vec<u32>,
    #[serde(default = "default_merge_gap")]
    pub merge_gap_s: i64,
    /// Trailing moving-average length applied to scores before thresholding;
    /// 0 or 1 disables it.
    #[serde(default)]
    pub smoothing_window: usize,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default = "default_quantiles")]
    pub quantiles: Vec<f64>,
    pub split: SplitIntervals,
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub exclusion: ExclusionSettings,
    pub data: DataSource,
}

impl ExperimentConfig {
    /// The default simulated scenario: train on 2010, validate on 2011,
    /// test on 2012.
    pub fn simulated_default(output_dir: impl Into<PathBuf>) -> Self {
        let sim = SimConfig::default();
        let year = |y: i32| crate::scada_data::Interval {
            start: year_start(y),
            end: year_start(y + 1),
        };
        ExperimentConfig {
            seed: sim.seed,
            output_dir: output_dir.into(),
            lag_steps: default_lags(),
            merge_gap_s: DEFAULT_MERGE_GAP_S,
            smoothing_window: 0,
            pooling: Pooling::default(),
            quantiles: default_quantiles(),
            split: SplitIntervals {
                train: year(2010),
                validation: year(2011),
                test: year(2012),
            },
            train: TrainParams {
                seed: sim.seed,
                ..TrainParams::default()
            },
            evaluation: EvalConfig::default(),
            exclusion: ExclusionSettings::default(),
            data: DataSource::Simulate(sim),
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Propagates `seed` into the scenario and training parameters.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        if let DataSource::Simulate(sim) = &mut self.data {
            sim.seed = self.seed;
        }
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.train.validate()?;
        self.evaluation.validate()?;
        if self.merge_gap_s < 0 {
            return Err(Error::InvalidConfig("merge_gap_s must be non-negative".into()));
        }
        if self.quantiles.is_empty() {
            return Err(Error::InvalidConfig("quantiles must not be empty".into()));
        }
        if let Some(q) = self.quantiles.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
            return Err(Error::InvalidConfig(format!("quantile {q} must lie strictly between 0 and 1")));
        }
        if self.exclusion.before_days < 0 || self.exclusion.after_days < 0 {
            return Err(Error::InvalidConfig("exclusion lengths must be non-negative".into()));
        }
        if let DataSource::Simulate(sim) = &self.data {
            sim.validate()?;
        }
        standard_configs(&self.lag_steps).map(|_| ())
    }
}

fn year_start(y: i32) -> crate::scada_data::Timestamp {
    let d = chrono::NaiveDate::from_ymd_opt(y, 1, 1).expect("valid year");
    crate::scada_data::Timestamp(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp())
}

/// Farm and failure records named by a data source.
pub fn load_data(source: &DataSource) -> Result<(FarmDataset, Vec<FailureRecord>)> {
    match source {
        DataSource::Simulate(sim) => simulate_farm(sim),
        DataSource::Files {
            scada,
            failures,
            resolution_s,
        } => {
            let d = load_scada_csv(scada, *resolution_s)?;
            let f = load_failures_csv(failures)?;
            warn_uncovered_failures(&d, &f);
            Ok((d, f))
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectorResult {
    pub name: String,
    pub curve: PrCurve,
    /// `None` when fewer than two curve points have both precision and
    /// recall defined.
    pub auprc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelResult {
    pub model: NbmModel,
    pub regression: RegressionReport,
    pub detection: DetectorResult,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub models: Vec<ModelResult>,
    pub baseline: DetectorResult,
    /// Failures scored in the test period.
    pub test_failures: Vec<FailureRecord>,
    pub data_fingerprint: String,
}

impl ExperimentResult {
    pub fn model(&self, name: ModelName) -> Option<&ModelResult> {
        self.models.iter().find(|m| m.model.config.name == name)
    }

    pub fn auprc(&self, name: ModelName) -> Option<f64> {
        self.model(name).and_then(|m| m.detection.auprc)
    }
}

fn smooth(series: Vec<ResidualSeries>, window: usize) -> Vec<ResidualSeries> {
    if window <= 1 {
        return series;
    }
    series.iter().map(|r| moving_average(r, window)).collect()
}

fn detector(
    name: &str,
    scores: &[ResidualSeries],
    reference: &[f64],
    cfg: &ExperimentConfig,
    failures: &[FailureRecord],
    coverage: &Coverage,
) -> Result<DetectorResult> {
    let sweep = threshold_sweep(scores, reference, &cfg.quantiles, cfg.merge_gap_s)?;
    let curve = pr_curve(&sweep, failures, &cfg.evaluation, coverage)?;
    let auprc = auprc(&curve).ok();
    Ok(DetectorResult {
        name: name.to_string(),
        curve,
        auprc,
    })
}

/// Runs the full pipeline on an already loaded farm.
pub fn run_on_data(cfg: &ExperimentConfig, d: &FarmDataset, failures: &[FailureRecord]) -> Result<ExperimentResult> {
    cfg.validate()?;
    let split = split_by_period(d, cfg.split.train, cfg.split.validation, cfg.split.test)?;
    let window_days = cfg.evaluation.window_days;
    let test_failures: Vec<FailureRecord> = failures
        .iter()
        .filter(|f| cfg.split.test.contains(f.failure_time))
        .cloned()
        .collect();
    let coverage = Coverage::from_dataset(&split.test);
    let spec = TrainSpec {
        split: cfg.split,
        exclusion: cfg.exclusion,
        params: cfg.train,
        pooling: cfg.pooling,
    };

    let models = standard_configs(&cfg.lag_steps)?
        .par_iter()
        .map(|fc| -> Result<ModelResult> {
            let model = crate::nbm::train_nbm(d, failures, fc, &spec)?;
            let train_res = compute_residuals(&model, &split.train)?;
            let test_res = compute_residuals(&model, &split.test)?;
            let regression = regression_report(
                &train_res,
                &test_res,
                failures,
                window_days,
                cfg.exclusion,
                fc.name.as_str(),
            )?;
            let reference = healthy_values(&train_res, failures, window_days, cfg.exclusion);
            let scores = smooth(test_res, cfg.smoothing_window);
            let detection = detector(fc.name.as_str(), &scores, &reference, cfg, &test_failures, &coverage)?;
            Ok(ModelResult {
                model,
                regression,
                detection,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let reference = healthy_values(
        &raw_target_scores(&split.train, IMS_BEARING_TEMP)?,
        failures,
        window_days,
        cfg.exclusion,
    );
    if reference.is_empty() {
        return Err(Error::NoHealthySamples("baseline training reference".into()));
    }
    let scores = smooth(raw_target_scores(&split.test, IMS_BEARING_TEMP)?, cfg.smoothing_window);
    let baseline = detector("baseline", &scores, &reference, cfg, &test_failures, &coverage)?;

    Ok(ExperimentResult {
        models,
        baseline,
        test_failures,
        data_fingerprint: crate::nbm::fingerprint(d),
    })
}

/// Trains the named standard models and evaluates them on healthy samples.
pub fn train_models(
    cfg: &ExperimentConfig,
    d: &FarmDataset,
    failures: &[FailureRecord],
    names: &[ModelName],
) -> Result<Vec<(NbmModel, RegressionReport)>> {
    cfg.validate()?;
    let split = split_by_period(d, cfg.split.train, cfg.split.validation, cfg.split.test)?;
    let spec = TrainSpec {
        split: cfg.split,
        exclusion: cfg.exclusion,
        params: cfg.train,
        pooling: cfg.pooling,
    };
    standard_configs(&cfg.lag_steps)?
        .into_par_iter()
        .filter(|fc| names.contains(&fc.name))
        .map(|fc| {
            let model = crate::nbm::train_nbm(d, failures, &fc, &spec)?;
            let report = crate::nbm::evaluate_regression(&model, &split, failures, cfg.evaluation.window_days)?;
            Ok((model, report))
        })
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let (d, failures) = load_data(&cfg.data)?;
    run_on_data(cfg, &d, &failures)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Table of train/test MAE and RMSE, one row per model.
pub fn regression_csv<'a>(rows: impl IntoIterator<Item = (ModelName, &'a RegressionReport)>) -> String {
    let mut s = String::from("model,train_mae,train_rmse,test_mae,test_rmse,train_samples,test_samples\n");
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            name, r.train.mae, r.train.rmse, r.test.mae, r.test.rmse, r.train_samples, r.test_samples
        );
    }
    s
}

pub fn metrics_csv(result: &ExperimentResult) -> String {
    regression_csv(result.models.iter().map(|m| (m.model.config.name, &m.regression)))
}

pub fn auprc_csv(result: &ExperimentResult) -> String {
    let mut s = String::from("detector,auprc\n");
    for d in result.models.iter().map(|m| &m.detection).chain([&result.baseline]) {
        let _ = writeln!(s, "{},{}", d.name, fmt_opt(d.auprc));
    }
    s
}

fn best_point(d: &DetectorResult) -> Option<&crate::evaluation::PrPoint> {
    // highest F1 among points with both values defined; ties keep the lowest threshold
    let f1 = |p: &crate::evaluation::PrPoint| match (p.precision(), p.recall()) {
        (Some(pr), Some(re)) if pr + re > 0.0 => Some(2.0 * pr * re / (pr + re)),
        _ => None,
    };
    d.curve
        .points
        .iter()
        .filter_map(|p| f1(p).map(|v| (v, p)))
        .fold(None, |best: Option<(f64, _)>, (v, p)| match best {
            Some((bv, _)) if bv >= v => best,
            _ => Some((v, p)),
        })
        .map(|(_, p)| p)
}

pub fn report_markdown(cfg: &ExperimentConfig, result: &ExperimentResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# NBM experiment report\n");
    let _ = writeln!(s, "- tool version: {TOOL_VERSION}");
    let _ = writeln!(s, "- seed: {}", cfg.seed);
    let _ = writeln!(s, "- data fingerprint: {}", result.data_fingerprint);
    let _ = writeln!(s, "- test period: {}", cfg.split.test);
    let _ = writeln!(s, "- failures in test period: {}", result.test_failures.len());
    let _ = writeln!(
        s,
        "- prediction window: {} to {} days before failure; merge gap {} s; smoothing window {}\n",
        cfg.evaluation.window_days, cfg.evaluation.lead_days, cfg.merge_gap_s, cfg.smoothing_window
    );
    let _ = writeln!(s, "## Regression (healthy samples)\n");
    let _ = writeln!(s, "| Model | Train MAE | Train RMSE | Test MAE | Test RMSE |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    for m in &result.models {
        let r = &m.regression;
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            m.model.config.name, r.train.mae, r.train.rmse, r.test.mae, r.test.rmse
        );
    }
    let _ = writeln!(s, "\n## Detection\n");
    if result.test_failures.is_empty() {
        let _ = writeln!(
            s,
            "Recall is undefined: the test period contains no failures. AUPRC is undefined for every detector.\n"
        );
    }
    let _ = writeln!(s, "| Detector | AUPRC | Best-F1 threshold | Precision | Recall | TP | FP | FN |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
    let undefined = || "undefined".to_string();
    for d in result.models.iter().map(|m| &m.detection).chain([&result.baseline]) {
        let auprc = d.auprc.map(|v| format!("{v:.4}")).unwrap_or_else(undefined);
        match best_point(d) {
            Some(p) => {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.4} | {:.4} | {:.4} | {} | {} | {} |",
                    d.name,
                    auprc,
                    p.threshold,
                    p.precision().unwrap_or(f64::NAN),
                    p.recall().unwrap_or(f64::NAN),
                    p.counts.tp,
                    p.counts.fp,
                    p.counts.fn_
                );
            }
            None => {
                let _ = writeln!(s, "| {} | {} | n/a | undefined | undefined | | | |", d.name, auprc);
            }
        }
    }
    s
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    tool_version: &'a str,
    seed: u64,
    config_sha256: String,
    data_fingerprint: &'a str,
    files: Vec<String>,
}

/// Writes every artifact of `result` into `dir`.
pub fn write_outputs(cfg: &ExperimentConfig, result: &ExperimentResult, dir: &Path) -> Result<()> {
    let models_dir = dir.join("models");
    std::fs::create_dir_all(&models_dir).map_err(|e| Error::io(&models_dir, e))?;
    let mut files = vec!["config.toml".to_string()];
    let mut put = |name: String, contents: &str| -> Result<()> {
        write_file(&dir.join(&name), contents)?;
        files.push(name);
        Ok(())
    };
    put("metrics.csv".into(), &metrics_csv(result))?;
    put("auprc.csv".into(), &auprc_csv(result))?;
    put("report.md".into(), &report_markdown(cfg, result))?;
    for m in &result.models {
        put(format!("models/{}.json", m.model.config.name), &m.model.to_json()?)?;
    }
    for d in result.models.iter().map(|m| &m.detection).chain([&result.baseline]) {
        let name = format!("pr_{}.csv", d.name);
        save_pr_curve_csv(&d.curve, dir.join(&name))?;
        files.push(name);
    }
    let config_toml = cfg.to_toml()?;
    let manifest = Manifest {
        tool_version: TOOL_VERSION,
        seed: cfg.seed,
        config_sha256: hex::encode(Sha256::digest(config_toml.as_bytes())),
        data_fingerprint: &result.data_fingerprint,
        files,
    };
    let manifest = toml::to_string(&manifest).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    write_file(&dir.join("manifest.toml"), &manifest)
}

/// Runs the experiment and writes its output directory. The resolved config
/// is written first; on failure an `INCOMPLETE` marker holding the error is
/// left next to whatever was written.
pub fn run_experiment_to_dir(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let marker = dir.join(INCOMPLETE_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    write_file(&dir.join("config.toml"), &cfg.to_toml()?)?;
    let outcome = run_experiment(cfg).and_then(|r| write_outputs(cfg, &r, dir).map(|_| r));
    if let Err(e) = &outcome {
        let _ = std::fs::write(&marker, format!("{e}\n"));
    }
    outcome
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationManifest {
    pub tool_version: String,
    pub seed: u64,
    /// SHA-256 of the scenario serialized as TOML.
    pub params_sha256: String,
    pub n_turbines: usize,
    pub scada_rows: usize,
    pub failure_rows: usize,
}

/// Simulates `cfg` and writes `scada.csv`, `failures.csv`, `scenario.toml`
/// and `manifest.toml` into `dir`, creating it if needed.
pub fn write_simulation(cfg: &SimConfig, dir: &Path) -> Result<SimulationManifest> {
    let (d, failures) = simulate_farm(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::scada_data::save_scada_csv(&d, dir.join("scada.csv"))?;
    crate::scada_data::save_failures_csv(&failures, dir.join("failures.csv"))?;
    let scenario = cfg.to_toml()?;
    write_file(&dir.join("scenario.toml"), &scenario)?;
    let manifest = SimulationManifest {
        tool_version: TOOL_VERSION.to_string(),
        seed: cfg.seed,
        params_sha256: hex::encode(Sha256::digest(scenario.as_bytes())),
        n_turbines: cfg.n_turbines,
        scada_rows: d.n_samples(),
        failure_rows: failures.len(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    write_file(&dir.join("manifest.toml"), &text)?;
    Ok(manifest)
}
