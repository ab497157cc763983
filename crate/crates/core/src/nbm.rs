//! Normal behaviour model protocol: split, exclude fault periods, train one
//! regressor per feature configuration, and turn predictions into residuals.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{build_design_matrix, DesignMatrix, FeatureConfig};
use crate::gbdt::{fit, regression_metrics, GbdtModel, RegressionMetrics, TrainParams};
use crate::scada_data::{
    exclude_fault_periods, split_by_period, DatasetSplit, FailureRecord, FarmDataset, SplitIntervals, Timestamp,
};

/// Days removed around each failure before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExclusionSettings {
    pub before_days: i64,
    pub after_days: i64,
}

impl Default for ExclusionSettings {
    fn default() -> Self {
        ExclusionSettings {
            before_days: 60,
            after_days: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One model over all turbines.
    #[default]
    Pooled,
    PerTurbine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub split: SplitIntervals,
    pub exclusion: ExclusionSettings,
    pub params: TrainParams,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub split: SplitIntervals,
    pub exclusion: ExclusionSettings,
    pub params: TrainParams,
    pub pooling: Pooling,
    pub seed: u64,
    /// SHA-256 over the input farm's timestamps and values.
    pub data_fingerprint: String,
    pub train_rows: usize,
    pub validation_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSet {
    Pooled(GbdtModel),
    PerTurbine(BTreeMap<String, GbdtModel>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbmModel {
    pub config: FeatureConfig,
    pub models: ModelSet,
    pub metadata: TrainingMetadata,
}

/// Observed minus predicted target, per turbine.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSeries {
    pub turbine_id: String,
    pub timestamps: Vec<Timestamp>,
    pub residuals: Vec<f64>,
}

impl ResidualSeries {
    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub train: RegressionMetrics,
    pub test: RegressionMetrics,
    pub train_samples: usize,
    pub test_samples: usize,
}

pub fn fingerprint(d: &FarmDataset) -> String {
    let mut hasher = Sha256::new();
    for t in d.turbines() {
        hasher.update(t.turbine_id().as_bytes());
        hasher.update([0u8]);
        for ts in t.timestamps() {
            hasher.update(ts.0.to_le_bytes());
        }
        for (name, values) in t.channels() {
            hasher.update(name.as_bytes());
            for v in values {
                match v {
                    Some(x) => hasher.update(x.to_bits().to_le_bytes()),
                    None => hasher.update([0xff; 8]),
                }
            }
        }
    }
    hex::encode(hasher.finalize())
}

fn fit_models(cfg: &FeatureConfig, train: &DesignMatrix, valid: &DesignMatrix, spec: &TrainSpec) -> Result<ModelSet> {
    if train.is_empty() {
        return Err(Error::Empty(format!("{}: training matrix is empty after fault exclusion", cfg.name)));
    }
    match spec.pooling {
        Pooling::Pooled => Ok(ModelSet::Pooled(fit(train, valid, &spec.params)?)),
        Pooling::PerTurbine => {
            let ids: Vec<&str> = train.turbine_ranges().into_iter().map(|(id, _)| id).collect();
            let models = ids
                .par_iter()
                .map(|id| {
                    let t = train.select(|tid, _| tid == *id);
                    let v = valid.select(|tid, _| tid == *id);
                    fit(&t, &v, &spec.params).map(|m| (id.to_string(), m))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok(ModelSet::PerTurbine(models))
        }
    }
}

/// Splits the farm, removes fault envelopes from the training and validation
/// periods, and fits the regressor(s) for `cfg`.
pub fn train_nbm(d: &FarmDataset, failures: &[FailureRecord], cfg: &FeatureConfig, spec: &TrainSpec) -> Result<NbmModel> {
    cfg.validate()?;
    spec.params.validate()?;
    let split = split_by_period(d, spec.split.train, spec.split.validation, spec.split.test)?;
    let ex = spec.exclusion;
    let train = exclude_fault_periods(&split.train, failures, ex.before_days, ex.after_days)?;
    let valid = exclude_fault_periods(&split.validation, failures, ex.before_days, ex.after_days)?;
    let train_m = build_design_matrix(&train, cfg)?;
    let valid_m = build_design_matrix(&valid, cfg)?;
    let models = fit_models(cfg, &train_m, &valid_m, spec)?;
    Ok(NbmModel {
        config: cfg.clone(),
        models,
        metadata: TrainingMetadata {
            split: spec.split,
            exclusion: spec.exclusion,
            params: spec.params,
            pooling: spec.pooling,
            seed: spec.params.seed,
            data_fingerprint: fingerprint(d),
            train_rows: train_m.n_rows(),
            validation_rows: valid_m.n_rows(),
        },
    })
}

impl NbmModel {
    pub fn predict(&self, m: &DesignMatrix) -> Result<Vec<f64>> {
        match &self.models {
            ModelSet::Pooled(model) => model.predict(m),
            ModelSet::PerTurbine(models) => {
                let mut out = Vec::with_capacity(m.n_rows());
                for (id, range) in m.turbine_ranges() {
                    let model = models
                        .get(id)
                        .ok_or_else(|| Error::InvalidConfig(format!("no per-turbine model for {id}")))?;
                    out.extend(model.predict(&m.slice(range))?);
                }
                Ok(out)
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::ModelFormat(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::ModelFormat(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

fn residuals_from_matrix(model: &NbmModel, m: &DesignMatrix) -> Result<Vec<ResidualSeries>> {
    let pred = model.predict(m)?;
    Ok(m.turbine_ranges()
        .into_iter()
        .map(|(id, range)| ResidualSeries {
            turbine_id: id.to_string(),
            timestamps: m.row_times()[range.clone()].to_vec(),
            residuals: range.map(|i| m.target()[i] - pred[i]).collect(),
        })
        .collect())
}

/// Residuals at every complete-case row of `d`, one series per turbine
/// (turbines without complete rows get an empty series).
pub fn compute_residuals(model: &NbmModel, d: &FarmDataset) -> Result<Vec<ResidualSeries>> {
    let m = build_design_matrix(d, &model.config)?;
    let mut by_id: BTreeMap<String, ResidualSeries> = residuals_from_matrix(model, &m)?
        .into_iter()
        .map(|r| (r.turbine_id.clone(), r))
        .collect();
    Ok(d.turbines()
        .iter()
        .map(|t| {
            by_id.remove(t.turbine_id()).unwrap_or_else(|| ResidualSeries {
                turbine_id: t.turbine_id().to_string(),
                timestamps: Vec::new(),
                residuals: Vec::new(),
            })
        })
        .collect())
}

/// True when `t` on `turbine_id` is away from every failure: outside the
/// pre-failure fault window `[F - window_days, F]` and outside the exclusion
/// envelope `[F - before_days, F + after_days]`.
pub fn is_healthy(
    failures: &[FailureRecord],
    turbine_id: &str,
    t: Timestamp,
    window_days: i64,
    exclusion: ExclusionSettings,
) -> bool {
    failures.iter().filter(|f| f.turbine_id == turbine_id).all(|f| {
        let start = f.failure_time.plus_days(-window_days.max(exclusion.before_days));
        let end = f.failure_time.plus_days(exclusion.after_days.max(0));
        t < start || t > end
    })
}

/// Residual values at healthy timestamps, flattened in series order.
pub fn healthy_values(
    residuals: &[ResidualSeries],
    failures: &[FailureRecord],
    window_days: i64,
    exclusion: ExclusionSettings,
) -> Vec<f64> {
    residuals
        .iter()
        .flat_map(|r| {
            r.timestamps
                .iter()
                .zip(&r.residuals)
                .filter(|(t, _)| is_healthy(failures, &r.turbine_id, **t, window_days, exclusion))
                .map(|(_, v)| *v)
        })
        .collect()
}

/// MAE and RMSE of residual values; the sign convention does not matter.
pub fn residual_metrics(values: &[f64]) -> Result<RegressionMetrics> {
    let zeros = vec![0.0; values.len()];
    regression_metrics(&zeros, values)
}

/// Regression report from precomputed train and test residuals, restricted
/// to healthy samples.
pub fn regression_report(
    train: &[ResidualSeries],
    test: &[ResidualSeries],
    failures: &[FailureRecord],
    window_days: i64,
    exclusion: ExclusionSettings,
    label: &str,
) -> Result<RegressionReport> {
    let test = healthy_values(test, failures, window_days, exclusion);
    if test.is_empty() {
        return Err(Error::NoHealthySamples(format!("{label} test set")));
    }
    let train = healthy_values(train, failures, window_days, exclusion);
    if train.is_empty() {
        return Err(Error::NoHealthySamples(format!("{label} train set")));
    }
    Ok(RegressionReport {
        train: residual_metrics(&train)?,
        test: residual_metrics(&test)?,
        train_samples: train.len(),
        test_samples: test.len(),
    })
}

/// MAE/RMSE on healthy train and test samples, pooled over turbines.
pub fn evaluate_regression(
    model: &NbmModel,
    split: &DatasetSplit,
    failures: &[FailureRecord],
    window_days: i64,
) -> Result<RegressionReport> {
    regression_report(
        &compute_residuals(model, &split.train)?,
        &compute_residuals(model, &split.test)?,
        failures,
        window_days,
        model.metadata.exclusion,
        model.config.name.as_str(),
    )
}

/// Healthy residuals over a dataset, flattened in turbine/time order. Used as
/// the reference distribution for quantile thresholds.
pub fn healthy_residuals(
    model: &NbmModel,
    d: &FarmDataset,
    failures: &[FailureRecord],
    window_days: i64,
) -> Result<Vec<f64>> {
    Ok(healthy_values(
        &compute_residuals(model, d)?,
        failures,
        window_days,
        model.metadata.exclusion,
    ))
}
