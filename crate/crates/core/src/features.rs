//! Feature taxonomy and design-matrix construction for the four model
//! configurations (CNBM, SNBM, ACNBM, ASNBM).

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scada_data::{
    FarmDataset, Timestamp, TurbineSeries, ACTIVE_POWER, AMBIENT_TEMP, HSS_BEARING_TEMP, IMS_BEARING_TEMP,
    PITCH_ANGLE, ROTOR_SPEED, WIND_SPEED,
};

pub const DEFAULT_LAG_STEPS: [u32; 2] = [1, 6];

/// Channels that drive the target with no reverse dependence.
pub const CAUSAL_CHANNELS: [&str; 5] = [ROTOR_SPEED, ACTIVE_POWER, PITCH_ANGLE, WIND_SPEED, AMBIENT_TEMP];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureTaxonomy {
    Causal,
    Simultaneity,
    AutoregressiveTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ModelName {
    Cnbm,
    Snbm,
    Acnbm,
    Asnbm,
}

impl ModelName {
    pub const ALL: [ModelName; 4] = [ModelName::Cnbm, ModelName::Snbm, ModelName::Acnbm, ModelName::Asnbm];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::Cnbm => "CNBM",
            ModelName::Snbm => "SNBM",
            ModelName::Acnbm => "ACNBM",
            ModelName::Asnbm => "ASNBM",
        }
    }

    pub fn is_autoregressive(self) -> bool {
        matches!(self, ModelName::Acnbm | ModelName::Asnbm)
    }

    pub fn has_simultaneity(self) -> bool {
        matches!(self, ModelName::Snbm | ModelName::Asnbm)
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelName::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model `{s}` (expected CNBM, SNBM, ACNBM or ASNBM)")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub channel: String,
    pub taxonomy: FeatureTaxonomy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub name: ModelName,
    pub target: String,
    pub features: Vec<FeatureSpec>,
    pub lag_steps: Vec<u32>,
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let n_simul = self
            .features
            .iter()
            .filter(|f| f.taxonomy == FeatureTaxonomy::Simultaneity)
            .count();
        let has_ar = self
            .features
            .iter()
            .any(|f| f.taxonomy == FeatureTaxonomy::AutoregressiveTarget);
        let bad = |m: &str| Err(Error::InvalidConfig(format!("{}: {m}", self.name)));
        if self.name.is_autoregressive() != !self.lag_steps.is_empty() || self.name.is_autoregressive() != has_ar {
            return bad("lag steps must be present exactly for the autoregressive configurations");
        }
        if self.lag_steps.contains(&0) {
            return bad("lag steps must be positive");
        }
        let expected_simul = usize::from(self.name.has_simultaneity());
        if n_simul != expected_simul {
            return bad("wrong number of simultaneity features");
        }
        for f in &self.features {
            let is_target = f.channel == self.target;
            if is_target != (f.taxonomy == FeatureTaxonomy::AutoregressiveTarget) {
                return bad("only autoregressive entries may reference the target channel");
            }
        }
        Ok(())
    }

    /// Column names in matrix order: non-autoregressive channels in
    /// declaration order, then one column per lag.
    pub fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .features
            .iter()
            .filter(|f| f.taxonomy != FeatureTaxonomy::AutoregressiveTarget)
            .map(|f| f.channel.clone())
            .collect();
        if self
            .features
            .iter()
            .any(|f| f.taxonomy == FeatureTaxonomy::AutoregressiveTarget)
        {
            names.extend(self.lag_steps.iter().map(|k| lag_column_name(&self.target, *k)));
        }
        names
    }

    pub fn channels(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.target.as_str()).chain(self.features.iter().map(|f| f.channel.as_str()))
    }

    pub fn max_lag(&self) -> u32 {
        self.lag_steps.iter().copied().max().unwrap_or(0)
    }
}

pub fn lag_column_name(target: &str, k: u32) -> String {
    format!("{target}_lag{k}")
}

/// The four standard configurations, all targeting the IMS bearing.
pub fn standard_configs(lag_steps: &[u32]) -> Result<Vec<FeatureConfig>> {
    if lag_steps.is_empty() {
        return Err(Error::InvalidConfig("lag_steps must not be empty".into()));
    }
    let mut lags = lag_steps.to_vec();
    lags.sort_unstable();
    lags.dedup();
    let causal: Vec<FeatureSpec> = CAUSAL_CHANNELS
        .iter()
        .map(|c| FeatureSpec {
            channel: c.to_string(),
            taxonomy: FeatureTaxonomy::Causal,
        })
        .collect();
    let simul = FeatureSpec {
        channel: HSS_BEARING_TEMP.to_string(),
        taxonomy: FeatureTaxonomy::Simultaneity,
    };
    let ar = FeatureSpec {
        channel: IMS_BEARING_TEMP.to_string(),
        taxonomy: FeatureTaxonomy::AutoregressiveTarget,
    };
    let make = |name, extra: Vec<FeatureSpec>, lag_steps: Vec<u32>| {
        let mut features = causal.clone();
        features.extend(extra);
        let cfg = FeatureConfig {
            name,
            target: IMS_BEARING_TEMP.to_string(),
            features,
            lag_steps,
        };
        cfg.validate().map(|_| cfg)
    };
    Ok(vec![
        make(ModelName::Cnbm, vec![], vec![])?,
        make(ModelName::Snbm, vec![simul.clone()], vec![])?,
        make(ModelName::Acnbm, vec![ar.clone()], lags.clone())?,
        make(ModelName::Asnbm, vec![simul, ar], lags)?,
    ])
}

/// Complete-case regression matrix. Rows are ordered by turbine then time.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    feature_names: Vec<String>,
    /// row-major, `n_rows * n_features`
    values: Vec<f64>,
    target: Vec<f64>,
    turbine_ids: Vec<String>,
    row_turbine: Vec<u32>,
    row_time: Vec<Timestamp>,
}

impl DesignMatrix {
    /// Builds a single-turbine matrix from explicit rows; handy for tests and
    /// for callers that bring their own features.
    pub fn from_rows(feature_names: Vec<String>, rows: &[Vec<f64>], target: Vec<f64>) -> Result<Self> {
        if rows.len() != target.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                found: target.len(),
            });
        }
        let mut values = Vec::with_capacity(rows.len() * feature_names.len());
        for r in rows {
            if r.len() != feature_names.len() {
                return Err(Error::DimensionMismatch {
                    expected: feature_names.len(),
                    found: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        if values.iter().chain(&target).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("design matrix values must be finite".into()));
        }
        let n = target.len();
        Ok(DesignMatrix {
            feature_names,
            values,
            target,
            turbine_ids: vec![String::new()],
            row_turbine: vec![0; n],
            row_time: (0..n as i64).map(Timestamp).collect(),
        })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_rows(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_features();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n_rows()).map(move |i| self.row(i))
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn row_turbine_id(&self, i: usize) -> &str {
        &self.turbine_ids[self.row_turbine[i] as usize]
    }

    pub fn row_time(&self, i: usize) -> Timestamp {
        self.row_time[i]
    }

    pub fn row_times(&self) -> &[Timestamp] {
        &self.row_time
    }

    /// Keeps rows for which `keep(turbine_id, timestamp)` holds.
    pub fn select(&self, mut keep: impl FnMut(&str, Timestamp) -> bool) -> DesignMatrix {
        let p = self.n_features();
        let mut out = DesignMatrix {
            feature_names: self.feature_names.clone(),
            values: Vec::new(),
            target: Vec::new(),
            turbine_ids: self.turbine_ids.clone(),
            row_turbine: Vec::new(),
            row_time: Vec::new(),
        };
        for i in 0..self.n_rows() {
            if keep(self.row_turbine_id(i), self.row_time[i]) {
                out.values.extend_from_slice(&self.values[i * p..(i + 1) * p]);
                out.target.push(self.target[i]);
                out.row_turbine.push(self.row_turbine[i]);
                out.row_time.push(self.row_time[i]);
            }
        }
        out
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> DesignMatrix {
        let p = self.n_features();
        DesignMatrix {
            feature_names: self.feature_names.clone(),
            values: self.values[range.start * p..range.end * p].to_vec(),
            target: self.target[range.clone()].to_vec(),
            turbine_ids: self.turbine_ids.clone(),
            row_turbine: self.row_turbine[range.clone()].to_vec(),
            row_time: self.row_time[range].to_vec(),
        }
    }

    /// Contiguous row ranges per turbine, in row order.
    pub fn turbine_ranges(&self) -> Vec<(&str, std::ops::Range<usize>)> {
        let mut out: Vec<(&str, std::ops::Range<usize>)> = Vec::new();
        for i in 0..self.n_rows() {
            let id = self.row_turbine_id(i);
            match out.last_mut() {
                Some((last, range)) if *last == id => range.end = i + 1,
                _ => out.push((id, i..i + 1)),
            }
        }
        out
    }
}

fn channel_or_err<'a>(series: &'a TurbineSeries, name: &str) -> Result<&'a [Option<f64>]> {
    series.channel(name).ok_or_else(|| Error::UnknownChannel(name.to_string()))
}

struct TurbineRows {
    values: Vec<f64>,
    target: Vec<f64>,
    times: Vec<Timestamp>,
}

fn turbine_rows(series: &TurbineSeries, cfg: &FeatureConfig) -> Result<TurbineRows> {
    let target = channel_or_err(series, &cfg.target)?;
    let inputs: Vec<&[Option<f64>]> = cfg
        .features
        .iter()
        .filter(|f| f.taxonomy != FeatureTaxonomy::AutoregressiveTarget)
        .map(|f| channel_or_err(series, &f.channel))
        .collect::<Result<_>>()?;
    let lags: Vec<usize> = if cfg
        .features
        .iter()
        .any(|f| f.taxonomy == FeatureTaxonomy::AutoregressiveTarget)
    {
        cfg.lag_steps.iter().map(|k| *k as usize).collect()
    } else {
        Vec::new()
    };
    let ts = series.timestamps();
    let res = series.resolution_s();
    let mut out = TurbineRows {
        values: Vec::new(),
        target: Vec::new(),
        times: Vec::new(),
    };
    let mut row = Vec::with_capacity(inputs.len() + lags.len());
    'rows: for i in 0..series.len() {
        let Some(y) = target[i] else { continue };
        row.clear();
        for col in &inputs {
            match col[i] {
                Some(v) => row.push(v),
                None => continue 'rows,
            }
        }
        for &k in &lags {
            // timestamps are strictly increasing multiples of the resolution,
            // so the row k back is the lag iff no gap lies in between
            if i < k || ts[i - k].0 != ts[i].0 - k as i64 * res {
                continue 'rows;
            }
            match target[i - k] {
                Some(v) => row.push(v),
                None => continue 'rows,
            }
        }
        out.values.extend_from_slice(&row);
        out.target.push(y);
        out.times.push(ts[i]);
    }
    Ok(out)
}

/// Builds the complete-case design matrix for `cfg` over all turbines.
pub fn build_design_matrix(d: &FarmDataset, cfg: &FeatureConfig) -> Result<DesignMatrix> {
    cfg.validate()?;
    for ch in cfg.channels() {
        if !d.has_channel(ch) {
            return Err(Error::UnknownChannel(ch.to_string()));
        }
    }
    let parts = d
        .turbines()
        .par_iter()
        .map(|t| turbine_rows(t, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut m = DesignMatrix {
        feature_names: cfg.column_names(),
        values: Vec::new(),
        target: Vec::new(),
        turbine_ids: d.turbines().iter().map(|t| t.turbine_id().to_string()).collect(),
        row_turbine: Vec::new(),
        row_time: Vec::new(),
    };
    for (idx, part) in parts.into_iter().enumerate() {
        m.row_turbine.extend(std::iter::repeat_n(idx as u32, part.target.len()));
        m.values.extend(part.values);
        m.target.extend(part.target);
        m.row_time.extend(part.times);
    }
    Ok(m)
}

/// Product-moment correlation of two equal-length complete vectors.
pub fn pearson_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two paired samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation over the pairs where both values are present.
pub fn pearson_correlation_pairwise(x: &[Option<f64>], y: &[Option<f64>]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    let (a, b): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .unzip();
    pearson_correlation(&a, &b)
}

/// Ranks every other catalog channel by absolute correlation with `target`,
/// pooling all turbines. Ties are broken by channel name.
pub fn rank_channels_by_correlation(d: &FarmDataset, target: &str) -> Result<Vec<(String, f64)>> {
    if !d.has_channel(target) {
        return Err(Error::UnknownChannel(target.to_string()));
    }
    let pooled = |name: &str| -> Vec<Option<f64>> {
        d.turbines()
            .iter()
            .flat_map(|t| t.channel(name).unwrap_or_default().iter().copied())
            .collect()
    };
    let y = pooled(target);
    let mut ranked = Vec::new();
    for ch in d.channel_catalog() {
        if ch == target {
            continue;
        }
        match pearson_correlation_pairwise(&pooled(ch), &y) {
            Ok(r) => ranked.push((ch.clone(), r.abs())),
            Err(e) => log::warn!("skipping channel {ch}: {e}"),
        }
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}
