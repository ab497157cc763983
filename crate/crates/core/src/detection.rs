//! Thresholding of residuals (or raw temperatures for the baseline) into
//! alarms, and grouping of alarms into episodes.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nbm::ResidualSeries;
use crate::scada_data::{FarmDataset, Timestamp, TurbineSeries, SECONDS_PER_DAY};

pub const DEFAULT_MERGE_GAP_S: i64 = 3 * SECONDS_PER_DAY;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdKind {
    /// °C
    Absolute(f64),
    /// quantile of the reference distribution, strictly inside (0, 1)
    Quantile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    HealthyTrainingResiduals,
    RawTargetTraining,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub kind: ThresholdKind,
    pub reference: ReferenceKind,
}

impl ThresholdRule {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ThresholdKind::Quantile(q) if !(q > 0.0 && q < 1.0) => {
                Err(Error::InvalidConfig(format!("quantile {q} must lie strictly between 0 and 1")))
            }
            ThresholdKind::Absolute(t) if !t.is_finite() => {
                Err(Error::InvalidConfig(format!("threshold {t} is not finite")))
            }
            _ => Ok(()),
        }
    }

    /// Resolves the rule to a concrete threshold against `reference`.
    pub fn resolve(&self, reference: &[f64]) -> Result<f64> {
        self.validate()?;
        match self.kind {
            ThresholdKind::Absolute(t) => Ok(t),
            ThresholdKind::Quantile(q) => {
                let mut sorted = reference.to_vec();
                sorted.sort_by(f64::total_cmp);
                empirical_quantile(&sorted, q)
            }
        }
    }
}

/// Closed interval `[start, end]` spanned by a cluster of alarms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmEpisode {
    pub turbine_id: String,
    pub start: Timestamp,
    pub end: Timestamp,
}

/// Episodes keyed by turbine id. Turbines without episodes may be present
/// with an empty list.
pub type EpisodeSet = BTreeMap<String, Vec<AlarmEpisode>>;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub quantile: Option<f64>,
    pub threshold: f64,
    pub episodes: EpisodeSet,
}

impl SweepPoint {
    pub fn n_episodes(&self) -> usize {
        self.episodes.values().map(Vec::len).sum()
    }
}

/// Lower nearest-rank quantile of an ascending slice: the element at 1-based
/// rank `ceil(q * n)`.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Empty("quantile of an empty reference".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidConfig(format!("quantile {q} must lie strictly between 0 and 1")));
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// Timestamps whose residual strictly exceeds `threshold`.
pub fn threshold_alarms(r: &ResidualSeries, threshold: f64) -> Vec<Timestamp> {
    r.timestamps
        .iter()
        .zip(&r.residuals)
        .filter(|(_, v)| **v > threshold)
        .map(|(t, _)| *t)
        .collect()
}

/// Timestamps whose raw `target` reading strictly exceeds `threshold`.
pub fn baseline_alarms(series: &TurbineSeries, target: &str, threshold: f64) -> Result<Vec<Timestamp>> {
    let values = series
        .channel(target)
        .ok_or_else(|| Error::UnknownChannel(target.to_string()))?;
    Ok(series
        .timestamps()
        .iter()
        .zip(values)
        .filter(|(_, v)| v.is_some_and(|v| v > threshold))
        .map(|(t, _)| *t)
        .collect())
}

/// Raw target readings laid out as score series so the baseline can reuse
/// the residual sweep machinery.
pub fn raw_target_scores(d: &FarmDataset, target: &str) -> Result<Vec<ResidualSeries>> {
    d.turbines()
        .iter()
        .map(|t| {
            let values = t.channel(target).ok_or_else(|| Error::UnknownChannel(target.to_string()))?;
            let (timestamps, residuals) = t
                .timestamps()
                .iter()
                .zip(values)
                .filter_map(|(ts, v)| v.map(|v| (*ts, v)))
                .unzip();
            Ok(ResidualSeries {
                turbine_id: t.turbine_id().to_string(),
                timestamps,
                residuals,
            })
        })
        .collect()
}

/// Trailing moving average over `window` consecutive samples. A window of 0
/// or 1 returns the input unchanged.
pub fn moving_average(r: &ResidualSeries, window: usize) -> ResidualSeries {
    if window <= 1 {
        return r.clone();
    }
    let mut out = Vec::with_capacity(r.len());
    let mut acc = 0.0;
    for (i, v) in r.residuals.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= r.residuals[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    ResidualSeries {
        turbine_id: r.turbine_id.clone(),
        timestamps: r.timestamps.clone(),
        residuals: out,
    }
}

/// Groups alarms whose inter-arrival time is at most `merge_gap_s` seconds.
pub fn group_episodes(turbine_id: &str, alarms: &[Timestamp], merge_gap_s: i64) -> Vec<AlarmEpisode> {
    let mut sorted = alarms.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out: Vec<AlarmEpisode> = Vec::new();
    for t in sorted {
        match out.last_mut() {
            Some(ep) if t.0 - ep.end.0 <= merge_gap_s => ep.end = t,
            _ => out.push(AlarmEpisode {
                turbine_id: turbine_id.to_string(),
                start: t,
                end: t,
            }),
        }
    }
    out
}

/// Alarm episodes of every series at one threshold.
pub fn episodes_at(series: &[ResidualSeries], threshold: f64, merge_gap_s: i64) -> EpisodeSet {
    series
        .iter()
        .map(|r| {
            (
                r.turbine_id.clone(),
                group_episodes(&r.turbine_id, &threshold_alarms(r, threshold), merge_gap_s),
            )
        })
        .collect()
}

/// Evaluates one threshold per quantile of `reference`. Quantiles resolving to
/// an already-seen threshold are dropped; points come back in ascending
/// threshold order.
pub fn threshold_sweep(
    series: &[ResidualSeries],
    reference: &[f64],
    quantiles: &[f64],
    merge_gap_s: i64,
) -> Result<Vec<SweepPoint>> {
    if reference.is_empty() {
        return Err(Error::Empty("threshold sweep needs a non-empty reference".into()));
    }
    let mut sorted = reference.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut thresholds: Vec<(f64, f64)> = quantiles
        .iter()
        .map(|q| empirical_quantile(&sorted, *q).map(|t| (*q, t)))
        .collect::<Result<_>>()?;
    thresholds.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    thresholds.dedup_by(|b, a| a.1 == b.1);
    Ok(thresholds
        .par_iter()
        .map(|&(q, t)| SweepPoint {
            quantile: Some(q),
            threshold: t,
            episodes: episodes_at(series, t, merge_gap_s),
        })
        .collect())
}

/// Sweep over explicit absolute thresholds.
pub fn absolute_sweep(series: &[ResidualSeries], thresholds: &[f64], merge_gap_s: i64) -> Vec<SweepPoint> {
    let mut ts = thresholds.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.par_iter()
        .map(|&t| SweepPoint {
            quantile: None,
            threshold: t,
            episodes: episodes_at(series, t, merge_gap_s),
        })
        .collect()
}

/// Log-spaced quantile grid from 0.5 up to 1 - 1e-5, denser in the upper tail.
pub fn default_quantiles() -> Vec<f64> {
    let n = 40;
    (0..n)
        .map(|i| {
            let top = 0.5f64.log10();
            let exponent = top + (-5.0 - top) * i as f64 / (n - 1) as f64;
            1.0 - 10f64.powf(exponent)
        })
        .collect()
}

/// Writes episodes as `turbine_id,start,end,threshold`, ordered by threshold,
/// turbine and start.
pub fn write_episodes_csv(points: &[SweepPoint], writer: impl std::io::Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let out_err = |e: csv::Error| Error::csv("<output>", e);
    wtr.write_record(["turbine_id", "start", "end", "threshold"]).map_err(out_err)?;
    for p in points {
        for eps in p.episodes.values() {
            for e in eps {
                wtr.write_record([
                    e.turbine_id.clone(),
                    e.start.to_rfc3339(),
                    e.end.to_rfc3339(),
                    format!("{}", p.threshold),
                ])
                .map_err(out_err)?;
            }
        }
    }
    wtr.flush().map_err(|e| Error::io("<output>", e))
}

pub fn save_episodes_csv(points: &[SweepPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_episodes_csv(points, std::io::BufWriter::new(file))
}

/// Reads an episodes CSV back into one sweep point per distinct threshold.
pub fn read_episodes_csv(reader: impl std::io::Read) -> Result<Vec<SweepPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::csv("<input>", e))?.clone();
    let expected = ["turbine_id", "start", "end", "threshold"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::InvalidConfig(format!(
            "episodes header must be `{}`",
            expected.join(",")
        )));
    }
    let mut by_threshold: BTreeMap<u64, (f64, EpisodeSet)> = BTreeMap::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::csv("<input>", e))?;
        let parse_ts = |i: usize| -> Result<Timestamp> {
            record
                .get(i)
                .unwrap_or_default()
                .parse()
                .map_err(|message| Error::Row { row, message })
        };
        let start = parse_ts(1)?;
        let end = parse_ts(2)?;
        if end < start {
            return Err(Error::Row {
                row,
                message: "episode ends before it starts".into(),
            });
        }
        let threshold: f64 = record.get(3).unwrap_or_default().parse().map_err(|_| Error::Row {
            row,
            message: "cannot parse threshold".into(),
        })?;
        let turbine_id = record.get(0).unwrap_or_default().to_string();
        // order-preserving key for finite floats
        let bits = threshold.to_bits();
        let key = if threshold.is_sign_negative() { !bits } else { bits | (1 << 63) };
        by_threshold
            .entry(key)
            .or_insert_with(|| (threshold, EpisodeSet::new()))
            .1
            .entry(turbine_id.clone())
            .or_default()
            .push(AlarmEpisode { turbine_id, start, end });
    }
    Ok(by_threshold
        .into_values()
        .map(|(threshold, mut episodes)| {
            for eps in episodes.values_mut() {
                eps.sort_by_key(|e| e.start);
            }
            SweepPoint {
                quantile: None,
                threshold,
                episodes,
            }
        })
        .collect())
}

pub fn load_episodes_csv(path: impl AsRef<Path>) -> Result<Vec<SweepPoint>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_episodes_csv(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: &[f64]) -> ResidualSeries {
        ResidualSeries {
            turbine_id: "T01".into(),
            timestamps: (0..values.len() as i64).map(|i| Timestamp(i * 600)).collect(),
            residuals: values.to_vec(),
        }
    }

    #[test]
    fn alarms_strictly_above() {
        assert!(threshold_alarms(&series(&[0.1, 0.2]), 1.0).is_empty());
        assert_eq!(threshold_alarms(&series(&[0.1, 5.0, 0.2]), 1.0), vec![Timestamp(600)]);
        assert!(threshold_alarms(&series(&[1.0]), 1.0).is_empty());
    }

    #[test]
    fn percentile_count_matches_scan() {
        let values: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64 / 10.0).collect();
        let r = series(&values);
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let t = empirical_quantile(&sorted, 0.99).unwrap();
        let expected = values.iter().filter(|v| **v > t).count();
        assert_eq!(threshold_alarms(&r, t).len(), expected);
        assert_eq!(expected, 10);
    }

    #[test]
    fn quantile_convention() {
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0], 0.5).unwrap(), 2.0);
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0], 0.01).unwrap(), 1.0);
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0], 0.99).unwrap(), 3.0);
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.0);
        assert!(empirical_quantile(&[1.0], 1.0).is_err());
        assert!(empirical_quantile(&[], 0.5).is_err());
    }

    #[test]
    fn baseline_bounds() {
        use std::collections::BTreeMap;
        let mut ch = BTreeMap::new();
        ch.insert("temp".to_string(), vec![Some(3.0), None, Some(5.0), Some(1.0)]);
        let s = TurbineSeries::new("T01", 600, (0..4).map(|i| Timestamp(i * 600)).collect(), ch).unwrap();
        assert!(baseline_alarms(&s, "temp", 10.0).unwrap().is_empty());
        assert_eq!(baseline_alarms(&s, "temp", 0.0).unwrap().len(), 3);
        assert_eq!(baseline_alarms(&s, "temp", 3.0).unwrap(), vec![Timestamp(1200)]);
        assert!(baseline_alarms(&s, "nope", 0.0).is_err());
    }

    #[test]
    fn grouping() {
        assert!(group_episodes("T", &[], DEFAULT_MERGE_GAP_S).is_empty());
        let t = Timestamp(1_000_000_200);
        let eps = group_episodes("T", &[t, t.plus_seconds(600), t.plus_seconds(1200)], SECONDS_PER_DAY);
        assert_eq!(eps.len(), 1);
        assert_eq!((eps[0].start, eps[0].end), (t, t.plus_seconds(1200)));
        let eps = group_episodes("T", &[t.plus_days(5), t], 3 * SECONDS_PER_DAY);
        assert_eq!(eps.len(), 2);
        assert_eq!(eps[0].start, t);
    }

    #[test]
    fn sweep_dedupes_and_orders() {
        let r = series(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let pts = threshold_sweep(&[r], &[1.0, 2.0, 3.0], &[0.9, 0.5, 0.6], DEFAULT_MERGE_GAP_S).unwrap();
        let ths: Vec<f64> = pts.iter().map(|p| p.threshold).collect();
        assert_eq!(ths, vec![2.0, 3.0]);
        assert!(threshold_sweep(&[], &[], &[0.5], 1).is_err());
    }

    #[test]
    fn moving_average_window() {
        let r = series(&[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(moving_average(&r, 1), r);
        assert_eq!(moving_average(&r, 2).residuals, vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn default_grid_is_increasing_inside_unit_interval() {
        let q = default_quantiles();
        assert_eq!(q.len(), 40);
        assert!((q[0] - 0.5).abs() < 1e-4);
        assert!((q[39] - (1.0 - 1e-5)).abs() < 1e-9);
        assert!(q.windows(2).all(|w| w[0] < w[1]));
        assert!(q.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn episodes_csv_round_trip() {
        let r = series(&[0.0, 5.0, 5.0, 0.0, 9.0]);
        let pts = absolute_sweep(&[r], &[1.0, 6.0], 600);
        let mut buf = Vec::new();
        write_episodes_csv(&pts, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("turbine_id,start,end,threshold\n"));
        let back = read_episodes_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].episodes, pts[0].episodes);
        assert_eq!(back[1].episodes, pts[1].episodes);
    }
}
