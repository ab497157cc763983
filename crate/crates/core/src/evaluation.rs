//! Fault detection scored as classification.
//!
//! Each failure at time `F` opens a prediction window `[F - window, F - lead)`
//! and an ignore zone `[F - lead, F + blackout]`. A failure is a true positive
//! when any episode of its turbine touches its window, however many do. An
//! episode touching no window and no ignore zone is a false positive; one that
//! only touches ignore zones scores nothing.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{AlarmEpisode, EpisodeSet, SweepPoint};
use crate::error::{Error, Result};
use crate::scada_data::{FailureRecord, FarmDataset, Interval, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub window_days: i64,
    pub lead_days: i64,
    /// Days after a failure during which episodes are ignored.
    #[serde(default = "default_blackout")]
    pub blackout_days: i64,
}

fn default_blackout() -> i64 {
    30
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            window_days: 60,
            lead_days: 15,
            blackout_days: default_blackout(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_days > self.lead_days && self.lead_days >= 0) || self.blackout_days < 0 {
            return Err(Error::InvalidConfig(format!(
                "need window_days > lead_days >= 0 and blackout_days >= 0 (got {}, {}, {})",
                self.window_days, self.lead_days, self.blackout_days
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionWindow {
    pub turbine_id: String,
    /// half-open `[F - window_days, F - lead_days)`
    pub window: Interval,
    /// closed `[F - lead_days, F + blackout_days]`
    pub ignore_start: Timestamp,
    pub ignore_end: Timestamp,
}

impl PredictionWindow {
    pub fn new(f: &FailureRecord, cfg: &EvalConfig) -> Self {
        PredictionWindow {
            turbine_id: f.turbine_id.clone(),
            window: Interval {
                start: f.failure_time.plus_days(-cfg.window_days),
                end: f.failure_time.plus_days(-cfg.lead_days),
            },
            ignore_start: f.failure_time.plus_days(-cfg.lead_days),
            ignore_end: f.failure_time.plus_days(cfg.blackout_days),
        }
    }

    pub fn touches_window(&self, e: &AlarmEpisode) -> bool {
        e.start < self.window.end && e.end >= self.window.start
    }

    pub fn touches_ignore_zone(&self, e: &AlarmEpisode) -> bool {
        e.start <= self.ignore_end && e.end >= self.ignore_start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Episodes that only touched ignore zones.
    pub ignored: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl ConfusionCounts {
    fn from_counts(tp: usize, fp: usize, fn_: usize, ignored: usize) -> Self {
        ConfusionCounts {
            tp,
            fp,
            fn_,
            ignored,
            precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
            recall: (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64),
        }
    }
}

/// Per-turbine data span used to reject episodes on turbines with no data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Coverage {
    spans: BTreeMap<String, (Timestamp, Timestamp)>,
}

impl Coverage {
    pub fn from_dataset(d: &FarmDataset) -> Self {
        Coverage {
            spans: d
                .turbines()
                .iter()
                .filter_map(|t| t.span().map(|s| (t.turbine_id().to_string(), s)))
                .collect(),
        }
    }

    pub fn insert(&mut self, turbine_id: impl Into<String>, first: Timestamp, last: Timestamp) {
        self.spans.insert(turbine_id.into(), (first, last));
    }

    /// Coverage that accepts any episode of the listed turbines.
    pub fn unbounded<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        Coverage {
            spans: ids
                .into_iter()
                .map(|id| (id.to_string(), (Timestamp(i64::MIN), Timestamp(i64::MAX))))
                .collect(),
        }
    }

    pub fn covers(&self, e: &AlarmEpisode) -> bool {
        self.spans
            .get(&e.turbine_id)
            .is_some_and(|(a, b)| e.start <= *b && e.end >= *a)
    }
}

/// Tallies TP/FP/FN for one set of episodes.
pub fn label_episodes(
    episodes: &EpisodeSet,
    failures: &[FailureRecord],
    cfg: &EvalConfig,
    coverage: &Coverage,
) -> Result<ConfusionCounts> {
    cfg.validate()?;
    let windows: Vec<PredictionWindow> = failures.iter().map(|f| PredictionWindow::new(f, cfg)).collect();
    let mut detected = vec![false; windows.len()];
    let (mut fp, mut ignored) = (0, 0);
    for (turbine_id, eps) in episodes {
        let own: Vec<usize> = (0..windows.len())
            .filter(|&i| windows[i].turbine_id == *turbine_id)
            .collect();
        for e in eps {
            if e.turbine_id != *turbine_id || !coverage.covers(e) {
                return Err(Error::NoCoverage(e.turbine_id.clone()));
            }
            let mut supports = false;
            for &i in &own {
                if windows[i].touches_window(e) {
                    detected[i] = true;
                    supports = true;
                }
            }
            if supports {
                continue;
            }
            if own.iter().any(|&i| windows[i].touches_ignore_zone(e)) {
                ignored += 1;
            } else {
                fp += 1;
            }
        }
    }
    let tp = detected.iter().filter(|d| **d).count();
    Ok(ConfusionCounts::from_counts(tp, fp, windows.len() - tp, ignored))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub counts: ConfusionCounts,
}

impl PrPoint {
    pub fn precision(&self) -> Option<f64> {
        self.counts.precision
    }

    pub fn recall(&self) -> Option<f64> {
        self.counts.recall
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

/// One labelled point per sweep threshold, ordered by threshold.
pub fn pr_curve(sweep: &[SweepPoint], failures: &[FailureRecord], cfg: &EvalConfig, coverage: &Coverage) -> Result<PrCurve> {
    let mut points = sweep
        .par_iter()
        .map(|p| {
            label_episodes(&p.episodes, failures, cfg, coverage).map(|counts| PrPoint {
                threshold: p.threshold,
                counts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    points.sort_by(|a, b| a.threshold.total_cmp(&b.threshold));
    points.dedup_by(|b, a| a.threshold == b.threshold);
    Ok(PrCurve { points })
}

/// Trapezoidal area under precision over recall, using only points where
/// both are defined. Points sharing a recall keep the highest precision.
pub fn auprc(curve: &PrCurve) -> Result<f64> {
    let mut pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter_map(|p| Some((p.recall()?, p.precision()?)))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Empty(format!(
            "AUPRC needs at least two defined points, got {}",
            pts.len()
        )));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup_by(|b, a| a.0 == b.0);
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Writes `threshold,precision,recall`; undefined values are empty cells.
pub fn write_pr_curve_csv(curve: &PrCurve, writer: impl std::io::Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let out_err = |e: csv::Error| Error::csv("<output>", e);
    wtr.write_record(["threshold", "precision", "recall"]).map_err(out_err)?;
    for p in &curve.points {
        wtr.write_record([format!("{}", p.threshold), fmt_opt(p.precision()), fmt_opt(p.recall())])
            .map_err(out_err)?;
    }
    wtr.flush().map_err(|e| Error::io("<output>", e))
}

pub fn save_pr_curve_csv(curve: &PrCurve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_pr_curve_csv(curve, std::io::BufWriter::new(file))
}
