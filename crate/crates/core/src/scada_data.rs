//! SCADA time series data model, CSV ingestion, chronological splitting and
//! fault-period exclusion.
//!
//! Samples are kept at their native 10-minute resolution. Missing readings are
//! stored as `None` and only dropped when a design matrix is built.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const DEFAULT_RESOLUTION_S: i64 = 600;
pub const SECONDS_PER_DAY: i64 = 86_400;

pub const WIND_SPEED: &str = "wind_speed";
pub const ACTIVE_POWER: &str = "active_power";
pub const ROTOR_SPEED: &str = "rotor_speed";
pub const PITCH_ANGLE: &str = "pitch_angle";
pub const AMBIENT_TEMP: &str = "ambient_temp";
pub const HSS_BEARING_TEMP: &str = "gearbox_hss_bearing_temp";
pub const IMS_BEARING_TEMP: &str = "gearbox_ims_bearing_temp";

/// Measurement channels of the SCADA CSV schema, in column order.
pub const SCADA_CHANNELS: [&str; 7] = [
    WIND_SPEED,
    ACTIVE_POWER,
    ROTOR_SPEED,
    PITCH_ANGLE,
    AMBIENT_TEMP,
    HSS_BEARING_TEMP,
    IMS_BEARING_TEMP,
];

pub const GEARBOX_IMS_BEARING: &str = "gearbox_ims_bearing";

/// Seconds since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn seconds(self) -> i64 {
        self.0
    }

    pub fn plus_seconds(self, s: i64) -> Timestamp {
        Timestamp(self.0 + s)
    }

    pub fn plus_days(self, days: i64) -> Timestamp {
        Timestamp(self.0 + days * SECONDS_PER_DAY)
    }

    pub fn is_aligned(self, resolution_s: i64) -> bool {
        self.0.rem_euclid(resolution_s) == 0
    }

    pub fn to_rfc3339(self) -> String {
        match DateTime::<Utc>::from_timestamp(self.0, 0) {
            Some(dt) => dt.to_rfc3339_opts(SecondsFormat::Secs, true),
            None => format!("@{}", self.0),
        }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

impl FromStr for Timestamp {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let dt = DateTime::parse_from_rfc3339(s.trim()).map_err(|e| format!("bad timestamp `{s}`: {e}"))?;
        Ok(Timestamp(dt.timestamp()))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_rfc3339())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Half-open time interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl Interval {
    pub fn new(start: Timestamp, end: Timestamp) -> Result<Self> {
        if start >= end {
            return Err(Error::InvalidInterval(format!("start {start} is not before end {end}")));
        }
        Ok(Interval { start, end })
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && t < self.end
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn duration_s(&self) -> i64 {
        self.end.0 - self.start.0
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Multichannel SCADA series for one turbine.
#[derive(Debug, Clone, PartialEq)]
pub struct TurbineSeries {
    turbine_id: String,
    resolution_s: i64,
    timestamps: Vec<Timestamp>,
    channels: BTreeMap<String, Vec<Option<f64>>>,
}

impl TurbineSeries {
    pub fn new(
        turbine_id: impl Into<String>,
        resolution_s: i64,
        timestamps: Vec<Timestamp>,
        channels: BTreeMap<String, Vec<Option<f64>>>,
    ) -> Result<Self> {
        let turbine_id = turbine_id.into();
        let invalid = |message: String| Error::InvalidSeries {
            turbine_id: turbine_id.clone(),
            message,
        };
        if resolution_s <= 0 {
            return Err(invalid(format!("resolution must be positive, got {resolution_s}")));
        }
        for (i, t) in timestamps.iter().enumerate() {
            if !t.is_aligned(resolution_s) {
                return Err(invalid(format!("timestamp {t} not aligned to {resolution_s} s")));
            }
            if i > 0 && *t <= timestamps[i - 1] {
                return Err(invalid(format!("timestamps not strictly increasing at {t}")));
            }
        }
        for (name, values) in &channels {
            if values.len() != timestamps.len() {
                return Err(invalid(format!(
                    "channel {name} has {} values for {} timestamps",
                    values.len(),
                    timestamps.len()
                )));
            }
        }
        Ok(TurbineSeries {
            turbine_id,
            resolution_s,
            timestamps,
            channels,
        })
    }

    pub fn turbine_id(&self) -> &str {
        &self.turbine_id
    }

    pub fn resolution_s(&self) -> i64 {
        self.resolution_s
    }

    pub fn timestamps(&self) -> &[Timestamp] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channel(&self, name: &str) -> Option<&[Option<f64>]> {
        self.channels.get(name).map(Vec::as_slice)
    }

    pub fn channels(&self) -> &BTreeMap<String, Vec<Option<f64>>> {
        &self.channels
    }

    pub fn channel_names(&self) -> impl Iterator<Item = &str> {
        self.channels.keys().map(String::as_str)
    }

    /// First and last timestamp, if any samples exist.
    pub fn span(&self) -> Option<(Timestamp, Timestamp)> {
        Some((*self.timestamps.first()?, *self.timestamps.last()?))
    }

    /// Keeps the rows for which `keep(index, timestamp)` is true. A subset of a
    /// valid series is always valid, so no re-validation is needed.
    pub fn retain_rows(&self, mut keep: impl FnMut(usize, Timestamp) -> bool) -> TurbineSeries {
        let mask: Vec<bool> = self
            .timestamps
            .iter()
            .enumerate()
            .map(|(i, &t)| keep(i, t))
            .collect();
        let select = |v: &[Option<f64>]| -> Vec<Option<f64>> {
            v.iter().zip(&mask).filter(|(_, &m)| m).map(|(x, _)| *x).collect()
        };
        TurbineSeries {
            turbine_id: self.turbine_id.clone(),
            resolution_s: self.resolution_s,
            timestamps: self
                .timestamps
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|(t, _)| *t)
                .collect(),
            channels: self
                .channels
                .iter()
                .map(|(k, v)| (k.clone(), select(v)))
                .collect(),
        }
    }

    /// Returns a copy with one channel's values replaced.
    pub fn with_channel(&self, name: &str, values: Vec<Option<f64>>) -> Result<TurbineSeries> {
        if values.len() != self.timestamps.len() {
            return Err(Error::DimensionMismatch {
                expected: self.timestamps.len(),
                found: values.len(),
            });
        }
        let mut out = self.clone();
        out.channels.insert(name.to_string(), values);
        Ok(out)
    }
}

/// A set of turbines sharing a channel catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct FarmDataset {
    turbines: Vec<TurbineSeries>,
    channel_catalog: Vec<String>,
}

impl FarmDataset {
    /// Builds a farm; turbines are ordered by id and the catalog is the
    /// intersection of the per-turbine channel sets.
    pub fn new(mut turbines: Vec<TurbineSeries>) -> Result<Self> {
        turbines.sort_by(|a, b| a.turbine_id.cmp(&b.turbine_id));
        for pair in turbines.windows(2) {
            if pair[0].turbine_id == pair[1].turbine_id {
                return Err(Error::InvalidSeries {
                    turbine_id: pair[0].turbine_id.clone(),
                    message: "turbine appears twice in the farm".into(),
                });
            }
        }
        let mut catalog: Option<BTreeSet<String>> = None;
        for t in &turbines {
            let names: BTreeSet<String> = t.channels.keys().cloned().collect();
            catalog = Some(match catalog {
                None => names,
                Some(c) => c.intersection(&names).cloned().collect(),
            });
        }
        let channel_catalog: Vec<String> = catalog.unwrap_or_default().into_iter().collect();
        if channel_catalog.is_empty() {
            return Err(Error::Empty("farm has no channel common to all turbines".into()));
        }
        Ok(FarmDataset {
            turbines,
            channel_catalog,
        })
    }

    pub fn turbines(&self) -> &[TurbineSeries] {
        &self.turbines
    }

    pub fn turbine(&self, id: &str) -> Option<&TurbineSeries> {
        self.turbines.iter().find(|t| t.turbine_id == id)
    }

    pub fn channel_catalog(&self) -> &[String] {
        &self.channel_catalog
    }

    pub fn has_channel(&self, name: &str) -> bool {
        self.channel_catalog.iter().any(|c| c == name)
    }

    pub fn n_samples(&self) -> usize {
        self.turbines.iter().map(TurbineSeries::len).sum()
    }

    /// Earliest and latest timestamp over all turbines.
    pub fn span(&self) -> Option<(Timestamp, Timestamp)> {
        self.turbines
            .iter()
            .filter_map(TurbineSeries::span)
            .reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)))
    }

    /// Applies a per-turbine row filter, keeping the catalog.
    pub fn retain_rows(&self, mut keep: impl FnMut(&TurbineSeries, Timestamp) -> bool) -> FarmDataset {
        FarmDataset {
            turbines: self
                .turbines
                .iter()
                .map(|t| t.retain_rows(|_, ts| keep(t, ts)))
                .collect(),
            channel_catalog: self.channel_catalog.clone(),
        }
    }

    pub fn map_turbines(&self, f: impl FnMut(&TurbineSeries) -> Result<TurbineSeries>) -> Result<FarmDataset> {
        let turbines = self.turbines.iter().map(f).collect::<Result<Vec<_>>>()?;
        FarmDataset::new(turbines)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub turbine_id: String,
    pub failure_time: Timestamp,
    pub component: String,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: FarmDataset,
    pub validation: FarmDataset,
    pub test: FarmDataset,
    pub boundaries: SplitIntervals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIntervals {
    pub train: Interval,
    pub validation: Interval,
    pub test: Interval,
}

impl SplitIntervals {
    pub fn validate(&self) -> Result<()> {
        for (name, iv) in [("train", self.train), ("validation", self.validation), ("test", self.test)] {
            if iv.start >= iv.end {
                return Err(Error::InvalidInterval(format!("{name} interval {iv} is empty")));
            }
        }
        if self.train.end > self.validation.start {
            return Err(Error::InvalidInterval(format!(
                "train {} overlaps or follows validation {}",
                self.train, self.validation
            )));
        }
        if self.validation.end > self.test.start {
            return Err(Error::InvalidInterval(format!(
                "validation {} overlaps or follows test {}",
                self.validation, self.test
            )));
        }
        Ok(())
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| Error::Row {
        row,
        message: format!("column {column}: cannot parse `{s}` as a number"),
    })
}

fn known_scada_columns() -> Vec<String> {
    ["timestamp", "turbine_id"]
        .into_iter()
        .chain(SCADA_CHANNELS)
        .map(String::from)
        .collect()
}

/// Reads a SCADA CSV file. Row numbers in errors are 1-based data rows
/// (the header is row 0).
pub fn load_scada_csv(path: impl AsRef<Path>, resolution_s: i64) -> Result<FarmDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_scada_csv(file, resolution_s).map_err(|e| match e {
        Error::Csv { source, .. } => Error::csv(path, source),
        other => other,
    })
}

pub fn read_scada_csv(reader: impl std::io::Read, resolution_s: i64) -> Result<FarmDataset> {
    if resolution_s <= 0 {
        return Err(Error::InvalidConfig(format!("resolution must be positive, got {resolution_s}")));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::csv("<input>", e))?.clone();
    let known = known_scada_columns();
    let mut ts_col = None;
    let mut id_col = None;
    let mut channel_cols = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        match h {
            "timestamp" => ts_col = Some(i),
            "turbine_id" => id_col = Some(i),
            other if SCADA_CHANNELS.contains(&other) => channel_cols.push((i, other.to_string())),
            other => {
                return Err(Error::UnknownColumn {
                    name: other.to_string(),
                    known,
                })
            }
        }
    }
    let ts_col = ts_col.ok_or_else(|| Error::MissingColumn("timestamp".into()))?;
    let id_col = id_col.ok_or_else(|| Error::MissingColumn("turbine_id".into()))?;

    // turbine -> time -> (row number, values)
    let mut rows: BTreeMap<String, BTreeMap<Timestamp, (usize, Vec<Option<f64>>)>> = BTreeMap::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::csv("<input>", e))?;
        let ts_raw = record.get(ts_col).unwrap_or_default();
        let timestamp: Timestamp = ts_raw.parse().map_err(|message| Error::Row { row, message })?;
        if !timestamp.is_aligned(resolution_s) {
            return Err(Error::MisalignedTimestamp {
                row,
                timestamp,
                resolution_s,
            });
        }
        let turbine_id = record.get(id_col).unwrap_or_default().to_string();
        if turbine_id.is_empty() {
            return Err(Error::Row {
                row,
                message: "empty turbine_id".into(),
            });
        }
        let values = channel_cols
            .iter()
            .map(|(i, name)| parse_cell(record.get(*i).unwrap_or_default(), row, name))
            .collect::<Result<Vec<_>>>()?;
        let per_turbine = rows.entry(turbine_id.clone()).or_default();
        if let Some((first_row, _)) = per_turbine.get(&timestamp) {
            log::debug!("duplicate of row {first_row}");
            return Err(Error::DuplicateTimestamp {
                row,
                turbine_id,
                timestamp,
            });
        }
        per_turbine.insert(timestamp, (row, values));
    }

    let mut turbines = Vec::with_capacity(rows.len());
    for (turbine_id, samples) in rows {
        let timestamps: Vec<Timestamp> = samples.keys().copied().collect();
        let mut channels: BTreeMap<String, Vec<Option<f64>>> = channel_cols
            .iter()
            .map(|(_, name)| (name.clone(), Vec::with_capacity(timestamps.len())))
            .collect();
        for (_, values) in samples.into_values() {
            for ((_, name), v) in channel_cols.iter().zip(values) {
                channels.get_mut(name).expect("channel column").push(v);
            }
        }
        turbines.push(TurbineSeries::new(turbine_id, resolution_s, timestamps, channels)?);
    }
    if turbines.is_empty() {
        return Err(Error::Empty("SCADA file has no data rows".into()));
    }
    FarmDataset::new(turbines)
}

/// Writes a farm in the canonical SCADA schema, ordered by turbine then time.
/// Channels outside the schema are not written; schema channels the farm
/// lacks are written as empty cells.
pub fn write_scada_csv(d: &FarmDataset, writer: impl std::io::Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let out_err = |e: csv::Error| Error::csv("<output>", e);
    wtr.write_record(known_scada_columns()).map_err(out_err)?;
    let mut record: Vec<String> = Vec::with_capacity(2 + SCADA_CHANNELS.len());
    for t in d.turbines() {
        let cols: Vec<Option<&[Option<f64>]>> = SCADA_CHANNELS.iter().map(|c| t.channel(c)).collect();
        for (i, ts) in t.timestamps().iter().enumerate() {
            record.clear();
            record.push(ts.to_rfc3339());
            record.push(t.turbine_id().to_string());
            for col in &cols {
                record.push(match col.and_then(|c| c[i]) {
                    Some(v) => format!("{v}"),
                    None => String::new(),
                });
            }
            wtr.write_record(&record).map_err(out_err)?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}

pub fn save_scada_csv(d: &FarmDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_scada_csv(d, std::io::BufWriter::new(file))
}

/// Reads a failures CSV (`turbine_id,failure_time,component`), sorted by
/// failure time.
pub fn load_failures_csv(path: impl AsRef<Path>) -> Result<Vec<FailureRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_failures_csv(file).map_err(|e| match e {
        Error::Csv { source, .. } => Error::csv(path, source),
        other => other,
    })
}

pub fn read_failures_csv(reader: impl std::io::Read) -> Result<Vec<FailureRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::csv("<input>", e))?.clone();
    let expected = ["turbine_id", "failure_time", "component"];
    let mut cols = [usize::MAX; 3];
    for (i, h) in headers.iter().enumerate() {
        match expected.iter().position(|e| *e == h) {
            Some(k) => cols[k] = i,
            None => {
                return Err(Error::UnknownColumn {
                    name: h.to_string(),
                    known: expected.iter().map(|s| s.to_string()).collect(),
                })
            }
        }
    }
    if let Some(k) = cols.iter().position(|c| *c == usize::MAX) {
        return Err(Error::MissingColumn(expected[k].into()));
    }
    let mut out = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::csv("<input>", e))?;
        let failure_time: Timestamp = record
            .get(cols[1])
            .unwrap_or_default()
            .parse()
            .map_err(|message| Error::Row { row, message })?;
        out.push(FailureRecord {
            turbine_id: record.get(cols[0]).unwrap_or_default().to_string(),
            failure_time,
            component: record.get(cols[2]).unwrap_or_default().to_string(),
        });
    }
    out.sort_by(|a, b| {
        a.failure_time
            .cmp(&b.failure_time)
            .then_with(|| a.turbine_id.cmp(&b.turbine_id))
    });
    Ok(out)
}

pub fn write_failures_csv(failures: &[FailureRecord], writer: impl std::io::Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let out_err = |e: csv::Error| Error::csv("<output>", e);
    wtr.write_record(["turbine_id", "failure_time", "component"]).map_err(out_err)?;
    for f in failures {
        wtr.write_record([f.turbine_id.as_str(), &f.failure_time.to_rfc3339(), &f.component])
            .map_err(out_err)?;
    }
    wtr.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}

pub fn save_failures_csv(failures: &[FailureRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_failures_csv(failures, std::io::BufWriter::new(file))
}

/// Logs a warning for every failure outside its turbine's covered period.
/// Returns the number of such records.
pub fn warn_uncovered_failures(d: &FarmDataset, failures: &[FailureRecord]) -> usize {
    let mut n = 0;
    for f in failures {
        let covered = d
            .turbine(&f.turbine_id)
            .and_then(TurbineSeries::span)
            .is_some_and(|(a, b)| a <= f.failure_time && f.failure_time <= b.plus_seconds(1));
        if !covered {
            log::warn!(
                "failure of {} on {} at {} lies outside the data",
                f.component,
                f.turbine_id,
                f.failure_time
            );
            n += 1;
        }
    }
    n
}

/// Partitions every turbine's samples into train/validation/test by half-open
/// interval membership. Samples outside all three are discarded.
pub fn split_by_period(
    d: &FarmDataset,
    train: Interval,
    validation: Interval,
    test: Interval,
) -> Result<DatasetSplit> {
    let boundaries = SplitIntervals {
        train,
        validation,
        test,
    };
    boundaries.validate()?;
    Ok(DatasetSplit {
        train: d.retain_rows(|_, t| train.contains(t)),
        validation: d.retain_rows(|_, t| validation.contains(t)),
        test: d.retain_rows(|_, t| test.contains(t)),
        boundaries,
    })
}

/// Closed exclusion envelope `[F - before_days, F + after_days]` around a failure.
pub fn exclusion_envelope(f: &FailureRecord, before_days: i64, after_days: i64) -> (Timestamp, Timestamp) {
    (f.failure_time.plus_days(-before_days), f.failure_time.plus_days(after_days))
}

/// Removes every sample of a failing turbine inside the failure's exclusion
/// envelope. Failures outside the data are no-ops.
pub fn exclude_fault_periods(
    d: &FarmDataset,
    failures: &[FailureRecord],
    before_days: i64,
    after_days: i64,
) -> Result<FarmDataset> {
    if before_days < 0 || after_days < 0 {
        return Err(Error::InvalidConfig(format!(
            "exclusion lengths must be non-negative (before {before_days}, after {after_days})"
        )));
    }
    let mut envelopes: BTreeMap<&str, Vec<(Timestamp, Timestamp)>> = BTreeMap::new();
    for f in failures {
        envelopes
            .entry(f.turbine_id.as_str())
            .or_default()
            .push(exclusion_envelope(f, before_days, after_days));
    }
    Ok(d.retain_rows(|series, t| match envelopes.get(series.turbine_id()) {
        None => true,
        Some(envs) => !envs.iter().any(|(a, b)| *a <= t && t <= *b),
    }))
}
