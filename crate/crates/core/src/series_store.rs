//! Hourly load collections: ingestion, time splits, min-max normalization
//! and hierarchical aggregation.
//!
//! Every series and exogenous channel in a [`SeriesCollection`] shares one
//! hourly clock anchored at `start`. Series may be shorter than others
//! (trailing truncation) but never start later.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Timestamp format used by every CSV this crate reads or writes.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("header must start with a `timestamp` column followed by at least one series")]
    BadHeader,
    #[error("malformed timestamp `{value}` on line {line}")]
    MalformedTimestamp { line: usize, value: String },
    #[error("timestamp {timestamp} on line {line} is not on a whole hour")]
    NotHourAligned { line: usize, timestamp: String },
    #[error("non-hourly step before {timestamp} on line {line}")]
    NonHourlyStep { line: usize, timestamp: String },
    #[error("gap of {hours} missing hour(s) in `{column}` at {timestamp} exceeds policy (max {max})")]
    GapTooLong {
        column: String,
        timestamp: String,
        hours: usize,
        max: usize,
    },
    #[error("non-numeric cell `{value}` in column `{column}` on line {line}")]
    NonNumeric {
        line: usize,
        column: String,
        value: String,
    },
    #[error("series `{0}` contains non-finite values")]
    NonFinite(String),
    #[error("collection has no series")]
    Empty,
    #[error("duplicate column `{0}`")]
    Duplicate(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("series `{0}` is constant on the training view and cannot be min-max normalized")]
    ConstantSeries(String),
    #[error("normalizer has no statistics for `{0}`")]
    Unfitted(String),
    #[error("series `{0}` has no hierarchy label")]
    MissingLabel(String),
    #[error("unknown series `{0}`")]
    UnknownSeries(String),
    #[error("hour range {from}..={to} is outside the collection")]
    OutOfRange { from: usize, to: usize },
}

pub type Result<T, E = SeriesError> = std::result::Result<T, E>;

/// What to do with missing hours (absent rows or empty cells) during ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GapPolicy {
    Reject,
    /// Copy the previous hour's value across runs of at most `max_gap` hours.
    ForwardFill { max_gap: usize },
}

impl Default for GapPolicy {
    fn default() -> Self {
        GapPolicy::ForwardFill { max_gap: 3 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub gap_policy: GapPolicy,
}

/// Named hourly series plus exogenous channels and optional hierarchy labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesCollection {
    start: DateTime<Utc>,
    series: BTreeMap<String, Vec<f64>>,
    exogenous: BTreeMap<String, Vec<f64>>,
    hierarchy: BTreeMap<String, String>,
}

impl SeriesCollection {
    pub fn new(
        start: DateTime<Utc>,
        series: BTreeMap<String, Vec<f64>>,
        exogenous: BTreeMap<String, Vec<f64>>,
        hierarchy: BTreeMap<String, String>,
    ) -> Result<Self> {
        if series.is_empty() {
            return Err(SeriesError::Empty);
        }
        if start.minute() != 0 || start.second() != 0 || start.nanosecond() != 0 {
            return Err(SeriesError::NotHourAligned {
                line: 0,
                timestamp: format_timestamp(start),
            });
        }
        for (name, values) in series.iter().chain(exogenous.iter()) {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(SeriesError::NonFinite(name.clone()));
            }
        }
        Ok(Self {
            start,
            series,
            exogenous,
            hierarchy,
        })
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn series(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.series
    }

    pub fn exogenous(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.exogenous
    }

    pub fn hierarchy(&self) -> &BTreeMap<String, String> {
        &self.hierarchy
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.series.get(id).map(Vec::as_slice)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.series.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Length of the longest series or channel, in hours.
    pub fn horizon(&self) -> usize {
        self.series
            .values()
            .chain(self.exogenous.values())
            .map(Vec::len)
            .max()
            .unwrap_or(0)
    }

    pub fn timestamp(&self, hour: usize) -> DateTime<Utc> {
        self.start + Duration::hours(hour as i64)
    }

    /// Hour index of `ts` relative to `start`; `None` if before start or not on the hour.
    pub fn hour_index(&self, ts: DateTime<Utc>) -> Option<usize> {
        let delta = ts - self.start;
        if delta < Duration::zero() || delta.num_seconds() % 3600 != 0 {
            return None;
        }
        Some(delta.num_hours() as usize)
    }

    pub fn with_hierarchy(mut self, hierarchy: BTreeMap<String, String>) -> Self {
        self.hierarchy = hierarchy;
        self
    }

    pub fn with_exogenous(mut self, exogenous: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        for (name, values) in &exogenous {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(SeriesError::NonFinite(name.clone()));
            }
        }
        self.exogenous = exogenous;
        Ok(self)
    }

    /// Collection restricted to the given series ids (channels kept whole).
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut series = BTreeMap::new();
        let mut hierarchy = BTreeMap::new();
        for id in ids {
            let values = self
                .series
                .get(id)
                .ok_or_else(|| SeriesError::UnknownSeries(id.to_string()))?;
            series.insert(id.to_string(), values.clone());
            if let Some(region) = self.hierarchy.get(id) {
                hierarchy.insert(id.to_string(), region.clone());
            }
        }
        Self::new(self.start, series, self.exogenous.clone(), hierarchy)
    }

    /// Hours `from..=to` of every series and channel. Series that end before
    /// `from` come back empty.
    pub fn window(&self, from: usize, to: usize) -> Result<Self> {
        if from > to || to >= self.horizon() {
            return Err(SeriesError::OutOfRange { from, to });
        }
        let cut = |v: &Vec<f64>| -> Vec<f64> {
            if from >= v.len() {
                Vec::new()
            } else {
                v[from..v.len().min(to + 1)].to_vec()
            }
        };
        Ok(Self {
            start: self.timestamp(from),
            series: self.series.iter().map(|(k, v)| (k.clone(), cut(v))).collect(),
            exogenous: self
                .exogenous
                .iter()
                .map(|(k, v)| (k.clone(), cut(v)))
                .collect(),
            hierarchy: self.hierarchy.clone(),
        })
    }

    /// Element-wise scaling of every series (channels untouched).
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for values in out.series.values_mut() {
            values.iter_mut().for_each(|v| *v *= factor);
        }
        out
    }
}

pub fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

pub fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    NaiveDateTime::parse_from_str(raw.trim(), TIMESTAMP_FORMAT)
        .ok()
        .map(|naive| naive.and_utc())
}

/// Read a wide CSV (`timestamp,<col>,<col>,...`) into column vectors, applying
/// the gap policy to missing rows and empty cells.
fn read_wide<R: Read>(
    reader: R,
    config: &IngestConfig,
) -> Result<(DateTime<Utc>, BTreeMap<String, Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "timestamp" {
        return Err(SeriesError::BadHeader);
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut columns: Vec<Vec<Option<f64>>> = vec![Vec::new(); names.len()];
    let mut start: Option<DateTime<Utc>> = None;
    let mut prev: Option<DateTime<Utc>> = None;

    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        // header is line 1
        let line = row + 2;
        let raw_ts = record.get(0).unwrap_or("");
        let ts = parse_timestamp(raw_ts).ok_or_else(|| SeriesError::MalformedTimestamp {
            line,
            value: raw_ts.to_string(),
        })?;
        if ts.minute() != 0 || ts.second() != 0 {
            return Err(SeriesError::NotHourAligned {
                line,
                timestamp: raw_ts.to_string(),
            });
        }
        if let Some(p) = prev {
            let step = ts - p;
            if step <= Duration::zero() || step.num_seconds() % 3600 != 0 {
                return Err(SeriesError::NonHourlyStep {
                    line,
                    timestamp: raw_ts.to_string(),
                });
            }
            let missing = step.num_hours() as usize - 1;
            if missing > 0 {
                if let GapPolicy::Reject = config.gap_policy {
                    return Err(SeriesError::GapTooLong {
                        column: "timestamp".to_string(),
                        timestamp: format_timestamp(p + Duration::hours(1)),
                        hours: missing,
                        max: 0,
                    });
                }
                for col in &mut columns {
                    col.extend(std::iter::repeat_n(None, missing));
                }
            }
        } else {
            start = Some(ts);
        }
        prev = Some(ts);
        for (c, col) in columns.iter_mut().enumerate() {
            let cell = record.get(c + 1).unwrap_or("");
            if cell.is_empty() {
                col.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| SeriesError::NonNumeric {
                    line,
                    column: names[c].clone(),
                    value: cell.to_string(),
                })?;
                if !v.is_finite() {
                    return Err(SeriesError::NonNumeric {
                        line,
                        column: names[c].clone(),
                        value: cell.to_string(),
                    });
                }
                col.push(Some(v));
            }
        }
    }
    let start = start.ok_or(SeriesError::Empty)?;

    let mut out = BTreeMap::new();
    for (name, col) in names.into_iter().zip(columns) {
        let filled = fill_gaps(&name, start, col, config.gap_policy)?;
        if out.insert(name.clone(), filled).is_some() {
            return Err(SeriesError::Duplicate(name));
        }
    }
    Ok((start, out))
}

fn fill_gaps(
    name: &str,
    start: DateTime<Utc>,
    col: Vec<Option<f64>>,
    policy: GapPolicy,
) -> Result<Vec<f64>> {
    // trailing empties are truncation, not gaps
    let len = col.iter().rposition(Option::is_some).map_or(0, |p| p + 1);
    let max_gap = match policy {
        GapPolicy::Reject => 0,
        GapPolicy::ForwardFill { max_gap } => max_gap,
    };
    let mut out = Vec::with_capacity(len);
    let mut run = 0usize;
    for (t, cell) in col.into_iter().take(len).enumerate() {
        match cell {
            Some(v) => {
                run = 0;
                out.push(v);
            }
            None => {
                run += 1;
                let gap_start = t + 1 - run;
                let too_long = run > max_gap || out.is_empty();
                if too_long {
                    return Err(SeriesError::GapTooLong {
                        column: name.to_string(),
                        timestamp: format_timestamp(start + Duration::hours(gap_start as i64)),
                        hours: run,
                        max: max_gap,
                    });
                }
                let last = *out.last().expect("checked non-empty");
                out.push(last);
            }
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| SeriesError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Ingest a wide load CSV: one series per non-timestamp column.
pub fn ingest_wide_csv(path: &Path, config: &IngestConfig) -> Result<SeriesCollection> {
    let (start, series) = read_wide(open(path)?, config)?;
    SeriesCollection::new(start, series, BTreeMap::new(), BTreeMap::new())
}

/// Ingest load, optional exogenous channels and optional hierarchy labels.
/// The exogenous file must start at the same timestamp as the load file.
pub fn ingest_files(
    load: &Path,
    exogenous: Option<&Path>,
    hierarchy: Option<&Path>,
    config: &IngestConfig,
) -> Result<SeriesCollection> {
    let (start, series) = read_wide(open(load)?, config)?;
    let channels = match exogenous {
        Some(p) => {
            let (exo_start, channels) = read_wide(open(p)?, config)?;
            if exo_start != start {
                return Err(SeriesError::InvalidSplit(format!(
                    "exogenous file starts at {} but load starts at {}",
                    format_timestamp(exo_start),
                    format_timestamp(start)
                )));
            }
            channels
        }
        None => BTreeMap::new(),
    };
    let labels = match hierarchy {
        Some(p) => read_hierarchy(open(p)?)?,
        None => BTreeMap::new(),
    };
    SeriesCollection::new(start, series, channels, labels)
}

fn read_hierarchy<R: Read>(reader: R) -> Result<BTreeMap<String, String>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "series_id" || &headers[1] != "region_id" {
        return Err(SeriesError::BadHeader);
    }
    let mut out = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        out.insert(record[0].to_string(), record[1].to_string());
    }
    Ok(out)
}

/// Write columns in the wide CSV layout. Shorter columns leave trailing cells empty.
pub fn write_wide_csv(
    path: &Path,
    start: DateTime<Utc>,
    columns: &BTreeMap<String, Vec<f64>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(columns.keys().cloned());
    w.write_record(&header)?;
    let rows = columns.values().map(Vec::len).max().unwrap_or(0);
    for t in 0..rows {
        let mut record = vec![format_timestamp(start + Duration::hours(t as i64))];
        record.extend(
            columns
                .values()
                .map(|v| v.get(t).map(|x| x.to_string()).unwrap_or_default()),
        );
        w.write_record(&record)?;
    }
    w.flush().map_err(|source| SeriesError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

pub fn write_hierarchy_csv(path: &Path, hierarchy: &BTreeMap<String, String>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series_id", "region_id"])?;
    for (s, r) in hierarchy {
        w.write_record([s, r])?;
    }
    w.flush().map_err(|source| SeriesError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Inclusive end timestamps of the train, validation and test views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: DateTime<Utc>,
    pub val_end: DateTime<Utc>,
    pub test_end: DateTime<Utc>,
}

impl SplitSpec {
    /// Split expressed as inclusive hour offsets from `start`.
    pub fn from_hours(start: DateTime<Utc>, train_end: usize, val_end: usize, test_end: usize) -> Self {
        let at = |h: usize| start + Duration::hours(h as i64);
        Self {
            train_end: at(train_end),
            val_end: at(val_end),
            test_end: at(test_end),
        }
    }

    /// Inclusive hour indices `(train_end, val_end, test_end)` for `c`.
    pub fn hours(&self, c: &SeriesCollection) -> Result<(usize, usize, usize)> {
        if !(self.train_end < self.val_end && self.val_end < self.test_end) {
            return Err(SeriesError::InvalidSplit(
                "require train_end < val_end < test_end".into(),
            ));
        }
        let idx = |ts: DateTime<Utc>, what: &str| {
            c.hour_index(ts).ok_or_else(|| {
                SeriesError::InvalidSplit(format!(
                    "{what} {} is before the collection start or not on the hour",
                    format_timestamp(ts)
                ))
            })
        };
        let (a, b, t) = (
            idx(self.train_end, "train_end")?,
            idx(self.val_end, "val_end")?,
            idx(self.test_end, "test_end")?,
        );
        if t >= c.horizon() {
            return Err(SeriesError::InvalidSplit(format!(
                "test_end {} is past the last sample",
                format_timestamp(self.test_end)
            )));
        }
        Ok((a, b, t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitViews {
    pub train: SeriesCollection,
    pub val: SeriesCollection,
    pub test: SeriesCollection,
}

/// Partition every series (and channel) into train/val/test views by timestamp.
pub fn split_by_time(c: &SeriesCollection, spec: &SplitSpec) -> Result<SplitViews> {
    let (a, b, t) = spec.hours(c)?;
    Ok(SplitViews {
        train: c.window(0, a)?,
        val: c.window(a + 1, b)?,
        test: c.window(b + 1, t)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    /// Fit on a sequence; `None` if empty or constant.
    pub fn fit(values: &[f64]) -> Option<Self> {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (max > min).then_some(Self { min, max })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * (self.max - self.min) + self.min
    }
}

/// Per-series and per-channel min-max statistics from a training view.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub series: BTreeMap<String, MinMax>,
    pub channels: BTreeMap<String, MinMax>,
}

impl Normalizer {
    pub fn fit(train: &SeriesCollection) -> Result<Self> {
        let fit_all = |m: &BTreeMap<String, Vec<f64>>| -> Result<BTreeMap<String, MinMax>> {
            m.iter()
                .map(|(k, v)| {
                    MinMax::fit(v)
                        .map(|mm| (k.clone(), mm))
                        .ok_or_else(|| SeriesError::ConstantSeries(k.clone()))
                })
                .collect()
        };
        Ok(Self {
            series: fit_all(&train.series)?,
            channels: fit_all(&train.exogenous)?,
        })
    }

    /// Map each value to `(v - min) / (max - min)`; out-of-range values are not clipped.
    pub fn apply(&self, c: &SeriesCollection) -> Result<SeriesCollection> {
        let map = |stats: &BTreeMap<String, MinMax>, m: &BTreeMap<String, Vec<f64>>| {
            m.iter()
                .map(|(k, v)| {
                    let mm = stats
                        .get(k)
                        .ok_or_else(|| SeriesError::Unfitted(k.clone()))?;
                    Ok((k.clone(), v.iter().map(|&x| mm.apply(x)).collect()))
                })
                .collect::<Result<BTreeMap<_, _>>>()
        };
        Ok(SeriesCollection {
            start: c.start,
            series: map(&self.series, &c.series)?,
            exogenous: map(&self.channels, &c.exogenous)?,
            hierarchy: c.hierarchy.clone(),
        })
    }

    pub fn invert_series(&self, id: &str, values: &[f64]) -> Result<Vec<f64>> {
        let mm = self
            .series
            .get(id)
            .ok_or_else(|| SeriesError::Unfitted(id.to_string()))?;
        Ok(values.iter().map(|&v| mm.invert(v)).collect())
    }

    pub fn invert(&self, c: &SeriesCollection) -> Result<SeriesCollection> {
        let mut out = c.clone();
        for (k, v) in out.series.iter_mut() {
            *v = self.invert_series(k, v)?;
        }
        for (k, v) in out.exogenous.iter_mut() {
            let mm = self
                .channels
                .get(k)
                .ok_or_else(|| SeriesError::Unfitted(k.clone()))?;
            v.iter_mut().for_each(|x| *x = mm.invert(*x));
        }
        Ok(out)
    }
}

/// Apply a normalizer fitted on the train view of the same collection.
pub fn minmax_normalize(c: &SeriesCollection, n: &Normalizer) -> Result<SeriesCollection> {
    n.apply(c)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregationLevel {
    /// Sum member series per hierarchy label; output ids are region ids.
    AreaToRegion,
    /// Sum every series into one output series named `name`.
    RegionToSystem { name: String },
}

/// Element-wise sums over hierarchy members on the raw scale. Members of
/// different lengths are summed over their common prefix.
pub fn aggregate_sum(c: &SeriesCollection, level: &AggregationLevel) -> Result<SeriesCollection> {
    let mut groups: BTreeMap<String, Vec<&Vec<f64>>> = BTreeMap::new();
    let mut hierarchy = BTreeMap::new();
    match level {
        AggregationLevel::AreaToRegion => {
            for (id, values) in &c.series {
                let region = c
                    .hierarchy
                    .get(id)
                    .ok_or_else(|| SeriesError::MissingLabel(id.clone()))?;
                groups.entry(region.clone()).or_default().push(values);
            }
        }
        AggregationLevel::RegionToSystem { name } => {
            groups.insert(name.clone(), c.series.values().collect());
            for region in groups.keys() {
                hierarchy.insert(region.clone(), region.clone());
            }
        }
    }
    let series = groups
        .into_iter()
        .map(|(g, members)| {
            let len = members.iter().map(|m| m.len()).min().unwrap_or(0);
            let sum = (0..len)
                .map(|t| members.iter().map(|m| m[t]).sum::<f64>())
                .collect();
            (g, sum)
        })
        .collect();
    SeriesCollection::new(c.start, series, c.exogenous.clone(), hierarchy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use std::io::Write;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
    }

    fn collection(series: &[(&str, Vec<f64>)]) -> SeriesCollection {
        SeriesCollection::new(
            t0(),
            series.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            BTreeMap::new(),
            BTreeMap::new(),
        )
        .unwrap()
    }

    fn write_csv(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    fn csv_text(rows: usize, skip: Option<usize>, blank: Option<usize>) -> String {
        let mut s = String::from("timestamp,a,b\n");
        for t in 0..rows {
            if Some(t) == skip {
                continue;
            }
            let ts = format_timestamp(t0() + Duration::hours(t as i64));
            if Some(t) == blank {
                s.push_str(&format!("{ts},,{}\n", 100 + t));
            } else {
                s.push_str(&format!("{ts},{},{}\n", t as f64 * 0.5, 100 + t));
            }
        }
        s
    }

    #[test]
    fn ingests_clean_file() {
        let f = write_csv(&csv_text(48, None, None));
        let c = ingest_wide_csv(f.path(), &IngestConfig::default()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get("a").unwrap().len(), 48);
        assert_eq!(c.get("b").unwrap()[47], 147.0);
        assert_eq!(c.start(), t0());
    }

    #[test]
    fn missing_hour_rejected_with_timestamp() {
        let f = write_csv(&csv_text(48, Some(10), None));
        let cfg = IngestConfig {
            gap_policy: GapPolicy::Reject,
        };
        let err = ingest_wide_csv(f.path(), &cfg).unwrap_err();
        match err {
            SeriesError::GapTooLong { timestamp, .. } => {
                assert_eq!(timestamp, "2024-01-01T10:00:00Z")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_value_forward_filled() {
        let f = write_csv(&csv_text(48, None, Some(7)));
        let cfg = IngestConfig {
            gap_policy: GapPolicy::ForwardFill { max_gap: 2 },
        };
        let c = ingest_wide_csv(f.path(), &cfg).unwrap();
        // hand-filled reference: hour 7 takes hour 6's value
        let mut expected: Vec<f64> = (0..48).map(|t| t as f64 * 0.5).collect();
        expected[7] = expected[6];
        assert_eq!(c.get("a").unwrap(), expected.as_slice());
    }

    #[test]
    fn missing_row_forward_filled_in_every_column() {
        let f = write_csv(&csv_text(48, Some(20), None));
        let c = ingest_wide_csv(f.path(), &IngestConfig::default()).unwrap();
        assert_eq!(c.get("b").unwrap().len(), 48);
        assert_eq!(c.get("b").unwrap()[20], 119.0);
    }

    #[test]
    fn long_gap_rejected_under_ffill() {
        let mut text = csv_text(48, None, None);
        for h in 10..14 {
            let ts = format_timestamp(t0() + Duration::hours(h));
            text = text.replace(&format!("{ts},{}", h as f64 * 0.5), &format!("{ts},"));
        }
        let f = write_csv(&text);
        let cfg = IngestConfig {
            gap_policy: GapPolicy::ForwardFill { max_gap: 3 },
        };
        assert!(matches!(
            ingest_wide_csv(f.path(), &cfg),
            Err(SeriesError::GapTooLong { hours: 4, .. })
        ));
    }

    #[test]
    fn malformed_inputs() {
        let f = write_csv("timestamp,a\n2024-01-01 00:00,1\n");
        assert!(matches!(
            ingest_wide_csv(f.path(), &IngestConfig::default()),
            Err(SeriesError::MalformedTimestamp { line: 2, .. })
        ));
        let f = write_csv("timestamp,a\n2024-01-01T00:00:00Z,1\n2024-01-01T00:30:00Z,2\n");
        assert!(matches!(
            ingest_wide_csv(f.path(), &IngestConfig::default()),
            Err(SeriesError::NotHourAligned { .. })
        ));
        let f = write_csv("timestamp,a\n2024-01-01T01:00:00Z,1\n2024-01-01T00:00:00Z,2\n");
        assert!(matches!(
            ingest_wide_csv(f.path(), &IngestConfig::default()),
            Err(SeriesError::NonHourlyStep { .. })
        ));
        let f = write_csv("timestamp,a\n2024-01-01T00:00:00Z,abc\n");
        assert!(matches!(
            ingest_wide_csv(f.path(), &IngestConfig::default()),
            Err(SeriesError::NonNumeric { .. })
        ));
        let f = write_csv("time,a\n2024-01-01T00:00:00Z,1\n");
        assert!(matches!(
            ingest_wide_csv(f.path(), &IngestConfig::default()),
            Err(SeriesError::BadHeader)
        ));
    }

    #[test]
    fn csv_round_trip() {
        let c = collection(&[("x", vec![1.5, 2.25, 3.0]), ("y", vec![0.1, 0.2])]);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_wide_csv(f.path(), c.start(), c.series()).unwrap();
        let back = ingest_wide_csv(f.path(), &IngestConfig::default()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn split_lengths_and_partition() {
        let values: Vec<f64> = (0..100).map(|v| v as f64 * 1.25).collect();
        let c = collection(&[("s", values.clone())]);
        let spec = SplitSpec::from_hours(t0(), 59, 79, 99);
        let v = split_by_time(&c, &spec).unwrap();
        assert_eq!(v.train.get("s").unwrap().len(), 60);
        assert_eq!(v.val.get("s").unwrap().len(), 20);
        assert_eq!(v.test.get("s").unwrap().len(), 20);
        assert_eq!(v.val.start(), t0() + Duration::hours(60));
        let joined: Vec<f64> = [&v.train, &v.val, &v.test]
            .iter()
            .flat_map(|w| w.get("s").unwrap().to_vec())
            .collect();
        assert_eq!(joined, values);
    }

    #[test]
    fn split_rejects_bad_order_and_range() {
        let c = collection(&[("s", vec![1.0; 100])]);
        let bad = SplitSpec::from_hours(t0(), 80, 79, 99);
        assert!(matches!(
            split_by_time(&c, &bad),
            Err(SeriesError::InvalidSplit(_))
        ));
        let past = SplitSpec::from_hours(t0(), 50, 79, 100);
        assert!(split_by_time(&c, &past).is_err());
    }

    #[test]
    fn minmax_examples() {
        let train = collection(&[("s", vec![10.0, 20.0, 30.0])]);
        let n = Normalizer::fit(&train).unwrap();
        let out = minmax_normalize(&train, &n).unwrap();
        assert_eq!(out.get("s").unwrap(), &[0.0, 0.5, 1.0]);
        let test = collection(&[("s", vec![40.0])]);
        assert_eq!(n.apply(&test).unwrap().get("s").unwrap(), &[1.5]);
    }

    #[test]
    fn minmax_errors() {
        let constant = collection(&[("s", vec![3.0; 5])]);
        assert!(matches!(
            Normalizer::fit(&constant),
            Err(SeriesError::ConstantSeries(_))
        ));
        let n = Normalizer::fit(&collection(&[("s", vec![1.0, 2.0])])).unwrap();
        let other = collection(&[("t", vec![1.0, 2.0])]);
        assert!(matches!(n.apply(&other), Err(SeriesError::Unfitted(_))));
    }

    #[test]
    fn normalizer_ignores_eval_views() {
        let values: Vec<f64> = (0..100).map(|v| (v as f64).sin() + 3.0).collect();
        let mut perturbed = values.clone();
        perturbed[90] = 1e6;
        perturbed[70] = -1e6;
        let spec = SplitSpec::from_hours(t0(), 59, 79, 99);
        let a = split_by_time(&collection(&[("s", values)]), &spec).unwrap();
        let b = split_by_time(&collection(&[("s", perturbed)]), &spec).unwrap();
        assert_eq!(
            Normalizer::fit(&a.train).unwrap(),
            Normalizer::fit(&b.train).unwrap()
        );
    }

    #[test]
    fn region_and_system_sums() {
        let mut h = BTreeMap::new();
        h.insert("a1".to_string(), "r1".to_string());
        h.insert("a2".to_string(), "r1".to_string());
        h.insert("a3".to_string(), "r2".to_string());
        let c = collection(&[
            ("a1", vec![1.0, 2.0, 3.0]),
            ("a2", vec![4.0, 5.0, 6.0]),
            ("a3", vec![0.5, 0.5, 0.5]),
        ])
        .with_hierarchy(h);
        let regions = aggregate_sum(&c, &AggregationLevel::AreaToRegion).unwrap();
        assert_eq!(regions.get("r1").unwrap(), &[5.0, 7.0, 9.0]);
        let sys_level = AggregationLevel::RegionToSystem {
            name: "system".into(),
        };
        let from_regions = aggregate_sum(&regions, &sys_level).unwrap();
        let from_areas = aggregate_sum(&c, &sys_level).unwrap();
        assert_eq!(from_regions.get("system").unwrap(), &[5.5, 7.5, 9.5]);
        assert_eq!(from_regions.get("system"), from_areas.get("system"));
    }

    #[test]
    fn aggregation_requires_labels() {
        let c = collection(&[("a1", vec![1.0])]);
        assert!(matches!(
            aggregate_sum(&c, &AggregationLevel::AreaToRegion),
            Err(SeriesError::MissingLabel(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn normalize_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 2..64)) {
            proptest::prop_assume!(MinMax::fit(&values).is_some());
            let c = collection(&[("s", values.clone())]);
            let n = Normalizer::fit(&c).unwrap();
            let back = n.invert(&n.apply(&c).unwrap()).unwrap();
            let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (a, b) in back.get("s").unwrap().iter().zip(&values) {
                proptest::prop_assert!((a - b).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn aggregation_is_linear(
            a in proptest::collection::vec(0.0f64..100.0, 8),
            b in proptest::collection::vec(0.0f64..100.0, 8),
            k in 0.1f64..10.0,
        ) {
            let mut h = BTreeMap::new();
            h.insert("a".to_string(), "r".to_string());
            h.insert("b".to_string(), "r".to_string());
            let c = collection(&[("a", a), ("b", b)]).with_hierarchy(h);
            let lhs = aggregate_sum(&c.scaled(k), &AggregationLevel::AreaToRegion).unwrap();
            let rhs = aggregate_sum(&c, &AggregationLevel::AreaToRegion).unwrap();
            for (x, y) in lhs.get("r").unwrap().iter().zip(rhs.get("r").unwrap()) {
                proptest::prop_assert!((x - k * y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }
    }
}
