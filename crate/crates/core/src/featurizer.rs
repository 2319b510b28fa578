//! Supervised sample construction for one-hour-ahead forecasting, and the
//! heterogeneity indices used to characterize load profiles.
//!
//! A row targeting hour `τ` only reads load values at hours `≤ τ-1`.
//! Exogenous channels are either aligned with the target (forecast values
//! assumed available one hour ahead) or lagged by at least one hour.
//! Calendar columns derive from the target timestamp in local time.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Datelike, Duration, NaiveDate, Timelike, Utc, Weekday};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::series_store::SeriesCollection;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("series `{id}` has {len} hours; need more than {need}")]
    TooShort { id: String, len: usize, need: usize },
    #[error("exogenous channel `{channel}` covers {len} hours; series `{id}` needs {need}")]
    MissingExogenous {
        id: String,
        channel: String,
        len: usize,
        need: usize,
    },
    #[error("interaction operand `{0}` is not a declared feature")]
    UnknownInteraction(String),
    #[error("invalid feature spec: {0}")]
    InvalidSpec(String),
    #[error("unknown series `{0}`")]
    UnknownSeries(String),
    #[error("sample sets have different feature columns")]
    SchemaMismatch,
    #[error("profile needs at least {need} hours, got {len}")]
    ProfileTooShort { len: usize, need: usize },
    #[error("profile needs a strictly positive mean load, got {0}")]
    NonPositiveMean(f64),
    #[error("holiday calendar: {0}")]
    Holidays(String),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CalendarCycle {
    HourOfDay,
    DayOfWeek,
    DayOfMonth,
    DayOfYear,
    WeekOfYear,
    Month,
}

impl CalendarCycle {
    fn prefix(self) -> &'static str {
        match self {
            CalendarCycle::HourOfDay => "hour",
            CalendarCycle::DayOfWeek => "dow",
            CalendarCycle::DayOfMonth => "dom",
            CalendarCycle::DayOfYear => "doy",
            CalendarCycle::WeekOfYear => "week",
            CalendarCycle::Month => "month",
        }
    }

    /// Phase in [0, 1) of the local timestamp within this cycle.
    fn phase(self, local: DateTime<Utc>) -> f64 {
        match self {
            CalendarCycle::HourOfDay => local.hour() as f64 / 24.0,
            CalendarCycle::DayOfWeek => local.weekday().num_days_from_monday() as f64 / 7.0,
            CalendarCycle::DayOfMonth => local.day0() as f64 / 31.0,
            CalendarCycle::DayOfYear => local.ordinal0() as f64 / 366.0,
            CalendarCycle::WeekOfYear => (local.iso_week().week0() as f64) / 53.0,
            CalendarCycle::Month => local.month0() as f64 / 12.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alignment {
    /// Value at the target hour.
    AtTarget,
    /// Value `k ≥ 1` hours before the target.
    Lagged(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExogenousFeature {
    pub channel: String,
    pub alignment: Alignment,
    /// Emit powers 1..=max_power of the aligned value.
    pub max_power: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PowerTerm {
    pub lag: usize,
    pub degree: u32,
}

/// Declarative feature catalog. Column order is fixed by field order:
/// lags, lag powers, moving averages, EMA, calendar sin/cos pairs, holiday
/// flag, pandemic flag, exogenous terms, interactions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// History length consumed before the first target (hours).
    pub window: usize,
    pub lags: Vec<usize>,
    pub lag_powers: Vec<PowerTerm>,
    pub moving_averages: Vec<usize>,
    pub ema_span: Option<usize>,
    pub calendar: Vec<CalendarCycle>,
    pub holidays: Vec<NaiveDate>,
    /// Inclusive local-date interval flagged as the pandemic period.
    pub pandemic: Option<(NaiveDate, NaiveDate)>,
    pub exogenous: Vec<ExogenousFeature>,
    pub interactions: Vec<(String, String)>,
    /// Fixed offset from UTC used for every calendar decomposition.
    pub utc_offset_hours: i32,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        let mut spec = Self::load_only();
        spec.exogenous.push(ExogenousFeature {
            channel: "temperature".into(),
            alignment: Alignment::AtTarget,
            max_power: 2,
        });
        spec.interactions
            .push(("temperature".into(), "hour_sin".into()));
        spec
    }
}

impl FeatureSpec {
    /// The default catalog without any exogenous channel.
    pub fn load_only() -> Self {
        Self {
            window: 168,
            lags: vec![1, 2, 3, 24, 48, 72, 96, 120, 144, 168],
            lag_powers: vec![
                PowerTerm { lag: 1, degree: 2 },
                PowerTerm { lag: 1, degree: 3 },
                PowerTerm { lag: 24, degree: 2 },
                PowerTerm { lag: 24, degree: 3 },
            ],
            moving_averages: vec![3, 12, 24, 72, 168],
            ema_span: Some(168),
            calendar: vec![
                CalendarCycle::HourOfDay,
                CalendarCycle::DayOfWeek,
                CalendarCycle::Month,
            ],
            holidays: Vec::new(),
            pandemic: Some((
                NaiveDate::from_ymd_opt(2020, 5, 1).expect("valid date"),
                NaiveDate::from_ymd_opt(2022, 12, 31).expect("valid date"),
            )),
            exogenous: Vec::new(),
            interactions: vec![("lag_1".into(), "mave_168".into())],
            utc_offset_hours: 0,
        }
    }

    /// Feature names of the non-interaction columns, in column order.
    fn base_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        names.extend(self.lags.iter().map(|k| format!("lag_{k}")));
        names.extend(
            self.lag_powers
                .iter()
                .map(|p| format!("lag_{}_pow{}", p.lag, p.degree)),
        );
        names.extend(self.moving_averages.iter().map(|w| format!("mave_{w}")));
        if let Some(span) = self.ema_span {
            names.push(format!("ema_{span}"));
        }
        for c in &self.calendar {
            names.push(format!("{}_sin", c.prefix()));
            names.push(format!("{}_cos", c.prefix()));
        }
        names.push("holiday".into());
        if self.pandemic.is_some() {
            names.push("pandemic".into());
        }
        for e in &self.exogenous {
            let stem = match e.alignment {
                Alignment::AtTarget => e.channel.clone(),
                Alignment::Lagged(k) => format!("{}_lag_{k}", e.channel),
            };
            for d in 1..=e.max_power {
                names.push(if d == 1 {
                    stem.clone()
                } else {
                    format!("{stem}_pow{d}")
                });
            }
        }
        names
    }

    /// Expanded column names in matrix order.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = self.base_names();
        names.extend(self.interactions.iter().map(|(a, b)| format!("{a}_x_{b}")));
        names
    }

    /// Columns that may read the target hour itself.
    pub fn at_target_columns(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for e in &self.exogenous {
            if e.alignment == Alignment::AtTarget {
                for d in 1..=e.max_power {
                    out.insert(if d == 1 {
                        e.channel.clone()
                    } else {
                        format!("{}_pow{d}", e.channel)
                    });
                }
            }
        }
        for (a, b) in &self.interactions {
            if out.contains(a) || out.contains(b) {
                out.insert(format!("{a}_x_{b}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FeatureError::InvalidSpec(msg));
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        for &k in &self.lags {
            if k == 0 || k > self.window {
                return bad(format!("lag {k} outside 1..={}", self.window));
            }
        }
        for p in &self.lag_powers {
            if p.lag == 0 || p.lag > self.window || p.degree < 2 {
                return bad(format!("invalid power term lag {} degree {}", p.lag, p.degree));
            }
        }
        for &w in &self.moving_averages {
            if w == 0 || w > self.window {
                return bad(format!("moving-average window {w} outside 1..={}", self.window));
            }
        }
        if self.ema_span == Some(0) {
            return bad("EMA span must be positive".into());
        }
        for e in &self.exogenous {
            if e.max_power == 0 {
                return bad(format!("channel `{}` needs max_power ≥ 1", e.channel));
            }
            if let Alignment::Lagged(k) = e.alignment {
                if k == 0 || k > self.window {
                    return bad(format!("channel `{}` lag {k} outside 1..={}", e.channel, self.window));
                }
            }
        }
        if let Some((a, b)) = self.pandemic {
            if a > b {
                return bad("pandemic interval is reversed".into());
            }
        }
        let base: BTreeSet<String> = self.base_names().into_iter().collect();
        for (a, b) in &self.interactions {
            for operand in [a, b] {
                if !base.contains(operand) {
                    return Err(FeatureError::UnknownInteraction(operand.clone()));
                }
            }
        }
        let names = self.feature_names();
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return bad("duplicate feature names".into());
        }
        Ok(())
    }

    /// Stable digest of the canonical JSON encoding.
    pub fn spec_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("feature spec serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Read a one-column CSV with header `date` and `YYYY-MM-DD` rows.
pub fn read_holidays(path: &Path) -> Result<Vec<NaiveDate>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| FeatureError::Holidays(e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| FeatureError::Holidays(e.to_string()))?;
        let raw = rec.get(0).unwrap_or("").trim();
        let date = NaiveDate::parse_from_str(raw, "%Y-%m-%d")
            .map_err(|_| FeatureError::Holidays(format!("bad date `{raw}`")))?;
        out.push(date);
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowMeta {
    pub series: Arc<str>,
    pub target: DateTime<Utc>,
}

/// Supervised view: `x` is m×p, `y` has m targets (horizon one hour).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub feature_names: Vec<String>,
    pub rows: Vec<RowMeta>,
}

impl SampleSet {
    pub fn empty(feature_names: Vec<String>) -> Self {
        Self {
            x: Array2::zeros((0, feature_names.len())),
            y: Array1::zeros(0),
            feature_names,
            rows: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    /// Row-wise concatenation, preserving the given order.
    pub fn pool<'a>(sets: impl IntoIterator<Item = &'a SampleSet>) -> Result<SampleSet> {
        let sets: Vec<&SampleSet> = sets.into_iter().collect();
        let Some(first) = sets.first() else {
            return Err(FeatureError::SchemaMismatch);
        };
        let names = first.feature_names.clone();
        if sets.iter().any(|s| s.feature_names != names) {
            return Err(FeatureError::SchemaMismatch);
        }
        let m: usize = sets.iter().map(|s| s.n_rows()).sum();
        let p = names.len();
        let mut x = Vec::with_capacity(m * p);
        let mut y = Vec::with_capacity(m);
        let mut rows = Vec::with_capacity(m);
        for s in &sets {
            x.extend(s.x.iter().copied());
            y.extend(s.y.iter().copied());
            rows.extend(s.rows.iter().cloned());
        }
        Ok(SampleSet {
            x: Array2::from_shape_vec((m, p), x).expect("shape matches"),
            y: Array1::from(y),
            feature_names: names,
            rows,
        })
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> SampleSet {
        SampleSet {
            x: self.x.select(ndarray::Axis(0), indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }
}

fn local_time(ts: DateTime<Utc>, offset_hours: i32) -> DateTime<Utc> {
    ts + Duration::hours(offset_hours as i64)
}

/// Samples for one series from a (normalized) collection.
pub fn build_samples(c: &SeriesCollection, id: &str, spec: &FeatureSpec) -> Result<SampleSet> {
    let values = c
        .get(id)
        .ok_or_else(|| FeatureError::UnknownSeries(id.to_string()))?;
    build_series_samples(id, values, c.start(), c.exogenous(), spec)
}

/// Samples for a raw sequence starting at `start`. Produces one row per
/// target hour `τ ∈ [window, len)`.
pub fn build_series_samples(
    id: &str,
    values: &[f64],
    start: DateTime<Utc>,
    exogenous: &BTreeMap<String, Vec<f64>>,
    spec: &FeatureSpec,
) -> Result<SampleSet> {
    spec.validate()?;
    let len = values.len();
    let w = spec.window;
    if len <= w + 1 {
        return Err(FeatureError::TooShort {
            id: id.to_string(),
            len,
            need: w + 1,
        });
    }
    for e in &spec.exogenous {
        let ch_len = exogenous.get(&e.channel).map_or(0, Vec::len);
        if ch_len < len {
            return Err(FeatureError::MissingExogenous {
                id: id.to_string(),
                channel: e.channel.clone(),
                len: ch_len,
                need: len,
            });
        }
    }

    let targets: Vec<usize> = (w..len).collect();
    let m = targets.len();
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();

    for &k in &spec.lags {
        columns.push((format!("lag_{k}"), targets.iter().map(|&t| values[t - k]).collect()));
    }
    for p in &spec.lag_powers {
        columns.push((
            format!("lag_{}_pow{}", p.lag, p.degree),
            targets
                .iter()
                .map(|&t| values[t - p.lag].powi(p.degree as i32))
                .collect(),
        ));
    }
    for &win in &spec.moving_averages {
        let col = targets
            .iter()
            .map(|&t| values[t - win..t].iter().sum::<f64>() / win as f64)
            .collect();
        columns.push((format!("mave_{win}"), col));
    }
    if let Some(span) = spec.ema_span {
        let alpha = 2.0 / (span as f64 + 1.0);
        // ema[t] summarizes values[..=t]
        let mut ema = Vec::with_capacity(len);
        ema.push(values[0]);
        for t in 1..len {
            ema.push(alpha * values[t] + (1.0 - alpha) * ema[t - 1]);
        }
        columns.push((format!("ema_{span}"), targets.iter().map(|&t| ema[t - 1]).collect()));
    }

    let stamps: Vec<DateTime<Utc>> = targets
        .iter()
        .map(|&t| start + Duration::hours(t as i64))
        .collect();
    let locals: Vec<DateTime<Utc>> = stamps
        .iter()
        .map(|&ts| local_time(ts, spec.utc_offset_hours))
        .collect();
    for &cycle in &spec.calendar {
        let angles: Vec<f64> = locals
            .iter()
            .map(|&l| 2.0 * std::f64::consts::PI * cycle.phase(l))
            .collect();
        columns.push((
            format!("{}_sin", cycle.prefix()),
            angles.iter().map(|a| a.sin()).collect(),
        ));
        columns.push((
            format!("{}_cos", cycle.prefix()),
            angles.iter().map(|a| a.cos()).collect(),
        ));
    }
    let holidays: BTreeSet<NaiveDate> = spec.holidays.iter().copied().collect();
    columns.push((
        "holiday".into(),
        locals
            .iter()
            .map(|l| f64::from(u8::from(holidays.contains(&l.date_naive()))))
            .collect(),
    ));
    if let Some((a, b)) = spec.pandemic {
        columns.push((
            "pandemic".into(),
            locals
                .iter()
                .map(|l| {
                    let d = l.date_naive();
                    f64::from(u8::from(a <= d && d <= b))
                })
                .collect(),
        ));
    }
    for e in &spec.exogenous {
        let ch = &exogenous[&e.channel];
        let (stem, shift) = match e.alignment {
            Alignment::AtTarget => (e.channel.clone(), 0),
            Alignment::Lagged(k) => (format!("{}_lag_{k}", e.channel), k),
        };
        for d in 1..=e.max_power {
            let name = if d == 1 {
                stem.clone()
            } else {
                format!("{stem}_pow{d}")
            };
            columns.push((name, targets.iter().map(|&t| ch[t - shift].powi(d as i32)).collect()));
        }
    }
    let index: HashMap<&str, usize> = columns
        .iter()
        .enumerate()
        .map(|(i, (n, _))| (n.as_str(), i))
        .collect();
    let mut extra = Vec::with_capacity(spec.interactions.len());
    for (a, b) in &spec.interactions {
        let ia = *index
            .get(a.as_str())
            .ok_or_else(|| FeatureError::UnknownInteraction(a.clone()))?;
        let ib = *index
            .get(b.as_str())
            .ok_or_else(|| FeatureError::UnknownInteraction(b.clone()))?;
        let col = columns[ia]
            .1
            .iter()
            .zip(&columns[ib].1)
            .map(|(u, v)| u * v)
            .collect();
        extra.push((format!("{a}_x_{b}"), col));
    }
    columns.extend(extra);

    let p = columns.len();
    let mut x = Array2::zeros((m, p));
    for (j, (_, col)) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            x[[i, j]] = *v;
        }
    }
    let series: Arc<str> = Arc::from(id);
    Ok(SampleSet {
        x,
        y: targets.iter().map(|&t| values[t]).collect(),
        feature_names: columns.into_iter().map(|(n, _)| n).collect(),
        rows: stamps
            .into_iter()
            .map(|target| RowMeta {
                series: Arc::clone(&series),
                target,
            })
            .collect(),
    })
}

/// Descriptive indices of a load profile. All are dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityProfile {
    /// Population std of the mean hour-of-day profile over the overall mean.
    pub seasonality_index: f64,
    /// Mean absolute hour-to-hour change over the overall mean.
    pub total_variation: f64,
    /// Mean load 00:00–05:59 over mean load 12:00–17:59 (local).
    pub night_to_day: f64,
    /// Mean Saturday+Sunday load over mean Monday–Friday load (local).
    pub weekend_to_weekday: f64,
}

pub const PROFILE_MIN_HOURS: usize = 14 * 24;

pub fn heterogeneity_profile(
    values: &[f64],
    start: DateTime<Utc>,
    utc_offset_hours: i32,
) -> Result<HeterogeneityProfile> {
    if values.len() < PROFILE_MIN_HOURS {
        return Err(FeatureError::ProfileTooShort {
            len: values.len(),
            need: PROFILE_MIN_HOURS,
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(FeatureError::NonPositiveMean(mean));
    }

    let mut hour_sum = [0.0f64; 24];
    let mut hour_cnt = [0usize; 24];
    let (mut night, mut night_n, mut day, mut day_n) = (0.0, 0usize, 0.0, 0usize);
    let (mut weekend, mut weekend_n, mut weekday, mut weekday_n) = (0.0, 0usize, 0.0, 0usize);
    for (t, &v) in values.iter().enumerate() {
        let local = local_time(start + Duration::hours(t as i64), utc_offset_hours);
        let h = local.hour() as usize;
        hour_sum[h] += v;
        hour_cnt[h] += 1;
        if h < 6 {
            night += v;
            night_n += 1;
        } else if (12..18).contains(&h) {
            day += v;
            day_n += 1;
        }
        if matches!(local.weekday(), Weekday::Sat | Weekday::Sun) {
            weekend += v;
            weekend_n += 1;
        } else {
            weekday += v;
            weekday_n += 1;
        }
    }
    let profile: Vec<f64> = hour_sum
        .iter()
        .zip(hour_cnt)
        .map(|(s, c)| s / c as f64)
        .collect();
    let pmean = profile.iter().sum::<f64>() / 24.0;
    let pvar = profile.iter().map(|v| (v - pmean).powi(2)).sum::<f64>() / 24.0;
    let tv = values.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (n - 1.0);

    Ok(HeterogeneityProfile {
        seasonality_index: pvar.sqrt() / mean,
        total_variation: tv / mean,
        night_to_day: (night / night_n as f64) / (day / day_n as f64),
        weekend_to_weekday: (weekend / weekend_n as f64) / (weekday / weekday_n as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        // a Monday
        Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
    }

    fn ramp(len: usize) -> Vec<f64> {
        (0..len).map(|t| 1.0 + (t as f64 * 0.37).sin() * 0.5).collect()
    }

    fn temperature(len: usize) -> BTreeMap<String, Vec<f64>> {
        let mut m = BTreeMap::new();
        m.insert(
            "temperature".to_string(),
            (0..len).map(|t| (t as f64 * 0.11).cos()).collect(),
        );
        m
    }

    #[test]
    fn default_spec_column_count() {
        let spec = FeatureSpec::default();
        spec.validate().unwrap();
        // 10 lags, 4 powers, 5 MAs, EMA, 3 sin/cos pairs, holiday, pandemic,
        // temperature + square, 2 interactions
        assert_eq!(spec.feature_names().len(), 32);
        assert_eq!(FeatureSpec::load_only().feature_names().len(), 29);
    }

    #[test]
    fn row_count_matches_window_enumeration() {
        let s = build_series_samples("s", &ramp(200), t0(), &temperature(200), &FeatureSpec::default())
            .unwrap();
        // brute force: targets τ with every lag τ-k ≥ 0 for k ≤ 168
        let brute = (0..200usize).filter(|&t| t >= 168).count();
        assert_eq!(s.n_rows(), brute);
        assert_eq!(s.n_rows(), 32);
        assert_eq!(s.n_features(), s.feature_names.len());
    }

    #[test]
    fn hour_encoding_at_six() {
        let s = build_series_samples("s", &ramp(200), t0(), &temperature(200), &FeatureSpec::default())
            .unwrap();
        let col = s.feature_names.iter().position(|n| n == "hour_sin").unwrap();
        let row = s
            .rows
            .iter()
            .position(|r| r.target.hour() == 6)
            .unwrap();
        assert!((s.x[[row, col]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lag_and_window_values() {
        let v = ramp(300);
        let spec = FeatureSpec::load_only();
        let s = build_series_samples("s", &v, t0(), &BTreeMap::new(), &spec).unwrap();
        let name = |n: &str| s.feature_names.iter().position(|x| x == n).unwrap();
        let i = 50;
        let tau = 168 + i;
        assert_eq!(s.y[i], v[tau]);
        assert_eq!(s.x[[i, name("lag_1")]], v[tau - 1]);
        assert_eq!(s.x[[i, name("lag_168")]], v[tau - 168]);
        assert_eq!(s.x[[i, name("lag_24_pow3")]], v[tau - 24].powi(3));
        let mave3 = (v[tau - 1] + v[tau - 2] + v[tau - 3]) / 3.0;
        assert!((s.x[[i, name("mave_3")]] - mave3).abs() < 1e-15);
        let expected = s.x[[i, name("lag_1")]] * s.x[[i, name("mave_168")]];
        assert_eq!(s.x[[i, name("lag_1_x_mave_168")]], expected);
    }

    #[test]
    fn ema_initialized_at_first_observation() {
        let v = vec![2.0; 200];
        let mut spec = FeatureSpec::load_only();
        spec.ema_span = Some(3);
        let s = build_series_samples("s", &v, t0(), &BTreeMap::new(), &spec).unwrap();
        let j = s.feature_names.iter().position(|x| x == "ema_3").unwrap();
        assert!(s.x.column(j).iter().all(|&e| e == 2.0));
    }

    #[test]
    fn errors() {
        let spec = FeatureSpec::default();
        assert!(matches!(
            build_series_samples("s", &ramp(169), t0(), &temperature(169), &spec),
            Err(FeatureError::TooShort { .. })
        ));
        assert!(matches!(
            build_series_samples("s", &ramp(200), t0(), &temperature(150), &spec),
            Err(FeatureError::MissingExogenous { .. })
        ));
        let mut bad = FeatureSpec::load_only();
        bad.interactions.push(("lag_1".into(), "nope".into()));
        assert!(matches!(
            bad.validate(),
            Err(FeatureError::UnknownInteraction(ref n)) if n == "nope"
        ));
        let mut bad = FeatureSpec::load_only();
        bad.lags.push(169);
        assert!(matches!(bad.validate(), Err(FeatureError::InvalidSpec(_))));
    }

    #[test]
    fn holiday_and_pandemic_flags() {
        let mut spec = FeatureSpec::load_only();
        spec.holidays = vec![NaiveDate::from_ymd_opt(2024, 1, 9).unwrap()];
        spec.pandemic = Some((
            NaiveDate::from_ymd_opt(2024, 1, 10).unwrap(),
            NaiveDate::from_ymd_opt(2024, 1, 10).unwrap(),
        ));
        let s = build_series_samples("s", &ramp(400), t0(), &BTreeMap::new(), &spec).unwrap();
        let h = s.feature_names.iter().position(|x| x == "holiday").unwrap();
        let p = s.feature_names.iter().position(|x| x == "pandemic").unwrap();
        for (i, r) in s.rows.iter().enumerate() {
            assert_eq!(s.x[[i, h]] == 1.0, r.target.day() == 9);
            assert_eq!(s.x[[i, p]] == 1.0, r.target.day() == 10);
        }
    }

    #[test]
    fn local_offset_shifts_calendar() {
        let mut spec = FeatureSpec::load_only();
        spec.utc_offset_hours = -7;
        let s = build_series_samples("s", &ramp(200), t0(), &BTreeMap::new(), &spec).unwrap();
        let col = s.feature_names.iter().position(|n| n == "hour_sin").unwrap();
        // 13:00 UTC is 06:00 at UTC-7
        let row = s.rows.iter().position(|r| r.target.hour() == 13).unwrap();
        assert!((s.x[[row, col]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lagged_exogenous_and_at_target_columns() {
        let mut spec = FeatureSpec::default();
        spec.exogenous.push(ExogenousFeature {
            channel: "temperature".into(),
            alignment: Alignment::Lagged(24),
            max_power: 1,
        });
        let at = spec.at_target_columns();
        assert!(at.contains("temperature"));
        assert!(at.contains("temperature_pow2"));
        assert!(at.contains("temperature_x_hour_sin"));
        assert!(!at.contains("temperature_lag_24"));
        let exo = temperature(300);
        let s = build_series_samples("s", &ramp(300), t0(), &exo, &spec).unwrap();
        let j = s.feature_names.iter().position(|n| n == "temperature_lag_24").unwrap();
        assert_eq!(s.x[[10, j]], exo["temperature"][168 + 10 - 24]);
    }

    #[test]
    fn pooling_and_selection() {
        let spec = FeatureSpec::load_only();
        let a = build_series_samples("a", &ramp(200), t0(), &BTreeMap::new(), &spec).unwrap();
        let b = build_series_samples("b", &ramp(210), t0(), &BTreeMap::new(), &spec).unwrap();
        let pooled = SampleSet::pool([&a, &b]).unwrap();
        assert_eq!(pooled.n_rows(), 32 + 42);
        assert_eq!(&*pooled.rows[32].series, "b");
        let sel = pooled.select(&[33, 0]);
        assert_eq!(sel.row(0), pooled.row(33));
        assert_eq!(sel.y[1], pooled.y[0]);
    }

    #[test]
    fn spec_hash_is_stable() {
        assert_eq!(FeatureSpec::default().spec_hash(), FeatureSpec::default().spec_hash());
        assert_ne!(
            FeatureSpec::default().spec_hash(),
            FeatureSpec::load_only().spec_hash()
        );
    }

    #[test]
    fn constant_profile() {
        let p = heterogeneity_profile(&vec![5.0; 24 * 21], t0(), 0).unwrap();
        assert_eq!(p.seasonality_index, 0.0);
        assert_eq!(p.total_variation, 0.0);
        assert_eq!(p.night_to_day, 1.0);
        assert_eq!(p.weekend_to_weekday, 1.0);
    }

    #[test]
    fn midday_sinusoid_night_to_day_closed_form() {
        // y = 10 + 3 sin(2π(h-9)/24), peaking at 15:00
        let v: Vec<f64> = (0..24 * 28)
            .map(|t| 10.0 + 3.0 * (2.0 * std::f64::consts::PI * ((t % 24) as f64 - 9.0) / 24.0).sin())
            .collect();
        let p = heterogeneity_profile(&v, t0(), 0).unwrap();
        let window_mean = |hours: std::ops::Range<i32>| {
            hours
                .map(|h| 10.0 + 3.0 * (2.0 * std::f64::consts::PI * (h as f64 - 9.0) / 24.0).sin())
                .sum::<f64>()
                / 6.0
        };
        let expected = window_mean(0..6) / window_mean(12..18);
        assert!(p.night_to_day < 1.0);
        assert!((p.night_to_day - expected).abs() < 1e-12);
    }

    #[test]
    fn profile_errors() {
        assert!(matches!(
            heterogeneity_profile(&[1.0; 100], t0(), 0),
            Err(FeatureError::ProfileTooShort { .. })
        ));
        assert!(matches!(
            heterogeneity_profile(&vec![-1.0; 24 * 14], t0(), 0),
            Err(FeatureError::NonPositiveMean(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn sin_cos_pairs_on_unit_circle(offset in -12i32..12, start_hour in 0i64..10_000) {
            let mut spec = FeatureSpec::load_only();
            spec.calendar = vec![
                CalendarCycle::HourOfDay, CalendarCycle::DayOfWeek, CalendarCycle::DayOfMonth,
                CalendarCycle::DayOfYear, CalendarCycle::WeekOfYear, CalendarCycle::Month,
            ];
            spec.utc_offset_hours = offset;
            let s = build_series_samples(
                "s", &ramp(220), t0() + Duration::hours(start_hour), &BTreeMap::new(), &spec,
            ).unwrap();
            for c in &spec.calendar {
                let si = s.feature_names.iter().position(|n| *n == format!("{}_sin", c.prefix())).unwrap();
                for i in 0..s.n_rows() {
                    let (a, b) = (s.x[[i, si]], s.x[[i, si + 1]]);
                    proptest::prop_assert!((a * a + b * b - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn profile_scale_invariance(scale in 0.01f64..100.0, seed in 0u64..1000) {
            let v: Vec<f64> = (0..24 * 15)
                .map(|t| 5.0 + ((t as u64 * 2654435761 + seed) % 97) as f64 / 10.0)
                .collect();
            let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
            let a = heterogeneity_profile(&v, t0(), 0).unwrap();
            let b = heterogeneity_profile(&scaled, t0(), 0).unwrap();
            proptest::prop_assert!((a.seasonality_index - b.seasonality_index).abs() < 1e-12);
            proptest::prop_assert!((a.total_variation - b.total_variation).abs() < 1e-12);
            proptest::prop_assert!((a.night_to_day - b.night_to_day).abs() < 1e-12);
            proptest::prop_assert!((a.weekend_to_weekday - b.weekend_to_weekday).abs() < 1e-12);
            // power-of-two scaling is exact in binary floating point
            let exact: Vec<f64> = v.iter().map(|x| x * 4.0).collect();
            let c = heterogeneity_profile(&exact, t0(), 0).unwrap();
            proptest::prop_assert_eq!(a.night_to_day, c.night_to_day);
            proptest::prop_assert_eq!(a.weekend_to_weekday, c.weekend_to_weekday);
        }
    }
}
