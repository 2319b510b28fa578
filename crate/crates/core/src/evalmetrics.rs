//! Forecast evaluation: point metrics, peak-load errors, drift-segmented
//! comparisons and hierarchical coherency gaps.
//!
//! Point metrics are computed on the normalized scale:
//!
//! | metric | definition |
//! |--------|------------|
//! | MSE    | `mean((ŷ − y)²)` |
//! | nMAE % | `100 · mean(|ŷ − y|) / max(y)` |
//! | MAPE % | `100 · mean(|ŷ − y| / |y|)` over points with `|y| > 1e-6` |
//! | FB     | `(Σŷ − Σy) / (Σŷ + Σy)` |
//!
//! The unguarded MAPE (all points, possibly infinite) is reported alongside.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series_store::{format_timestamp, MinMax};

/// Targets with `|y|` at or below this are excluded from the guarded MAPE.
pub const MAPE_GUARD: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("actual and predicted lengths differ ({actual} vs {predicted})")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("empty sequence")]
    Empty,
    #[error("max of actuals is {0}; nMAE needs a positive maximum")]
    NonPositiveMax(f64),
    #[error("series `{0}` has no drift label")]
    MissingLabel(String),
    #[error("series `{0}` is missing from one of the compared reports")]
    MissingSeries(String),
    #[error("unknown drift status `{0}`")]
    UnknownStatus(String),
    #[error("unknown peak period `{0}`")]
    UnknownPeriod(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub fb: f64,
    pub mae: f64,
    pub nmae_pct: f64,
    pub mse: f64,
    /// NaN when every target is within the guard.
    pub mape_pct: f64,
    pub mape_unguarded_pct: f64,
    pub mape_excluded: usize,
    pub n: usize,
}

pub fn compute_metrics(actual: &[f64], predicted: &[f64]) -> Result<PointMetrics> {
    if actual.len() != predicted.len() {
        return Err(EvalError::LengthMismatch {
            actual: actual.len(),
            predicted: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = actual.len() as f64;
    let max = actual.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(EvalError::NonPositiveMax(max));
    }
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut ape_sum = 0.0;
    let mut ape_all = 0.0;
    let mut included = 0usize;
    for (&y, &p) in actual.iter().zip(predicted) {
        let e = (p - y).abs();
        abs_sum += e;
        sq_sum += e * e;
        ape_all += e / y.abs();
        if y.abs() > MAPE_GUARD {
            ape_sum += e / y.abs();
            included += 1;
        }
    }
    let sum_y: f64 = actual.iter().sum();
    let sum_p: f64 = predicted.iter().sum();
    let mae = abs_sum / n;
    Ok(PointMetrics {
        fb: (sum_p - sum_y) / (sum_p + sum_y),
        mae,
        nmae_pct: 100.0 * mae / max,
        mse: sq_sum / n,
        mape_pct: if included > 0 {
            100.0 * ape_sum / included as f64
        } else {
            f64::NAN
        },
        mape_unguarded_pct: 100.0 * ape_all / n,
        mape_excluded: actual.len() - included,
        n: actual.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub paradigm: String,
    pub model: String,
    pub variant: Option<String>,
    pub k: Option<usize>,
    pub seed: u64,
    /// Inclusive first and last evaluated target timestamps.
    pub eval_window: Option<(DateTime<Utc>, DateTime<Utc>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Spread {
    fn of(values: impl Iterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return None;
        }
        Some(Self {
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub fb: Spread,
    pub nmae_pct: Spread,
    pub mse: Spread,
    pub mape_pct: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub meta: ReportMeta,
    pub per_series: BTreeMap<String, PointMetrics>,
}

impl MetricReport {
    pub fn new(meta: ReportMeta) -> Self {
        Self {
            meta,
            per_series: BTreeMap::new(),
        }
    }

    /// Min/mean/max over series; NaN guarded MAPEs are left out of their spread.
    pub fn aggregate(&self) -> Option<AggregateMetrics> {
        let s = || self.per_series.values();
        Some(AggregateMetrics {
            fb: Spread::of(s().map(|m| m.fb))?,
            nmae_pct: Spread::of(s().map(|m| m.nmae_pct))?,
            mse: Spread::of(s().map(|m| m.mse))?,
            mape_pct: Spread::of(s().map(|m| m.mape_pct).filter(|v| !v.is_nan())).unwrap_or(Spread {
                min: f64::NAN,
                mean: f64::NAN,
                max: f64::NAN,
            }),
        })
    }

    pub fn mean_nmae(&self) -> f64 {
        self.per_series.values().map(|m| m.nmae_pct).sum::<f64>() / self.per_series.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeakPeriod {
    Monthly,
    Annual,
    /// The whole evaluated sequence as one period.
    Whole,
}

impl fmt::Display for PeakPeriod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeakPeriod::Monthly => "monthly",
            PeakPeriod::Annual => "annual",
            PeakPeriod::Whole => "whole",
        })
    }
}

impl FromStr for PeakPeriod {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monthly" | "month" => Ok(PeakPeriod::Monthly),
            "annual" | "year" | "yearly" => Ok(PeakPeriod::Annual),
            "whole" | "all" => Ok(PeakPeriod::Whole),
            _ => Err(EvalError::UnknownPeriod(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakEntry {
    pub series_id: String,
    /// `2024-03`, `2024` or `whole`.
    pub period: String,
    pub timestamp: DateTime<Utc>,
    pub actual_peak: f64,
    pub predicted_at_peak: f64,
    pub error_pct: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeakReport {
    pub entries: Vec<PeakEntry>,
    /// Periods dropped because the sequence does not cover them fully.
    pub skipped: Vec<String>,
}

fn period_label(ts: DateTime<Utc>, period: PeakPeriod) -> String {
    match period {
        PeakPeriod::Monthly => format!("{:04}-{:02}", ts.year(), ts.month()),
        PeakPeriod::Annual => format!("{:04}", ts.year()),
        PeakPeriod::Whole => "whole".to_string(),
    }
}

/// Hours in the calendar period (UTC) containing `ts`.
fn period_hours(ts: DateTime<Utc>, period: PeakPeriod) -> Option<usize> {
    let (first, next) = match period {
        PeakPeriod::Monthly => {
            let first = ts.date_naive().with_day(1)?;
            let next = if first.month() == 12 {
                first.with_year(first.year() + 1)?.with_month(1)?
            } else {
                first.with_month(first.month() + 1)?
            };
            (first, next)
        }
        PeakPeriod::Annual => {
            let first = ts.date_naive().with_ordinal(1)?;
            (first, first.with_year(first.year() + 1)?)
        }
        PeakPeriod::Whole => return None,
    };
    Some((next - first).num_hours() as usize)
}

/// Metrics after mapping both sequences through `scale`, typically the
/// min-max statistics of the series over everything up to the end of the
/// evaluated span. Training-span statistics can leave a drifted test span
/// entirely below zero, where nMAE is undefined.
pub fn compute_scaled_metrics(actual: &[f64], predicted: &[f64], scale: &MinMax) -> Result<PointMetrics> {
    let a: Vec<f64> = actual.iter().map(|&v| scale.apply(v)).collect();
    let p: Vec<f64> = predicted.iter().map(|&v| scale.apply(v)).collect();
    compute_metrics(&a, &p)
}

/// Prediction at each period's actual peak hour (earliest on ties).
/// `start` is the timestamp of the first element.
pub fn peak_error(
    series_id: &str,
    start: DateTime<Utc>,
    actual: &[f64],
    predicted: &[f64],
    period: PeakPeriod,
) -> Result<PeakReport> {
    if actual.len() != predicted.len() {
        return Err(EvalError::LengthMismatch {
            actual: actual.len(),
            predicted: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for t in 0..actual.len() {
        let label = period_label(start + Duration::hours(t as i64), period);
        match groups.last_mut() {
            Some((l, idx)) if *l == label => idx.push(t),
            _ => groups.push((label, vec![t])),
        }
    }
    let mut report = PeakReport::default();
    for (label, idx) in groups {
        let ts0 = start + Duration::hours(idx[0] as i64);
        if let Some(full) = period_hours(ts0, period) {
            if idx.len() < full {
                log::info!("{series_id}: skipping incomplete period {label} ({} of {full} hours)", idx.len());
                report.skipped.push(label);
                continue;
            }
        }
        let mut peak = idx[0];
        for &t in &idx {
            if actual[t] > actual[peak] {
                peak = t;
            }
        }
        let y = actual[peak];
        let p = predicted[peak];
        report.entries.push(PeakEntry {
            series_id: series_id.to_string(),
            period: label,
            timestamp: start + Duration::hours(peak as i64),
            actual_peak: y,
            predicted_at_peak: p,
            error_pct: 100.0 * (p - y).abs() / y,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DriftStatus {
    Drifting,
    Stable,
}

impl fmt::Display for DriftStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DriftStatus::Drifting => "drifting",
            DriftStatus::Stable => "stable",
        })
    }
}

impl FromStr for DriftStatus {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "drifting" => Ok(DriftStatus::Drifting),
            "stable" => Ok(DriftStatus::Stable),
            other => Err(EvalError::UnknownStatus(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSegmentRow {
    pub segment: DriftStatus,
    pub n_series: usize,
    pub local_nmae_pct: f64,
    pub global_nmae_pct: f64,
    /// `100 · (local − global) / local`; positive when the global model is better.
    pub change_pct: f64,
}

pub fn change_pct(local: f64, global: f64) -> f64 {
    100.0 * (local - global) / local
}

/// Mean nMAE per drift segment for a local and a global report over the same series.
pub fn drift_segment_report(
    local: &MetricReport,
    global: &MetricReport,
    labels: &BTreeMap<String, DriftStatus>,
) -> Result<Vec<DriftSegmentRow>> {
    for id in local.per_series.keys().chain(global.per_series.keys()) {
        if !local.per_series.contains_key(id) || !global.per_series.contains_key(id) {
            return Err(EvalError::MissingSeries(id.clone()));
        }
        if !labels.contains_key(id) {
            return Err(EvalError::MissingLabel(id.clone()));
        }
    }
    let mut rows = Vec::new();
    for segment in [DriftStatus::Drifting, DriftStatus::Stable] {
        let ids: Vec<&String> = local.per_series.keys().filter(|id| labels[*id] == segment).collect();
        if ids.is_empty() {
            continue;
        }
        let n = ids.len() as f64;
        let l = ids.iter().map(|id| local.per_series[*id].nmae_pct).sum::<f64>() / n;
        let g = ids.iter().map(|id| global.per_series[*id].nmae_pct).sum::<f64>() / n;
        rows.push(DriftSegmentRow {
            segment,
            n_series: ids.len(),
            local_nmae_pct: l,
            global_nmae_pct: g,
            change_pct: change_pct(l, g),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherencyReport {
    /// `Σ parts − whole` per hour.
    pub gap: Vec<f64>,
    pub parts_sum: Vec<f64>,
    pub mean_abs_gap: f64,
    pub mean_actual: f64,
    /// `mean_abs_gap / mean_actual`.
    pub relative_gap: f64,
}

/// Gap between summed lower-level forecasts and a higher-level forecast
/// (denormalized, aligned hour by hour). Reporting only.
pub fn coherency_gap(parts: &[&[f64]], whole: &[f64], whole_actual: &[f64]) -> Result<CoherencyReport> {
    let n = whole.len();
    if n == 0 || parts.is_empty() {
        return Err(EvalError::Empty);
    }
    for p in parts.iter().map(|p| p.len()).chain([whole_actual.len()]) {
        if p != n {
            return Err(EvalError::LengthMismatch { actual: p, predicted: n });
        }
    }
    let parts_sum: Vec<f64> = (0..n).map(|t| parts.iter().map(|p| p[t]).sum()).collect();
    let gap: Vec<f64> = parts_sum.iter().zip(whole).map(|(s, w)| s - w).collect();
    let mean_abs_gap = gap.iter().map(|g| g.abs()).sum::<f64>() / n as f64;
    let mean_actual = whole_actual.iter().sum::<f64>() / n as f64;
    Ok(CoherencyReport {
        relative_gap: mean_abs_gap / mean_actual,
        gap,
        parts_sum,
        mean_abs_gap,
        mean_actual,
    })
}

pub const METRICS_HEADER: [&str; 7] = ["series_id", "paradigm", "model", "FB", "nMAE_pct", "MSE", "MAPE_pct"];
pub const PEAKS_HEADER: [&str; 5] = ["series_id", "period", "actual_peak", "predicted_at_peak", "error_pct"];
pub const DRIFT_HEADER: [&str; 5] = ["segment", "n_series", "local_nMAE_pct", "global_nMAE_pct", "change_pct"];
pub const COHERENCY_HEADER: [&str; 4] = ["timestamp", "parts_sum", "system_forecast", "gap"];

pub fn write_metrics_csv(path: &Path, reports: &[&MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in reports {
        for (id, m) in &r.per_series {
            w.write_record([
                id.clone(),
                r.meta.paradigm.clone(),
                r.meta.model.clone(),
                m.fb.to_string(),
                m.nmae_pct.to_string(),
                m.mse.to_string(),
                m.mape_pct.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_peaks_csv(path: &Path, reports: &[PeakReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PEAKS_HEADER)?;
    for e in reports.iter().flat_map(|r| &r.entries) {
        w.write_record([
            e.series_id.clone(),
            e.period.clone(),
            e.actual_peak.to_string(),
            e.predicted_at_peak.to_string(),
            e.error_pct.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_drift_csv(path: &Path, rows: &[DriftSegmentRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(DRIFT_HEADER)?;
    for r in rows {
        w.write_record([
            r.segment.to_string(),
            r.n_series.to_string(),
            r.local_nmae_pct.to_string(),
            r.global_nmae_pct.to_string(),
            r.change_pct.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `start` is the timestamp of the first gap element.
pub fn write_coherency_csv(path: &Path, start: DateTime<Utc>, whole: &[f64], report: &CoherencyReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(COHERENCY_HEADER)?;
    for (t, ((s, f), g)) in report.parts_sum.iter().zip(whole).zip(&report.gap).enumerate() {
        w.write_record([
            format_timestamp(start + Duration::hours(t as i64)),
            s.to_string(),
            f.to_string(),
            g.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
