//! Labeled synthetic load collections with archetypes, a shared temperature
//! channel and injectable drift.
//!
//! Each series is
//!
//! ```text
//! load_t = base · (1 + daily·sin(2π(h−9)/24) + weekly·cos(2π(dow−2)/7)
//!                    + annual·cos(2π(doy−15)/365.25)) · night(h) · weekend(dow)
//!        + base · (lin·u_t + quad·u_t²),   u_t = (T_t − 15) / 10
//!        + e_t,   e_t = φ·e_{t−1} + noise·base·√(1−φ²)·z_t
//! ```
//!
//! where `night(h)` is a smooth bump over hours 0–5 sized so the noise-free
//! series has the archetype's mean night/day ratio, and
//! `weekend` is the weekend/weekday target on Saturday and Sunday. Values
//! below 1% of base are clamped and counted.
//!
//! The temperature channel draws from stream 0 of the seeded ChaCha
//! generator and series `j` (in generation order) from stream `j + 1`, so
//! series are independent of each other's draws.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, TimeZone, Timelike, Utc, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalmetrics::DriftStatus;
use crate::series_store::{write_hierarchy_csv, write_wide_csv, SeriesCollection, SeriesError};

pub const TEMPERATURE_CHANNEL: &str = "temperature";

const MIN_HOURS: usize = 4 * 7 * 24;

/// Fraction of base below which generated values are clamped.
const CLAMP_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("invalid drift event: {0}")]
    InvalidEvent(String),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeConfig {
    pub name: String,
    pub base: f64,
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    pub annual_amplitude: f64,
    /// Linear and quadratic response to `(T − 15) / 10`, in units of base.
    pub temp_linear: f64,
    pub temp_quadratic: f64,
    /// Stationary std of the AR(1) noise, in units of base.
    pub noise_std: f64,
    pub night_to_day: f64,
    pub weekend_to_weekday: f64,
    /// AR(1) carryover of the noise process.
    pub ar_coef: f64,
    /// Relative std of the per-series base level.
    pub level_jitter: f64,
    /// Relative std of the per-series seasonal amplitudes.
    pub amplitude_jitter: f64,
}

impl ArchetypeConfig {
    /// Strong daily and seasonal swings, temperature driven.
    pub fn residential() -> Self {
        Self {
            name: "residential".into(),
            base: 100.0,
            daily_amplitude: 0.25,
            weekly_amplitude: 0.03,
            annual_amplitude: 0.10,
            temp_linear: -0.02,
            temp_quadratic: 0.04,
            noise_std: 0.02,
            night_to_day: 0.7,
            weekend_to_weekday: 0.85,
            ar_coef: 0.7,
            level_jitter: 0.05,
            amplitude_jitter: 0.05,
        }
    }

    /// Flat, stable profile.
    pub fn industrial() -> Self {
        Self {
            name: "industrial".into(),
            base: 300.0,
            daily_amplitude: 0.02,
            weekly_amplitude: 0.005,
            annual_amplitude: 0.02,
            temp_linear: 0.0,
            temp_quadratic: 0.005,
            noise_std: 0.01,
            night_to_day: 0.98,
            weekend_to_weekday: 0.98,
            ar_coef: 0.7,
            level_jitter: 0.05,
            amplitude_jitter: 0.05,
        }
    }

    /// No seasonality, temperature response or jitter; level `base`.
    pub fn flat(name: &str, base: f64) -> Self {
        Self {
            name: name.into(),
            base,
            daily_amplitude: 0.0,
            weekly_amplitude: 0.0,
            annual_amplitude: 0.0,
            temp_linear: 0.0,
            temp_quadratic: 0.0,
            noise_std: 0.0,
            night_to_day: 1.0,
            weekend_to_weekday: 1.0,
            ar_coef: 0.0,
            level_jitter: 0.0,
            amplitude_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidConfig(format!("{}: {m}", self.name)));
        let fields = [
            self.base,
            self.daily_amplitude,
            self.weekly_amplitude,
            self.annual_amplitude,
            self.temp_linear,
            self.temp_quadratic,
            self.noise_std,
            self.night_to_day,
            self.weekend_to_weekday,
            self.ar_coef,
            self.level_jitter,
            self.amplitude_jitter,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter".into());
        }
        if self.base <= 0.0 {
            return bad(format!("base {} must be positive", self.base));
        }
        if self.daily_amplitude < 0.0 || self.weekly_amplitude < 0.0 || self.annual_amplitude < 0.0 {
            return bad("amplitudes must be non-negative".into());
        }
        if self.noise_std < 0.0 || self.level_jitter < 0.0 || self.amplitude_jitter < 0.0 {
            return bad("noise and jitter must be non-negative".into());
        }
        if self.night_to_day <= 0.0 || self.weekend_to_weekday <= 0.0 {
            return bad("profile ratios must be positive".into());
        }
        if self.ar_coef.abs() >= 1.0 {
            return bad(format!("ar_coef {} must lie in (-1, 1)", self.ar_coef));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeGroup {
    pub archetype: ArchetypeConfig,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub groups: Vec<ArchetypeGroup>,
    /// Series are dealt round-robin to regions `R0..`.
    pub regions: usize,
    pub length_hours: usize,
    pub seed: u64,
    pub start: DateTime<Utc>,
}

impl SynthConfig {
    /// `count` residential and `count` industrial series.
    pub fn two_archetype(count: usize, length_hours: usize, seed: u64) -> Self {
        Self {
            groups: vec![
                ArchetypeGroup {
                    archetype: ArchetypeConfig::residential(),
                    count,
                },
                ArchetypeGroup {
                    archetype: ArchetypeConfig::industrial(),
                    count,
                },
            ],
            regions: 2,
            length_hours,
            seed,
            start: default_start(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.groups.iter().all(|g| g.count == 0) {
            return Err(SynthError::InvalidConfig("no series requested".into()));
        }
        if self.length_hours < MIN_HOURS {
            return Err(SynthError::InvalidConfig(format!(
                "length {} h is shorter than four weeks",
                self.length_hours
            )));
        }
        if self.regions == 0 {
            return Err(SynthError::InvalidConfig("regions must be positive".into()));
        }
        if self.start.minute() != 0 || self.start.second() != 0 {
            return Err(SynthError::InvalidConfig("start must be on the hour".into()));
        }
        let mut names: Vec<&str> = self.groups.iter().map(|g| g.archetype.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(SynthError::InvalidConfig("archetype names must be unique".into()));
        }
        self.groups.iter().try_for_each(|g| g.archetype.validate())
    }
}

/// 2024-01-01 00:00 UTC, a Monday.
pub fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub archetype: BTreeMap<String, String>,
    pub region: BTreeMap<String, String>,
    /// Generation parameters after jitter.
    pub parameters: BTreeMap<String, ArchetypeConfig>,
    pub clamp_events: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub collection: SeriesCollection,
    pub truth: GroundTruth,
}

fn series_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn daily_shape(hour: f64) -> f64 {
    (2.0 * PI * (hour - 9.0) / 24.0).sin()
}

fn night_bump(hour: u32) -> f64 {
    if hour < 6 {
        (PI * (hour as f64 + 0.5) / 6.0).sin()
    } else {
        0.0
    }
}

/// Shared hourly temperature (°C): annual and daily cycles plus AR(1) weather noise.
fn temperature(seed: u64, start: DateTime<Utc>, len: usize) -> Vec<f64> {
    let mut rng = series_rng(seed, 0);
    let phi: f64 = 0.95;
    let sd = 2.0;
    let mut e = sd * normal(&mut rng);
    (0..len)
        .map(|t| {
            let ts = start + Duration::hours(t as i64);
            let doy = ts.ordinal0() as f64;
            let hour = ts.hour() as f64;
            let v = 8.0 - 14.0 * (2.0 * PI * (doy - 15.0) / 365.25).cos() + 3.0 * daily_shape(hour) + e;
            e = phi * e + sd * (1.0 - phi * phi).sqrt() * normal(&mut rng);
            v
        })
        .collect()
}

fn jittered(a: &ArchetypeConfig, rng: &mut ChaCha8Rng) -> ArchetypeConfig {
    let level = (1.0 + a.level_jitter * normal(rng)).max(0.1);
    let mut amp = || (1.0 + a.amplitude_jitter * normal(rng)).max(0.0);
    let (d, w, y) = (amp(), amp(), amp());
    ArchetypeConfig {
        base: a.base * level,
        daily_amplitude: a.daily_amplitude * d,
        weekly_amplitude: a.weekly_amplitude * w,
        annual_amplitude: a.annual_amplitude * y,
        ..a.clone()
    }
}

fn generate_series(
    a: &ArchetypeConfig,
    temp: &[f64],
    start: DateTime<Utc>,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, usize) {
    let mut hours = Vec::with_capacity(temp.len());
    let mut seasonal = Vec::with_capacity(temp.len());
    let mut weather = Vec::with_capacity(temp.len());
    for (t, &temp) in temp.iter().enumerate() {
        let ts = start + Duration::hours(t as i64);
        let dow = ts.weekday().num_days_from_monday() as f64;
        let doy = ts.ordinal0() as f64;
        let cycles = 1.0
            + a.daily_amplitude * daily_shape(ts.hour() as f64)
            + a.weekly_amplitude * (2.0 * PI * (dow - 2.0) / 7.0).cos()
            + a.annual_amplitude * (2.0 * PI * (doy - 15.0) / 365.25).cos();
        let weekend = if matches!(ts.weekday(), Weekday::Sat | Weekday::Sun) {
            a.weekend_to_weekday
        } else {
            1.0
        };
        let u = (temp - 15.0) / 10.0;
        hours.push(ts.hour());
        seasonal.push(a.base * cycles * weekend);
        weather.push(a.base * (a.temp_linear * u + a.temp_quadratic * u * u));
    }
    let depth = night_depth(&hours, &seasonal, &weather, a.night_to_day);
    let sigma = a.noise_std * a.base;
    let innovation = sigma * (1.0 - a.ar_coef * a.ar_coef).sqrt();
    let mut e = sigma * normal(rng);
    let mut clamps = 0;
    let floor = CLAMP_FRACTION * a.base;
    let values = (0..temp.len())
        .map(|t| {
            let mut v = seasonal[t] * (1.0 - depth * night_bump(hours[t])) + weather[t] + e;
            e = a.ar_coef * e + innovation * normal(rng);
            if v < floor {
                v = floor;
                clamps += 1;
            }
            v
        })
        .collect();
    (values, clamps)
}

/// Depth `a` of the night factor `1 − a·bump(h)` for which the noise-free
/// series has the target ratio of mean night load to mean day load.
fn night_depth(hours: &[u32], seasonal: &[f64], weather: &[f64], target: f64) -> f64 {
    let (mut night, mut night_bumped, mut day) = (0.0, 0.0, 0.0);
    let (mut n_night, mut n_day) = (0usize, 0usize);
    for ((&h, &s), &w) in hours.iter().zip(seasonal).zip(weather) {
        if h < 6 {
            night += s + w;
            night_bumped += s * night_bump(h);
            n_night += 1;
        } else if (12..18).contains(&h) {
            day += s + w;
            n_day += 1;
        }
    }
    let (night, night_bumped, day) = (night / n_night as f64, night_bumped / n_night as f64, day / n_day as f64);
    (night - target * day) / night_bumped
}

/// Series ids are `<archetype>_<index>` with a two-digit index per archetype.
pub fn generate_collection(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let temp = temperature(cfg.seed, cfg.start, cfg.length_hours);
    let mut series = BTreeMap::new();
    let mut truth = GroundTruth {
        archetype: BTreeMap::new(),
        region: BTreeMap::new(),
        parameters: BTreeMap::new(),
        clamp_events: BTreeMap::new(),
    };
    let mut j = 0u64;
    for g in &cfg.groups {
        for i in 0..g.count {
            let id = format!("{}_{i:02}", g.archetype.name);
            let mut rng = series_rng(cfg.seed, j + 1);
            let params = jittered(&g.archetype, &mut rng);
            let (values, clamps) = generate_series(&params, &temp, cfg.start, &mut rng);
            if clamps > 0 {
                log::warn!("{id}: {clamps} values clamped at {CLAMP_FRACTION} × base");
            }
            truth.archetype.insert(id.clone(), g.archetype.name.clone());
            truth.region.insert(id.clone(), format!("R{}", j as usize % cfg.regions));
            truth.parameters.insert(id.clone(), params);
            truth.clamp_events.insert(id.clone(), clamps);
            series.insert(id, values);
            j += 1;
        }
    }
    let exogenous = BTreeMap::from([(TEMPERATURE_CHANNEL.to_string(), temp)]);
    let collection = SeriesCollection::new(cfg.start, series, exogenous, truth.region.clone())?;
    Ok(SynthOutput { collection, truth })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DriftKind {
    /// Multiply by `factor` from the start on.
    Sudden { factor: f64 },
    /// Multiply by `1 + clamp(slope · (t − start), −cap, cap)`.
    Incremental { slope_per_hour: f64, cap: f64 },
    /// Add `delta · sin(2π(h−9)/24)` to the relative daily profile (UTC hours).
    Recurring { amplitude_delta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub kind: DriftKind,
    pub start: DateTime<Utc>,
    pub series: Vec<String>,
}

/// Apply drift events in order; affected series are labeled drifting.
pub fn inject_drift(
    c: &SeriesCollection,
    events: &[DriftEvent],
) -> Result<(SeriesCollection, BTreeMap<String, DriftStatus>)> {
    let mut series = c.series().clone();
    let mut labels: BTreeMap<String, DriftStatus> = series.keys().map(|k| (k.clone(), DriftStatus::Stable)).collect();
    for ev in events {
        let t0 = c
            .hour_index(ev.start)
            .filter(|&t| t < c.horizon())
            .ok_or_else(|| SynthError::InvalidEvent(format!("start {} outside the collection", ev.start)))?;
        match ev.kind {
            DriftKind::Sudden { factor } if !(factor > 0.0 && factor.is_finite()) => {
                return Err(SynthError::InvalidEvent(format!("sudden factor {factor} must be positive")));
            }
            DriftKind::Incremental { slope_per_hour, cap }
                if !(slope_per_hour.is_finite() && cap.is_finite() && (0.0..1.0).contains(&cap)) =>
            {
                return Err(SynthError::InvalidEvent("incremental cap must lie in [0, 1)".into()));
            }
            DriftKind::Recurring { amplitude_delta } if !amplitude_delta.is_finite() => {
                return Err(SynthError::InvalidEvent("non-finite amplitude delta".into()));
            }
            _ => {}
        }
        for id in &ev.series {
            let values = series
                .get_mut(id)
                .ok_or_else(|| SynthError::InvalidEvent(format!("unknown series `{id}`")))?;
            for (t, v) in values.iter_mut().enumerate().skip(t0) {
                let factor = match ev.kind {
                    DriftKind::Sudden { factor } => factor,
                    DriftKind::Incremental { slope_per_hour, cap } => {
                        1.0 + (slope_per_hour * (t - t0) as f64).clamp(-cap, cap)
                    }
                    DriftKind::Recurring { amplitude_delta } => {
                        let hour = c.timestamp(t).hour() as f64;
                        (1.0 + amplitude_delta * daily_shape(hour)).max(CLAMP_FRACTION)
                    }
                };
                *v *= factor;
            }
            labels.insert(id.clone(), DriftStatus::Drifting);
        }
    }
    let out = SeriesCollection::new(c.start(), series, c.exogenous().clone(), c.hierarchy().clone())?;
    Ok((out, labels))
}

pub const LABELS_HEADER: [&str; 4] = ["series_id", "archetype", "region", "drift_status"];

pub fn write_labels_csv(path: &Path, truth: &GroundTruth, drift: &BTreeMap<String, DriftStatus>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LABELS_HEADER)?;
    for (id, archetype) in &truth.archetype {
        let status = drift.get(id).copied().unwrap_or(DriftStatus::Stable);
        w.write_record([id.as_str(), archetype, &truth.region[id], &status.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `series_id → (archetype, region, drift status)` from a labels file.
pub fn read_labels_csv(path: &Path) -> Result<BTreeMap<String, (String, String, DriftStatus)>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != LABELS_HEADER {
        return Err(SynthError::InvalidConfig(format!("{}: unexpected labels header", path.display())));
    }
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let status = rec[3]
            .parse()
            .map_err(|e: crate::evalmetrics::EvalError| SynthError::InvalidConfig(e.to_string()))?;
        out.insert(rec[0].to_string(), (rec[1].to_string(), rec[2].to_string(), status));
    }
    Ok(out)
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a SynthConfig,
    drift_events: &'a [DriftEvent],
    clamp_events: &'a BTreeMap<String, usize>,
}

/// Write `load.csv`, `exogenous.csv`, `hierarchy.csv`, `labels.csv` and
/// `synth_manifest.json` into `dir`.
pub fn write_synth_outputs(
    dir: &Path,
    cfg: &SynthConfig,
    collection: &SeriesCollection,
    truth: &GroundTruth,
    events: &[DriftEvent],
    drift: &BTreeMap<String, DriftStatus>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_wide_csv(&dir.join("load.csv"), collection.start(), collection.series())?;
    write_wide_csv(&dir.join("exogenous.csv"), collection.start(), collection.exogenous())?;
    write_hierarchy_csv(&dir.join("hierarchy.csv"), collection.hierarchy())?;
    write_labels_csv(&dir.join("labels.csv"), truth, drift)?;
    let manifest = Manifest {
        config: cfg,
        drift_events: events,
        clamp_events: &truth.clamp_events,
    };
    std::fs::write(dir.join("synth_manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurizer::heterogeneity_profile;

    fn single(a: ArchetypeConfig, count: usize, hours: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            groups: vec![ArchetypeGroup { archetype: a, count }],
            regions: 1,
            length_hours: hours,
            seed,
            start: default_start(),
        }
    }

    #[test]
    fn flat_archetype_is_constant() {
        let out = generate_collection(&single(ArchetypeConfig::flat("flat", 42.0), 2, 700, 1)).unwrap();
        for v in out.collection.series().values() {
            assert!(v.iter().all(|&x| x == 42.0));
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig::two_archetype(2, 24 * 60, 9);
        assert_eq!(generate_collection(&cfg).unwrap(), generate_collection(&cfg).unwrap());
        let other = SynthConfig { seed: 10, ..cfg.clone() };
        assert_ne!(generate_collection(&cfg).unwrap().collection, generate_collection(&other).unwrap().collection);
    }

    #[test]
    fn series_draws_are_independent() {
        let cfg = SynthConfig::two_archetype(3, 24 * 30, 5);
        let a = generate_collection(&cfg).unwrap();
        // changing the residential jitter alters residential draws only
        let mut changed = cfg.clone();
        changed.groups[0].archetype.level_jitter = 0.2;
        let b = generate_collection(&changed).unwrap();
        assert_ne!(a.collection.get("residential_00"), b.collection.get("residential_00"));
        for i in 0..3 {
            let id = format!("industrial_{i:02}");
            assert_eq!(a.collection.get(&id), b.collection.get(&id));
        }
    }

    #[test]
    fn archetype_profiles_separate() {
        let out = generate_collection(&SynthConfig::two_archetype(3, 24 * 7 * 8, 2)).unwrap();
        let c = &out.collection;
        let profile = |id: &str| heterogeneity_profile(c.get(id).unwrap(), c.start(), 0).unwrap();
        for i in 0..3 {
            let r = profile(&format!("residential_{i:02}"));
            let ind = profile(&format!("industrial_{i:02}"));
            assert!(r.night_to_day < 1.0);
            assert!(r.seasonality_index >= 3.0 * ind.seasonality_index, "{r:?} vs {ind:?}");
            assert!((r.night_to_day - 0.7).abs() < 0.1, "{r:?}");
            assert!((r.weekend_to_weekday - 0.85).abs() < 0.1, "{r:?}");
        }
        assert_eq!(out.truth.region["residential_00"], "R0");
        assert_eq!(out.truth.region["residential_01"], "R1");
    }

    #[test]
    fn sudden_drift_is_local() {
        let out = generate_collection(&SynthConfig::two_archetype(2, 24 * 30, 3)).unwrap();
        let c = &out.collection;
        let t0 = 400;
        let ev = DriftEvent {
            kind: DriftKind::Sudden { factor: 0.8 },
            start: c.timestamp(t0),
            series: vec!["residential_01".into()],
        };
        let (d, labels) = inject_drift(c, &[ev]).unwrap();
        let before = c.get("residential_01").unwrap();
        let after = d.get("residential_01").unwrap();
        assert_eq!(&after[..t0], &before[..t0]);
        for t in t0..before.len() {
            assert_eq!(after[t], before[t] * 0.8);
        }
        assert_eq!(d.get("residential_00"), c.get("residential_00"));
        assert_eq!(labels["residential_01"], DriftStatus::Drifting);
        assert_eq!(labels["industrial_00"], DriftStatus::Stable);
    }

    #[test]
    fn zero_slope_incremental_is_identity() {
        let out = generate_collection(&SynthConfig::two_archetype(1, 24 * 30, 3)).unwrap();
        let c = &out.collection;
        let ev = DriftEvent {
            kind: DriftKind::Incremental {
                slope_per_hour: 0.0,
                cap: 0.5,
            },
            start: c.timestamp(10),
            series: c.ids().map(String::from).collect(),
        };
        assert_eq!(inject_drift(c, &[ev]).unwrap().0, *c);
    }

    #[test]
    fn incremental_ramp_is_capped() {
        let out = generate_collection(&single(ArchetypeConfig::flat("f", 10.0), 1, 800, 0)).unwrap();
        let c = &out.collection;
        let ev = DriftEvent {
            kind: DriftKind::Incremental {
                slope_per_hour: -0.001,
                cap: 0.2,
            },
            start: c.timestamp(100),
            series: vec!["f_00".into()],
        };
        let (d, _) = inject_drift(c, &[ev]).unwrap();
        let v = d.get("f_00").unwrap();
        assert_eq!(v[99], 10.0);
        assert!((v[150] - 10.0 * (1.0 - 0.05)).abs() < 1e-12);
        assert!((v[799] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        let mut cfg = SynthConfig::two_archetype(1, 100, 0);
        assert!(generate_collection(&cfg).is_err());
        cfg.length_hours = 24 * 30;
        cfg.groups[0].archetype.base = -1.0;
        assert!(generate_collection(&cfg).is_err());
        let out = generate_collection(&SynthConfig::two_archetype(1, 24 * 30, 0)).unwrap();
        let late = DriftEvent {
            kind: DriftKind::Sudden { factor: 0.8 },
            start: out.collection.timestamp(24 * 31),
            series: vec!["residential_00".into()],
        };
        assert!(inject_drift(&out.collection, &[late]).is_err());
        let bad = DriftEvent {
            kind: DriftKind::Sudden { factor: 0.0 },
            start: out.collection.start(),
            series: vec!["residential_00".into()],
        };
        assert!(inject_drift(&out.collection, &[bad]).is_err());
    }

    #[test]
    fn outputs_round_trip() {
        let cfg = SynthConfig::two_archetype(2, 24 * 30, 4);
        let out = generate_collection(&cfg).unwrap();
        let labels: BTreeMap<String, DriftStatus> =
            out.collection.ids().map(|id| (id.to_string(), DriftStatus::Stable)).collect();
        let dir = tempfile::tempdir().unwrap();
        write_synth_outputs(dir.path(), &cfg, &out.collection, &out.truth, &[], &labels).unwrap();
        let back = crate::series_store::ingest_files(
            &dir.path().join("load.csv"),
            Some(&dir.path().join("exogenous.csv")),
            Some(&dir.path().join("hierarchy.csv")),
            &Default::default(),
        )
        .unwrap();
        assert_eq!(back, out.collection);
        let read = read_labels_csv(&dir.path().join("labels.csv")).unwrap();
        assert_eq!(read["industrial_01"], ("industrial".into(), "R1".into(), DriftStatus::Stable));
    }
}
