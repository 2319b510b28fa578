//! INI run configuration.
//!
//! Sections and keys (all optional; defaults in [`RunConfig::default`]):
//!
//! ```text
//! [data]        source = synth | csv
//!               load, exogenous, hierarchy, labels      (csv)
//!               gap_policy = ffill | reject, max_gap
//!               synth_per_archetype, synth_hours, synth_regions, synth_seed,
//!               drift_factor, drift_every                (synth)
//! [split]       train_hours, val_hours, test_hours
//! [features]    preset = default | load_only, utc_offset_hours, holidays
//! [model]       kind = ridge | gbdt, alpha, learning_rate, max_depth,
//!               max_leaves, min_samples_leaf, local_n_estimators,
//!               global_n_estimators
//! [paradigm]    names = local, global, clusterwise
//!               variant = model-based | instance | weighted-instance
//!               k = <n> | auto, seed
//! [evaluation]  peak_period = monthly | annual | whole, peaks_paradigm,
//!               hierarchy = on | off
//! [output]      dir, run_id
//! ```
//!
//! Unknown sections or keys are rejected. [`RunConfig::to_ini`] writes every
//! key, so the persisted file parses back to an equal config.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clustcast::evalmetrics::PeakPeriod;
use clustcast::models::{Hyperparams, ModelKind};
use clustcast::paradigms::ClusterVariant;
use ini::Ini;

use crate::CliError;

pub const PARADIGMS: [&str; 3] = ["local", "global", "clusterwise"];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv {
        load: PathBuf,
        exogenous: Option<PathBuf>,
        hierarchy: Option<PathBuf>,
        labels: Option<PathBuf>,
    },
    Synth(SynthSettings),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub per_archetype: usize,
    pub hours: usize,
    pub regions: usize,
    pub seed: u64,
    /// Sudden drift factor applied from the test start.
    pub drift_factor: Option<f64>,
    /// Every `drift_every`-th series (in id order) drifts.
    pub drift_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KChoice {
    Fixed(usize),
    /// Best silhouette over 2..=6.
    Auto,
}

impl fmt::Display for KChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KChoice::Fixed(k) => write!(f, "{k}"),
            KChoice::Auto => f.write_str("auto"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: DataSource,
    pub max_gap: Option<usize>,
    pub train_hours: usize,
    pub val_hours: usize,
    pub test_hours: usize,
    pub load_only: bool,
    pub utc_offset_hours: i32,
    pub holidays: Option<PathBuf>,
    pub kind: ModelKind,
    pub alpha: f64,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub max_leaves: usize,
    pub min_samples_leaf: usize,
    pub local_n_estimators: usize,
    pub global_n_estimators: usize,
    pub paradigms: Vec<String>,
    pub variant: ClusterVariant,
    pub k: KChoice,
    pub seed: u64,
    pub peak_period: PeakPeriod,
    pub peaks_paradigm: Option<String>,
    pub hierarchy_eval: bool,
    pub out_dir: PathBuf,
    pub run_id: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let local = Hyperparams::local_default();
        Self {
            source: DataSource::Synth(SynthSettings {
                per_archetype: 5,
                hours: 12 * 7 * 24,
                regions: 2,
                seed: 1,
                drift_factor: None,
                drift_every: 2,
            }),
            max_gap: Some(3),
            train_hours: 9 * 7 * 24,
            val_hours: 7 * 24,
            test_hours: 2 * 7 * 24,
            load_only: false,
            utc_offset_hours: 0,
            holidays: None,
            kind: ModelKind::Ridge,
            alpha: local.alpha,
            learning_rate: local.learning_rate,
            max_depth: local.max_depth,
            max_leaves: local.max_leaves,
            min_samples_leaf: local.min_samples_leaf,
            local_n_estimators: local.n_estimators,
            global_n_estimators: Hyperparams::global_default().n_estimators,
            paradigms: vec!["local".into(), "global".into(), "clusterwise".into()],
            variant: ClusterVariant::ModelBased,
            k: KChoice::Fixed(2),
            seed: 42,
            peak_period: PeakPeriod::Whole,
            peaks_paradigm: None,
            hierarchy_eval: false,
            out_dir: PathBuf::from("runs"),
            run_id: None,
        }
    }
}

fn err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Key lookups over one section that remember which keys were read.
struct Section<'a> {
    name: &'a str,
    values: BTreeMap<String, String>,
}

impl Section<'_> {
    fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key).filter(|v| !v.is_empty())
    }

    fn parse<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|e| err(format!("[{}] {key} = {raw}: {e}", self.name))),
        }
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        self.take(key).map(PathBuf::from)
    }

    fn finish(self) -> Result<(), CliError> {
        match self.values.keys().next() {
            Some(k) => Err(err(format!("unknown key `{k}` in [{}]", self.name))),
            None => Ok(()),
        }
    }
}

fn on_off(raw: &str) -> Result<bool, CliError> {
    match raw.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(err(format!("expected on/off, got `{raw}`"))),
    }
}

const SECTIONS: [&str; 7] = ["data", "split", "features", "model", "paradigm", "evaluation", "output"];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let ini = Ini::load_from_str(text).map_err(|e| err(format!("malformed config: {e}")))?;
        Self::from_ini(&ini)
    }

    /// Parse after applying `section.key=value` overrides.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut ini = Ini::load_from_str(text).map_err(|e| err(format!("malformed config: {e}")))?;
        for o in overrides {
            let (lhs, value) = o
                .split_once('=')
                .ok_or_else(|| err(format!("override `{o}` is not section.key=value")))?;
            let (section, key) = lhs
                .trim()
                .split_once('.')
                .ok_or_else(|| err(format!("override `{o}` is not section.key=value")))?;
            ini.with_section(Some(section.trim())).set(key.trim(), value.trim());
        }
        Self::from_ini(&ini)
    }

    fn from_ini(ini: &Ini) -> Result<Self, CliError> {
        let mut sections: BTreeMap<&str, BTreeMap<String, String>> = BTreeMap::new();
        for (name, props) in ini.iter() {
            let Some(name) = name else {
                if props.iter().next().is_some() {
                    return Err(err("keys outside a section"));
                }
                continue;
            };
            let name = SECTIONS
                .iter()
                .find(|s| **s == name)
                .ok_or_else(|| err(format!("unknown section [{name}]")))?;
            let entry = sections.entry(name).or_default();
            for (k, v) in props.iter() {
                entry.insert(k.to_string(), v.to_string());
            }
        }
        let mut section = |name: &'static str| Section {
            name,
            values: sections.remove(name).unwrap_or_default(),
        };
        let d = RunConfig::default();
        let DataSource::Synth(ds) = &d.source else { unreachable!() };

        let mut s = section("data");
        let source = match s.take("source").as_deref().unwrap_or("synth") {
            "synth" => DataSource::Synth(SynthSettings {
                per_archetype: s.parse("synth_per_archetype", ds.per_archetype)?,
                hours: s.parse("synth_hours", ds.hours)?,
                regions: s.parse("synth_regions", ds.regions)?,
                seed: s.parse("synth_seed", ds.seed)?,
                drift_factor: s.take("drift_factor").map(|v| v.parse()).transpose().map_err(
                    |e: std::num::ParseFloatError| err(format!("[data] drift_factor: {e}")),
                )?,
                drift_every: s.parse("drift_every", ds.drift_every)?,
            }),
            "csv" => DataSource::Csv {
                load: s.path("load").ok_or_else(|| err("[data] source = csv needs `load`"))?,
                exogenous: s.path("exogenous"),
                hierarchy: s.path("hierarchy"),
                labels: s.path("labels"),
            },
            other => return Err(err(format!("[data] unknown source `{other}`"))),
        };
        let max_gap = match s.take("gap_policy").as_deref().unwrap_or("ffill") {
            "reject" => None,
            "ffill" => Some(s.parse("max_gap", 3)?),
            other => return Err(err(format!("[data] unknown gap_policy `{other}`"))),
        };
        s.finish()?;

        let mut s = section("split");
        let (train_hours, val_hours, test_hours) = (
            s.parse("train_hours", d.train_hours)?,
            s.parse("val_hours", d.val_hours)?,
            s.parse("test_hours", d.test_hours)?,
        );
        s.finish()?;

        let mut s = section("features");
        let load_only = match s.take("preset").as_deref().unwrap_or("default") {
            "default" => false,
            "load_only" => true,
            other => return Err(err(format!("[features] unknown preset `{other}`"))),
        };
        let utc_offset_hours = s.parse("utc_offset_hours", d.utc_offset_hours)?;
        let holidays = s.path("holidays");
        s.finish()?;

        let mut s = section("model");
        let kind = s.parse("kind", d.kind)?;
        let alpha = s.parse("alpha", d.alpha)?;
        let learning_rate = s.parse("learning_rate", d.learning_rate)?;
        let max_depth = s.parse("max_depth", d.max_depth)?;
        let max_leaves = s.parse("max_leaves", d.max_leaves)?;
        let min_samples_leaf = s.parse("min_samples_leaf", d.min_samples_leaf)?;
        let local_n_estimators = s.parse("local_n_estimators", d.local_n_estimators)?;
        let global_n_estimators = s.parse("global_n_estimators", d.global_n_estimators)?;
        s.finish()?;

        let mut s = section("paradigm");
        let paradigms = match s.take("names") {
            None => d.paradigms.clone(),
            Some(raw) => raw.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect(),
        };
        let variant = s.parse("variant", d.variant)?;
        let k = match s.take("k") {
            None => d.k,
            Some(raw) if raw == "auto" => KChoice::Auto,
            Some(raw) => KChoice::Fixed(raw.parse().map_err(|e| err(format!("[paradigm] k = {raw}: {e}")))?),
        };
        let seed = s.parse("seed", d.seed)?;
        s.finish()?;

        let mut s = section("evaluation");
        let peak_period = s.parse("peak_period", d.peak_period)?;
        let peaks_paradigm = s.take("peaks_paradigm");
        let hierarchy_eval = s.take("hierarchy").map(|v| on_off(&v)).transpose()?.unwrap_or(false);
        s.finish()?;

        let mut s = section("output");
        let out_dir = s.path("dir").unwrap_or(d.out_dir);
        let run_id = s.take("run_id");
        s.finish()?;

        let cfg = Self {
            source,
            max_gap,
            train_hours,
            val_hours,
            test_hours,
            load_only,
            utc_offset_hours,
            holidays,
            kind,
            alpha,
            learning_rate,
            max_depth,
            max_leaves,
            min_samples_leaf,
            local_n_estimators,
            global_n_estimators,
            paradigms,
            variant,
            k,
            seed,
            peak_period,
            peaks_paradigm,
            hierarchy_eval,
            out_dir,
            run_id,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.paradigms.is_empty() {
            return Err(err("[paradigm] names is empty"));
        }
        for p in &self.paradigms {
            if !PARADIGMS.contains(&p.as_str()) {
                return Err(err(format!("[paradigm] unknown paradigm `{p}`")));
            }
        }
        let mut seen = self.paradigms.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.paradigms.len() {
            return Err(err("[paradigm] names lists a paradigm twice"));
        }
        if let Some(p) = &self.peaks_paradigm {
            if !self.paradigms.contains(p) {
                return Err(err(format!("[evaluation] peaks_paradigm `{p}` is not trained")));
            }
        }
        if self.k == KChoice::Fixed(0) {
            return Err(err("[paradigm] k must be positive"));
        }
        if self.train_hours == 0 || self.val_hours == 0 || self.test_hours == 0 {
            return Err(err("[split] every span must be at least one hour"));
        }
        for hp in [self.local_hp(), self.global_hp()] {
            hp.validate().map_err(|e| err(format!("[model] {e}")))?;
        }
        if let DataSource::Synth(s) = &self.source {
            if s.per_archetype == 0 || s.regions == 0 || s.drift_every == 0 {
                return Err(err("[data] synth counts must be positive"));
            }
            if self.total_hours() > s.hours {
                return Err(err(format!(
                    "[split] spans need {} hours but synth_hours = {}",
                    self.total_hours(),
                    s.hours
                )));
            }
            if let Some(f) = s.drift_factor {
                if !(f > 0.0 && f.is_finite()) {
                    return Err(err("[data] drift_factor must be positive"));
                }
            }
        }
        if !(-24..=24).contains(&self.utc_offset_hours) {
            return Err(err("[features] utc_offset_hours must lie in -24..=24"));
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return Err(err(format!("[output] invalid run_id `{id}`")));
            }
        }
        Ok(())
    }

    pub fn total_hours(&self) -> usize {
        self.train_hours + self.val_hours + self.test_hours
    }

    pub fn local_hp(&self) -> Hyperparams {
        Hyperparams {
            alpha: self.alpha,
            n_estimators: self.local_n_estimators,
            learning_rate: self.learning_rate,
            max_depth: self.max_depth,
            max_leaves: self.max_leaves,
            min_samples_leaf: self.min_samples_leaf,
        }
    }

    pub fn global_hp(&self) -> Hyperparams {
        Hyperparams {
            n_estimators: self.global_n_estimators,
            ..self.local_hp()
        }
    }

    /// Canonical text with every key spelled out.
    pub fn to_ini(&self) -> String {
        let mut ini = Ini::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        {
            let mut s = ini.with_section(Some("data"));
            match &self.source {
                DataSource::Synth(x) => {
                    s.set("source", "synth")
                        .set("synth_per_archetype", x.per_archetype.to_string())
                        .set("synth_hours", x.hours.to_string())
                        .set("synth_regions", x.regions.to_string())
                        .set("synth_seed", x.seed.to_string())
                        .set("drift_factor", x.drift_factor.map(|f| f.to_string()).unwrap_or_default())
                        .set("drift_every", x.drift_every.to_string());
                }
                DataSource::Csv {
                    load,
                    exogenous,
                    hierarchy,
                    labels,
                } => {
                    s.set("source", "csv")
                        .set("load", load.display().to_string())
                        .set("exogenous", path(exogenous))
                        .set("hierarchy", path(hierarchy))
                        .set("labels", path(labels));
                }
            }
            match self.max_gap {
                Some(g) => s.set("gap_policy", "ffill").set("max_gap", g.to_string()),
                None => s.set("gap_policy", "reject"),
            };
        }
        ini.with_section(Some("split"))
            .set("train_hours", self.train_hours.to_string())
            .set("val_hours", self.val_hours.to_string())
            .set("test_hours", self.test_hours.to_string());
        ini.with_section(Some("features"))
            .set("preset", if self.load_only { "load_only" } else { "default" })
            .set("utc_offset_hours", self.utc_offset_hours.to_string())
            .set("holidays", path(&self.holidays));
        ini.with_section(Some("model"))
            .set("kind", self.kind.to_string())
            .set("alpha", self.alpha.to_string())
            .set("learning_rate", self.learning_rate.to_string())
            .set("max_depth", self.max_depth.to_string())
            .set("max_leaves", self.max_leaves.to_string())
            .set("min_samples_leaf", self.min_samples_leaf.to_string())
            .set("local_n_estimators", self.local_n_estimators.to_string())
            .set("global_n_estimators", self.global_n_estimators.to_string());
        ini.with_section(Some("paradigm"))
            .set("names", self.paradigms.join(", "))
            .set("variant", self.variant.to_string())
            .set("k", self.k.to_string())
            .set("seed", self.seed.to_string());
        ini.with_section(Some("evaluation"))
            .set("peak_period", self.peak_period.to_string())
            .set("peaks_paradigm", self.peaks_paradigm.clone().unwrap_or_default())
            .set("hierarchy", if self.hierarchy_eval { "on" } else { "off" });
        ini.with_section(Some("output"))
            .set("dir", self.out_dir.display().to_string())
            .set("run_id", self.run_id.clone().unwrap_or_default());
        let mut buf = Vec::new();
        ini.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ini output is UTF-8")
    }
}
