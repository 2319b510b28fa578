//! Stage execution for one run directory.
//!
//! A run writes everything under `<output.dir>/<run-id>/`:
//!
//! ```text
//! config.orig.ini  config as given        config.ini   effective config
//! data/            load, exogenous, hierarchy and label CSVs
//! profiles.csv     heterogeneity indices of the training view
//! models/<name>/   one bundle per trained paradigm
//! metrics.csv peaks.csv summary.csv drift.csv zeroshot.csv coherency.csv
//! manifest.txt     sha256 of every stage's outputs
//! ```
//!
//! The run id defaults to a digest of the effective config, so reruns of the
//! same config land in the same directory and overwrite it.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clustcast::evalmetrics::{
    self, compute_scaled_metrics, drift_segment_report, peak_error, DriftStatus, MetricReport, PeakReport, ReportMeta,
};
use clustcast::featurizer::{heterogeneity_profile, read_holidays, FeatureSpec};
use clustcast::paradigms::{
    self, choose_k, forecast_all, save_bundle, zero_shot_forecast, Forecast, Paradigm, TrainSettings,
};
use clustcast::series_store::{
    aggregate_sum, ingest_files, write_hierarchy_csv, write_wide_csv, AggregationLevel, GapPolicy, IngestConfig, MinMax,
    SeriesCollection,
};
use clustcast::synthgen::{self, generate_collection, inject_drift, DriftEvent, DriftKind, SynthConfig};
use sha2::{Digest, Sha256};

use crate::config::{DataSource, KChoice, RunConfig};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Ingest,
    Synth,
    Profile,
    Train,
    Evaluate,
    Peaks,
    Zeroshot,
    Report,
    Run,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Ingest => "ingest",
            Command::Synth => "synth",
            Command::Profile => "profile",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Peaks => "peaks",
            Command::Zeroshot => "zeroshot",
            Command::Report => "report",
            Command::Run => "run",
        })
    }
}

impl FromStr for Command {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        [
            Command::Ingest,
            Command::Synth,
            Command::Profile,
            Command::Train,
            Command::Evaluate,
            Command::Peaks,
            Command::Zeroshot,
            Command::Report,
            Command::Run,
        ]
        .into_iter()
        .find(|c| c.to_string() == s)
        .ok_or_else(|| CliError::Config(format!("unknown command `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Data,
    Profile,
    Train,
    Evaluate,
    Peaks,
    Report,
    ZeroShot,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Profile => "profile",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Peaks => "peaks",
            Stage::Report => "report",
            Stage::ZeroShot => "zeroshot",
        }
    }
}

impl Command {
    fn stages(self, cfg: &RunConfig) -> Vec<Stage> {
        use Stage::*;
        match self {
            Command::Ingest | Command::Synth => vec![Data],
            Command::Profile => vec![Data, Profile],
            Command::Train => vec![Data, Train],
            Command::Evaluate => vec![Data, Train, Evaluate],
            Command::Peaks => vec![Data, Train, Evaluate, Peaks],
            Command::Report => vec![Data, Train, Evaluate, Report],
            Command::Zeroshot => vec![Data, Train, ZeroShot],
            Command::Run => {
                let mut s = vec![Data, Profile, Train, Evaluate, Peaks, Report];
                if cfg.hierarchy_eval {
                    s.push(ZeroShot);
                }
                s
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageRecord {
    pub stage: String,
    pub sha256: String,
    /// Paths relative to the run directory.
    pub files: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub run_id: String,
    pub stages: Vec<StageRecord>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn default_run_id(cfg: &RunConfig) -> String {
    format!("run-{}", &hex(&Sha256::digest(cfg.to_ini().as_bytes()))[..12])
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    spec: FeatureSpec,
    full: Option<SeriesCollection>,
    labels: Option<BTreeMap<String, DriftStatus>>,
    models: Vec<(String, Paradigm)>,
    forecasts: Vec<(String, Vec<Forecast>)>,
    reports: Vec<MetricReport>,
}

/// Run the stages `command` selects and write the manifest.
pub fn run_pipeline(cfg: &RunConfig, original: &str, command: Command) -> Result<RunOutcome, CliError> {
    match (command, &cfg.source) {
        (Command::Ingest, DataSource::Synth(_)) => {
            return Err(CliError::Config("`ingest` needs [data] source = csv".into()))
        }
        (Command::Synth, DataSource::Csv { .. }) => {
            return Err(CliError::Config("`synth` needs [data] source = synth".into()))
        }
        _ => {}
    }
    let run_id = cfg.run_id.clone().unwrap_or_else(|| default_run_id(cfg));
    let dir = cfg.out_dir.join(&run_id);
    let io = |e: std::io::Error| CliError::Data(format!("{}: {e}", dir.display()));
    fs::create_dir_all(&dir).map_err(io)?;
    fs::write(dir.join("config.orig.ini"), original).map_err(io)?;
    let canonical = cfg.to_ini();
    fs::write(dir.join("config.ini"), &canonical).map_err(io)?;

    let mut ctx = Ctx {
        cfg,
        spec: feature_spec(cfg)?,
        dir: dir.clone(),
        full: None,
        labels: None,
        models: Vec::new(),
        forecasts: Vec::new(),
        reports: Vec::new(),
    };
    let mut records = Vec::new();
    for stage in command.stages(cfg) {
        log::info!("stage {}", stage.name());
        let files = match stage {
            Stage::Data => stage_data(&mut ctx),
            Stage::Profile => stage_profile(&ctx),
            Stage::Train => stage_train(&mut ctx),
            Stage::Evaluate => stage_evaluate(&mut ctx),
            Stage::Peaks => stage_peaks(&ctx),
            Stage::Report => stage_report(&ctx),
            Stage::ZeroShot => stage_zeroshot(&ctx),
        }?;
        records.push(StageRecord {
            stage: stage.name().to_string(),
            sha256: digest_files(&dir, &files).map_err(io)?,
            files,
        });
    }

    let mut manifest = format!(
        "run_id={run_id}\ncommand={command}\nconfig_sha256={}\n",
        hex(&Sha256::digest(canonical.as_bytes()))
    );
    for r in &records {
        manifest.push_str(&format!("stage.{}.sha256={}\n", r.stage, r.sha256));
        manifest.push_str(&format!("stage.{}.files={}\n", r.stage, r.files.join(",")));
    }
    fs::write(dir.join("manifest.txt"), manifest).map_err(io)?;
    Ok(RunOutcome {
        run_dir: dir,
        run_id,
        stages: records,
    })
}

fn digest_files(dir: &Path, files: &[String]) -> std::io::Result<String> {
    let mut h = Sha256::new();
    for f in files {
        h.update(f.as_bytes());
        h.update([0]);
        h.update(fs::read(dir.join(f))?);
    }
    Ok(hex(&h.finalize()))
}

fn feature_spec(cfg: &RunConfig) -> Result<FeatureSpec, CliError> {
    let mut spec = if cfg.load_only {
        FeatureSpec::load_only()
    } else {
        FeatureSpec::default()
    };
    spec.utc_offset_hours = cfg.utc_offset_hours;
    if let Some(p) = &cfg.holidays {
        spec.holidays = read_holidays(p).map_err(|e| CliError::Config(format!("holidays: {e}")))?;
    }
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(spec)
}

fn settings(ctx: &Ctx<'_>) -> TrainSettings {
    TrainSettings {
        spec: ctx.spec.clone(),
        kind: ctx.cfg.kind,
        local_hp: ctx.cfg.local_hp(),
        global_hp: ctx.cfg.global_hp(),
        seed: ctx.cfg.seed,
    }
}

fn full<'c>(ctx: &'c Ctx<'_>) -> &'c SeriesCollection {
    ctx.full.as_ref().expect("data stage runs first")
}

/// First hour of the test span.
fn test_start(cfg: &RunConfig) -> usize {
    cfg.train_hours + cfg.val_hours
}

fn stage_data(ctx: &mut Ctx<'_>) -> Result<Vec<String>, CliError> {
    let cfg = ctx.cfg;
    let data_err = |e: &dyn fmt::Display| CliError::Data(e.to_string());
    let data_dir = ctx.dir.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| data_err(&e))?;
    let mut files = Vec::new();
    let (collection, labels) = match &cfg.source {
        DataSource::Synth(s) => {
            let mut scfg = SynthConfig::two_archetype(s.per_archetype, s.hours, s.seed);
            scfg.regions = s.regions;
            let out = generate_collection(&scfg).map_err(|e| data_err(&e))?;
            let (collection, events, drift) = match s.drift_factor {
                Some(factor) => {
                    let series = out.collection.ids().step_by(s.drift_every).map(str::to_string).collect();
                    let events = vec![DriftEvent {
                        kind: DriftKind::Sudden { factor },
                        start: out.collection.timestamp(test_start(cfg)),
                        series,
                    }];
                    let (c, labels) = inject_drift(&out.collection, &events).map_err(|e| data_err(&e))?;
                    (c, events, labels)
                }
                None => {
                    let labels = out.collection.ids().map(|id| (id.to_string(), DriftStatus::Stable)).collect();
                    (out.collection.clone(), Vec::new(), labels)
                }
            };
            synthgen::write_synth_outputs(&data_dir, &scfg, &collection, &out.truth, &events, &drift)
                .map_err(|e| data_err(&e))?;
            for f in ["load.csv", "exogenous.csv", "hierarchy.csv", "labels.csv", "synth_manifest.json"] {
                files.push(format!("data/{f}"));
            }
            (collection, Some(drift))
        }
        DataSource::Csv {
            load,
            exogenous,
            hierarchy,
            labels,
        } => {
            let ingest = IngestConfig {
                gap_policy: match cfg.max_gap {
                    Some(max_gap) => GapPolicy::ForwardFill { max_gap },
                    None => GapPolicy::Reject,
                },
            };
            let c = ingest_files(load, exogenous.as_deref(), hierarchy.as_deref(), &ingest)
                .map_err(|e| data_err(&e))?;
            write_wide_csv(&data_dir.join("load.csv"), c.start(), c.series()).map_err(|e| data_err(&e))?;
            files.push("data/load.csv".into());
            if !c.exogenous().is_empty() {
                write_wide_csv(&data_dir.join("exogenous.csv"), c.start(), c.exogenous()).map_err(|e| data_err(&e))?;
                files.push("data/exogenous.csv".into());
            }
            if !c.hierarchy().is_empty() {
                write_hierarchy_csv(&data_dir.join("hierarchy.csv"), c.hierarchy()).map_err(|e| data_err(&e))?;
                files.push("data/hierarchy.csv".into());
            }
            let drift = match labels {
                Some(p) => {
                    let read = synthgen::read_labels_csv(p).map_err(|e| data_err(&e))?;
                    fs::copy(p, data_dir.join("labels.csv")).map_err(|e| data_err(&e))?;
                    files.push("data/labels.csv".into());
                    Some(read.into_iter().map(|(id, (_, _, s))| (id, s)).collect())
                }
                None => None,
            };
            (c, drift)
        }
    };
    let need = cfg.total_hours();
    if collection.horizon() < need {
        return Err(CliError::Data(format!(
            "split spans need {need} hours; data covers {}",
            collection.horizon()
        )));
    }
    for e in &ctx.spec.exogenous {
        if !collection.exogenous().contains_key(&e.channel) {
            return Err(CliError::Data(format!(
                "feature spec needs exogenous channel `{}`",
                e.channel
            )));
        }
    }
    if test_start(cfg) < ctx.spec.window {
        return Err(CliError::Data(format!(
            "train + val spans must cover the {} h feature window",
            ctx.spec.window
        )));
    }
    ctx.full = Some(collection.window(0, need - 1).map_err(|e| data_err(&e))?);
    ctx.labels = labels;
    Ok(files)
}

fn csv_err(stage: fn(String) -> CliError) -> impl Fn(csv::Error) -> CliError {
    move |e| stage(e.to_string())
}

fn stage_profile(ctx: &Ctx<'_>) -> Result<Vec<String>, CliError> {
    let train = full(ctx).window(0, ctx.cfg.train_hours - 1).map_err(|e| CliError::Data(e.to_string()))?;
    let err = csv_err(CliError::Data);
    let mut w = csv::Writer::from_path(ctx.dir.join("profiles.csv")).map_err(&err)?;
    w.write_record([
        "series_id",
        "seasonality_index",
        "total_variation",
        "night_to_day",
        "weekend_to_weekday",
    ])
    .map_err(&err)?;
    for (id, values) in train.series() {
        let p = heterogeneity_profile(values, train.start(), ctx.cfg.utc_offset_hours)
            .map_err(|e| CliError::Data(format!("profile `{id}`: {e}")))?;
        w.write_record([
            id.clone(),
            p.seasonality_index.to_string(),
            p.total_variation.to_string(),
            p.night_to_day.to_string(),
            p.weekend_to_weekday.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(vec!["profiles.csv".into()])
}

fn stage_train(ctx: &mut Ctx<'_>) -> Result<Vec<String>, CliError> {
    let train_err = |e: &dyn fmt::Display| CliError::Train(e.to_string());
    let train = full(ctx).window(0, ctx.cfg.train_hours - 1).map_err(|e| train_err(&e))?;
    let s = settings(ctx);
    let mut files = Vec::new();
    let mut models = Vec::new();
    for name in &ctx.cfg.paradigms {
        let k = match ctx.cfg.k {
            KChoice::Fixed(k) => k,
            KChoice::Auto if name == "clusterwise" => {
                let (k, scores) = choose_k(&train, &s, ctx.cfg.variant, 2..=6).map_err(|e| train_err(&e))?;
                log::info!("silhouette scores {scores:?}; K = {k}");
                k
            }
            KChoice::Auto => 1,
        };
        let model = paradigms::train(name, &train, &s, ctx.cfg.variant, k).map_err(|e| train_err(&e))?;
        log::info!("{name}: {} model(s)", model.n_models());
        let rel = format!("models/{name}");
        save_bundle(&model, &ctx.dir.join(&rel)).map_err(|e| train_err(&e))?;
        for f in ["manifest.txt", "model.json", "clusters.csv", "normalizers.csv"] {
            files.push(format!("{rel}/{f}"));
        }
        models.push((name.clone(), model));
    }
    ctx.models = models;
    Ok(files)
}

fn eval_err(e: impl fmt::Display) -> CliError {
    CliError::Eval(e.to_string())
}

fn meta(name: &str, model: &Paradigm, forecasts: &[Forecast], seed: u64) -> ReportMeta {
    let window = forecasts
        .first()
        .map(|f| (f.start, f.start + chrono_hours(f.len().saturating_sub(1))));
    ReportMeta {
        paradigm: name.to_string(),
        model: model.kind().to_string(),
        variant: model.variant().map(|v| v.to_string()),
        k: model.k(),
        seed,
        eval_window: window,
    }
}

fn chrono_hours(h: usize) -> chrono::Duration {
    chrono::Duration::hours(h as i64)
}

/// Min-max range of a series over the whole run horizon, the scale all
/// reported metrics share.
fn metric_scale(c: &SeriesCollection, id: &str) -> Result<MinMax, CliError> {
    c.get(id)
        .and_then(MinMax::fit)
        .ok_or_else(|| CliError::Eval(format!("series `{id}` is constant or missing")))
}

fn stage_evaluate(ctx: &mut Ctx<'_>) -> Result<Vec<String>, CliError> {
    let cfg = ctx.cfg;
    let from = test_start(cfg) - ctx.spec.window;
    let eval = full(ctx).window(from, cfg.total_hours() - 1).map_err(eval_err)?;
    let mut reports = Vec::new();
    let mut all = Vec::new();
    for (name, model) in &ctx.models {
        let forecasts = forecast_all(model, &eval).map_err(eval_err)?;
        let mut report = MetricReport::new(meta(name, model, &forecasts, cfg.seed));
        for f in &forecasts {
            let m = compute_scaled_metrics(&f.actual, &f.predicted, &metric_scale(full(ctx), &f.series_id)?)
                .map_err(|e| CliError::Eval(format!("{name} `{}`: {e}", f.series_id)))?;
            report.per_series.insert(f.series_id.clone(), m);
        }
        log::info!("{name}: mean nMAE {:.4}%", report.mean_nmae());
        reports.push(report);
        all.push((name.clone(), forecasts));
    }
    evalmetrics::write_metrics_csv(&ctx.dir.join("metrics.csv"), &reports.iter().collect::<Vec<_>>())
        .map_err(eval_err)?;
    ctx.reports = reports;
    ctx.forecasts = all;
    Ok(vec!["metrics.csv".into()])
}

fn stage_peaks(ctx: &Ctx<'_>) -> Result<Vec<String>, CliError> {
    let name = ctx.cfg.peaks_paradigm.clone().unwrap_or_else(|| ctx.cfg.paradigms[0].clone());
    let (_, forecasts) = ctx
        .forecasts
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| CliError::Eval(format!("no forecasts for `{name}`")))?;
    let reports: Vec<PeakReport> = forecasts
        .iter()
        .map(|f| peak_error(&f.series_id, f.start, &f.actual, &f.predicted, ctx.cfg.peak_period))
        .collect::<Result<_, _>>()
        .map_err(eval_err)?;
    if reports.iter().all(|r| r.entries.is_empty()) {
        log::warn!("no complete {} period inside the test span", ctx.cfg.peak_period);
    }
    evalmetrics::write_peaks_csv(&ctx.dir.join("peaks.csv"), &reports).map_err(eval_err)?;
    Ok(vec!["peaks.csv".into()])
}

fn stage_report(ctx: &Ctx<'_>) -> Result<Vec<String>, CliError> {
    let err = csv_err(CliError::Eval);
    let mut w = csv::Writer::from_path(ctx.dir.join("summary.csv")).map_err(&err)?;
    w.write_record([
        "paradigm",
        "model",
        "variant",
        "k",
        "seed",
        "n_series",
        "nMAE_pct_min",
        "nMAE_pct_mean",
        "nMAE_pct_max",
        "FB_mean",
        "MSE_mean",
        "MAPE_pct_mean",
    ])
    .map_err(&err)?;
    for r in &ctx.reports {
        let a = r.aggregate().ok_or_else(|| CliError::Eval("empty report".into()))?;
        w.write_record([
            r.meta.paradigm.clone(),
            r.meta.model.clone(),
            r.meta.variant.clone().unwrap_or_default(),
            r.meta.k.map(|k| k.to_string()).unwrap_or_default(),
            r.meta.seed.to_string(),
            r.per_series.len().to_string(),
            a.nmae_pct.min.to_string(),
            a.nmae_pct.mean.to_string(),
            a.nmae_pct.max.to_string(),
            a.fb.mean.to_string(),
            a.mse.mean.to_string(),
            a.mape_pct.mean.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(eval_err)?;
    let mut files = vec!["summary.csv".to_string()];

    let find = |name: &str| ctx.reports.iter().find(|r| r.meta.paradigm == name);
    match (&ctx.labels, find("local"), find("global")) {
        (Some(labels), Some(local), Some(global)) => {
            let rows = drift_segment_report(local, global, labels).map_err(eval_err)?;
            evalmetrics::write_drift_csv(&ctx.dir.join("drift.csv"), &rows).map_err(eval_err)?;
            files.push("drift.csv".into());
        }
        _ => log::info!("drift report needs labels and both local and global paradigms; skipped"),
    }
    Ok(files)
}

fn stage_zeroshot(ctx: &Ctx<'_>) -> Result<Vec<String>, CliError> {
    let cfg = ctx.cfg;
    let (name, model) = ctx
        .models
        .iter()
        .find(|(n, _)| n == "global")
        .or_else(|| ctx.models.iter().find(|(n, _)| n == "clusterwise"))
        .ok_or_else(|| CliError::Eval("zero-shot needs a global or cluster-wise paradigm".into()))?;
    let areas = full(ctx);
    if areas.hierarchy().is_empty() {
        return Err(CliError::Eval("zero-shot evaluation needs a hierarchy".into()));
    }
    let regions = aggregate_sum(areas, &AggregationLevel::AreaToRegion).map_err(eval_err)?;
    let system = aggregate_sum(
        &regions,
        &AggregationLevel::RegionToSystem {
            name: "system".into(),
        },
    )
    .map_err(eval_err)?;
    let history = test_start(cfg);
    let mut report = MetricReport::new(ReportMeta {
        paradigm: format!("zeroshot-{name}"),
        model: model.kind().to_string(),
        variant: model.variant().map(|v| v.to_string()),
        k: model.k(),
        seed: cfg.seed,
        eval_window: Some((
            areas.timestamp(history),
            areas.timestamp(cfg.total_hours() - 1),
        )),
    });
    let mut region_preds = Vec::new();
    let mut system_pred = None;
    for (level, c) in [("region", &regions), ("system", &system)] {
        for (id, values) in c.series() {
            let z = zero_shot_forecast(model, id, values, c.start(), c.exogenous(), history)
                .map_err(|e| CliError::Eval(format!("zero-shot {level} `{id}`: {e}")))?;
            let m = compute_scaled_metrics(&z.actual, &z.predicted, &metric_scale(c, id)?).map_err(eval_err)?;
            report.per_series.insert(id.clone(), m);
            if level == "region" {
                region_preds.push(z.predicted);
            } else {
                system_pred = Some(z);
            }
        }
    }
    evalmetrics::write_metrics_csv(&ctx.dir.join("zeroshot.csv"), &[&report]).map_err(eval_err)?;
    let whole = system_pred.expect("system series exists");
    let parts: Vec<&[f64]> = region_preds.iter().map(Vec::as_slice).collect();
    let coherency = evalmetrics::coherency_gap(&parts, &whole.predicted, &whole.actual).map_err(eval_err)?;
    log::info!("coherency: mean |gap| {:.4} ({:.4}%)", coherency.mean_abs_gap, 100.0 * coherency.relative_gap);
    evalmetrics::write_coherency_csv(&ctx.dir.join("coherency.csv"), whole.start, &whole.predicted, &coherency)
        .map_err(eval_err)?;
    Ok(vec!["zeroshot.csv".into(), "coherency.csv".into()])
}
