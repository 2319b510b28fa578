//! Training and applying the forecasting paradigms.
//!
//! Every paradigm normalizes each series with min-max statistics from its own
//! training span, featurizes it with a shared [`FeatureSpec`] and fits
//!
//! - [`train_local`]: one model per series;
//! - [`train_global`]: one model on all series' rows pooled by id, then time;
//! - [`train_clusterwise`]: one pooled model per cluster, where clusters are
//!   whole series ([`ClusterVariant::ModelBased`]) or individual sample rows
//!   ([`ClusterVariant::Instance`], [`ClusterVariant::WeightedInstance`]).
//!
//! Row clusters route unseen rows to the nearest centroid. A cluster with
//! fewer rows than the learner needs is merged into its nearest neighbour,
//! so a cluster-wise model may hold fewer than K fitted models.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{
    self, cluster_coefficients, coefficient_matrix, fit_local_models, weighted_sq_distance, ClusterError, InstanceClusters, SeriesClusters,
};
use crate::featurizer::{build_samples, build_series_samples, FeatureError, FeatureSpec, SampleSet};
use crate::models::{self, FittedModel, Hyperparams, ModelError, ModelKind};
use crate::series_store::{MinMax, Normalizer, SeriesCollection, SeriesError};

#[derive(Debug, Error)]
pub enum ParadigmError {
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error("series `{id}`: {source}")]
    Feature { id: String, source: FeatureError },
    #[error("{scope}: {source}")]
    Model { scope: String, source: ModelError },
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("series `{0}` is not covered by this model")]
    UnknownSeries(String),
    #[error("zero-shot series needs more than {need} hours of history, got {got}")]
    InsufficientHistory { got: usize, need: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = ParadigmError> = std::result::Result<T, E>;

fn feature_err(id: &str) -> impl FnOnce(FeatureError) -> ParadigmError + '_ {
    move |source| ParadigmError::Feature {
        id: id.to_string(),
        source,
    }
}

fn model_err(scope: String) -> impl FnOnce(ModelError) -> ParadigmError {
    move |source| ParadigmError::Model { scope, source }
}

/// Learner and feature choices shared by all paradigms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub spec: FeatureSpec,
    pub kind: ModelKind,
    /// Used for per-series models, including those behind model-based clustering.
    pub local_hp: Hyperparams,
    /// Used for every pooled model (global and per cluster).
    pub global_hp: Hyperparams,
    pub seed: u64,
}

impl TrainSettings {
    pub fn new(spec: FeatureSpec, kind: ModelKind, seed: u64) -> Self {
        Self {
            spec,
            kind,
            local_hp: Hyperparams::local_default(),
            global_hp: Hyperparams::global_default(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterVariant {
    ModelBased,
    Instance,
    WeightedInstance,
}

impl fmt::Display for ClusterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterVariant::ModelBased => "model-based",
            ClusterVariant::Instance => "instance",
            ClusterVariant::WeightedInstance => "weighted-instance",
        })
    }
}

impl FromStr for ClusterVariant {
    type Err = ParadigmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "model-based" | "model" => Ok(ClusterVariant::ModelBased),
            "instance" => Ok(ClusterVariant::Instance),
            "weighted-instance" | "weighted" => Ok(ClusterVariant::WeightedInstance),
            _ => Err(ParadigmError::Invalid(format!("unknown cluster variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalEnsemble {
    pub spec: FeatureSpec,
    pub kind: ModelKind,
    pub models: BTreeMap<String, FittedModel>,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub spec: FeatureSpec,
    pub model: FittedModel,
    pub normalizer: Normalizer,
    /// Rows in the pooled training set.
    pub n_rows: usize,
    /// Rows contributed by each series.
    pub series_rows: BTreeMap<String, usize>,
    pub local_hp: Hyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "lowercase")]
pub enum Routing {
    Series(SeriesClusters),
    Instance(InstanceClusters),
}

/// Integer-keyed maps as `[key, value]` lists; tagged enums cannot carry
/// non-string map keys through JSON.
mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<V: Serialize, S: Serializer>(m: &BTreeMap<usize, V>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, V: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, V>, D::Error> {
        Ok(Vec::<(usize, V)>::deserialize(d)?.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterwiseModel {
    pub spec: FeatureSpec,
    pub kind: ModelKind,
    pub variant: ClusterVariant,
    pub k: usize,
    pub routing: Routing,
    /// Fitted models by surviving cluster id.
    #[serde(with = "pairs")]
    pub models: BTreeMap<usize, FittedModel>,
    /// Clustering output id → id of the model that serves it.
    #[serde(with = "pairs")]
    pub cluster_map: BTreeMap<usize, usize>,
    /// Training rows per surviving cluster.
    #[serde(with = "pairs")]
    pub cluster_rows: BTreeMap<usize, usize>,
    pub normalizer: Normalizer,
    pub local_hp: Hyperparams,
    pub seed: u64,
}

impl ClusterwiseModel {
    /// Serving cluster of a training series (model-based variant only).
    pub fn series_cluster(&self, id: &str) -> Option<usize> {
        match &self.routing {
            Routing::Series(c) => c.assignment.get(id).map(|raw| self.cluster_map[raw]),
            Routing::Instance(_) => None,
        }
    }

    /// Serving cluster of one feature row.
    pub fn route_row(&self, x: ArrayView1<'_, f64>) -> Result<usize> {
        match &self.routing {
            Routing::Instance(c) => Ok(self.cluster_map[&c.route(x)?]),
            Routing::Series(_) => Err(ParadigmError::Invalid("model-based clusters route whole series".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "paradigm", rename_all = "lowercase")]
pub enum Paradigm {
    Local(LocalEnsemble),
    Global(GlobalModel),
    Clusterwise(ClusterwiseModel),
}

impl Paradigm {
    pub fn name(&self) -> &'static str {
        match self {
            Paradigm::Local(_) => "local",
            Paradigm::Global(_) => "global",
            Paradigm::Clusterwise(_) => "clusterwise",
        }
    }

    pub fn spec(&self) -> &FeatureSpec {
        match self {
            Paradigm::Local(m) => &m.spec,
            Paradigm::Global(m) => &m.spec,
            Paradigm::Clusterwise(m) => &m.spec,
        }
    }

    pub fn normalizer(&self) -> &Normalizer {
        match self {
            Paradigm::Local(m) => &m.normalizer,
            Paradigm::Global(m) => &m.normalizer,
            Paradigm::Clusterwise(m) => &m.normalizer,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Paradigm::Local(m) => m.kind,
            Paradigm::Global(m) => m.model.kind(),
            Paradigm::Clusterwise(m) => m.kind,
        }
    }

    pub fn n_models(&self) -> usize {
        match self {
            Paradigm::Local(m) => m.models.len(),
            Paradigm::Global(_) => 1,
            Paradigm::Clusterwise(m) => m.models.len(),
        }
    }

    pub fn variant(&self) -> Option<ClusterVariant> {
        match self {
            Paradigm::Clusterwise(m) => Some(m.variant),
            _ => None,
        }
    }

    pub fn k(&self) -> Option<usize> {
        match self {
            Paradigm::Clusterwise(m) => Some(m.k),
            _ => None,
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Paradigm::Clusterwise(m) => Some(m.seed),
            _ => None,
        }
    }
}

/// Normalizer fitted on `train` and the normalized collection.
fn normalize(train: &SeriesCollection) -> Result<(Normalizer, SeriesCollection)> {
    let normalizer = Normalizer::fit(train)?;
    let normalized = normalizer.apply(train)?;
    Ok((normalizer, normalized))
}

/// Per-series samples in id order.
fn series_samples(c: &SeriesCollection, spec: &FeatureSpec) -> Result<Vec<(String, SampleSet)>> {
    let ids: Vec<String> = c.ids().map(str::to_string).collect();
    ids.into_par_iter()
        .map(|id| {
            let s = build_samples(c, &id, spec).map_err(feature_err(&id))?;
            Ok((id, s))
        })
        .collect()
}

fn pool(sets: &[(String, SampleSet)]) -> Result<SampleSet> {
    SampleSet::pool(sets.iter().map(|(_, s)| s)).map_err(feature_err("<pool>"))
}

/// Rows a learner needs to fit at all.
fn min_rows(kind: ModelKind, hp: &Hyperparams) -> usize {
    match kind {
        ModelKind::Ridge => 1,
        ModelKind::Gbdt => 2 * hp.min_samples_leaf,
    }
}

pub fn train_local(train: &SeriesCollection, settings: &TrainSettings) -> Result<LocalEnsemble> {
    let (normalizer, normalized) = normalize(train)?;
    let locals = fit_local_models(
        &normalized,
        &settings.spec,
        settings.kind,
        &settings.local_hp,
        settings.seed,
    )
    .map_err(|e| match e {
        ClusterError::Featurize { id, source } => ParadigmError::Feature { id, source },
        ClusterError::LocalFit { id, source } => ParadigmError::Model {
            scope: format!("local model `{id}`"),
            source,
        },
        other => ParadigmError::Cluster(other),
    })?;
    let models: BTreeMap<String, FittedModel> = locals.into_iter().collect();
    assert_eq!(models.len(), train.len(), "one local model per series");
    Ok(LocalEnsemble {
        spec: settings.spec.clone(),
        kind: settings.kind,
        models,
        normalizer,
    })
}

pub fn train_global(train: &SeriesCollection, settings: &TrainSettings) -> Result<GlobalModel> {
    let (normalizer, normalized) = normalize(train)?;
    let per_series = series_samples(&normalized, &settings.spec)?;
    let pooled = pool(&per_series)?;
    let series_rows: BTreeMap<String, usize> = per_series.iter().map(|(id, s)| (id.clone(), s.n_rows())).collect();
    assert_eq!(pooled.n_rows(), series_rows.values().sum::<usize>());
    let model = models::fit(settings.kind, &pooled, &settings.global_hp, settings.seed)
        .map_err(model_err("global model".into()))?;
    Ok(GlobalModel {
        spec: settings.spec.clone(),
        model,
        normalizer,
        n_rows: pooled.n_rows(),
        series_rows,
        local_hp: settings.local_hp,
    })
}

/// Merge clusters below `need` rows into their nearest surviving neighbour.
/// Returns the raw → serving map; `dist(a, b)` compares clusters.
fn merge_small_clusters(rows: &[usize], need: usize, dist: impl Fn(usize, usize) -> f64) -> Result<BTreeMap<usize, usize>> {
    let k = rows.len();
    let survivors: Vec<usize> = (0..k).filter(|&j| rows[j] >= need).collect();
    if survivors.is_empty() {
        let total: usize = rows.iter().sum();
        if total < need {
            return Err(ParadigmError::Invalid(format!(
                "{total} training rows in all clusters; the learner needs {need}"
            )));
        }
        log::warn!("no cluster reaches {need} rows; merging all into cluster 0");
        return Ok((0..k).map(|j| (j, 0)).collect());
    }
    let mut map = BTreeMap::new();
    for j in 0..k {
        if rows[j] >= need {
            map.insert(j, j);
            continue;
        }
        let mut best = (survivors[0], f64::INFINITY);
        for &s in &survivors {
            let d = dist(j, s);
            if d < best.1 {
                best = (s, d);
            }
        }
        log::warn!("cluster {j} has {} rows (< {need}); merged into cluster {}", rows[j], best.0);
        map.insert(j, best.0);
    }
    Ok(map)
}

fn fit_clusters(
    groups: BTreeMap<usize, SampleSet>,
    settings: &TrainSettings,
) -> Result<(BTreeMap<usize, FittedModel>, BTreeMap<usize, usize>)> {
    let rows = groups.iter().map(|(&c, s)| (c, s.n_rows())).collect();
    let fitted: Vec<(usize, FittedModel)> = groups
        .into_par_iter()
        .map(|(c, data)| {
            let m = models::fit(settings.kind, &data, &settings.global_hp, settings.seed)
                .map_err(model_err(format!("cluster {c} model")))?;
            Ok((c, m))
        })
        .collect::<Result<_>>()?;
    Ok((fitted.into_iter().collect(), rows))
}

pub fn train_clusterwise(
    train: &SeriesCollection,
    settings: &TrainSettings,
    variant: ClusterVariant,
    k: usize,
) -> Result<ClusterwiseModel> {
    let (normalizer, normalized) = normalize(train)?;
    let need = min_rows(settings.kind, &settings.global_hp);
    let per_series = series_samples(&normalized, &settings.spec)?;
    let (routing, cluster_map, groups) = match variant {
        ClusterVariant::ModelBased => {
            let n = per_series.len();
            if k == 0 || k > n {
                return Err(ClusterError::InvalidK { k, n }.into());
            }
            let locals: Vec<(String, FittedModel)> = per_series
                .par_iter()
                .map(|(id, s)| {
                    let m = models::fit(settings.kind, s, &settings.local_hp, settings.seed)
                        .map_err(model_err(format!("local model `{id}`")))?;
                    Ok((id.clone(), m))
                })
                .collect::<Result<_>>()?;
            let theta = coefficient_matrix(&locals);
            let ids = locals.into_iter().map(|(id, _)| id).collect();
            let clusters = cluster_coefficients(ids, theta, k, settings.seed)?;
            let mut rows = vec![0; k];
            for (id, s) in &per_series {
                rows[clusters.assignment[id]] += s.n_rows();
            }
            let ones = vec![1.0; clusters.centroids.ncols()];
            let map = merge_small_clusters(&rows, need, |a, b| {
                weighted_sq_distance(clusters.centroids.row(a), clusters.centroids.row(b), &ones)
            })?;
            let mut members: BTreeMap<usize, Vec<&SampleSet>> = BTreeMap::new();
            for (id, s) in &per_series {
                members.entry(map[&clusters.assignment[id]]).or_default().push(s);
            }
            let groups = members
                .into_iter()
                .map(|(c, sets)| Ok((c, SampleSet::pool(sets).map_err(feature_err("<pool>"))?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            (Routing::Series(clusters), map, groups)
        }
        ClusterVariant::Instance | ClusterVariant::WeightedInstance => {
            let pooled = pool(&per_series)?;
            let weights = if variant == ClusterVariant::Instance {
                vec![1.0; pooled.n_features()]
            } else {
                let global = models::fit(settings.kind, &pooled, &settings.global_hp, settings.seed)
                    .map_err(model_err("global model for importances".into()))?;
                global.importance_vector().to_vec()
            };
            let clusters = clustering::instance_tsc(&pooled, &weights, k, settings.seed)?;
            let mut indices: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (i, &c) in clusters.assignment.iter().enumerate() {
                indices[c].push(i);
            }
            let rows: Vec<usize> = indices.iter().map(Vec::len).collect();
            let map = merge_small_clusters(&rows, need, |a, b| {
                weighted_sq_distance(clusters.centroids.row(a), clusters.centroids.row(b), &clusters.weights)
            })?;
            let mut merged: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &c) in clusters.assignment.iter().enumerate() {
                merged.entry(map[&c]).or_default().push(i);
            }
            let groups = merged.into_iter().map(|(c, idx)| (c, pooled.select(&idx))).collect();
            (Routing::Instance(clusters), map, groups)
        }
    };
    let (models, cluster_rows) = fit_clusters(groups, settings)?;
    debug_assert!(models.len() <= k);
    Ok(ClusterwiseModel {
        spec: settings.spec.clone(),
        kind: settings.kind,
        variant,
        k,
        routing,
        models,
        cluster_map,
        cluster_rows,
        normalizer,
        local_hp: settings.local_hp,
        seed: settings.seed,
    })
}

/// K with the best silhouette among `candidates`, on the points the variant
/// clusters (standardized local coefficients, or pooled rows).
pub fn choose_k(
    train: &SeriesCollection,
    settings: &TrainSettings,
    variant: ClusterVariant,
    candidates: impl IntoIterator<Item = usize>,
) -> Result<(usize, Vec<(usize, f64)>)> {
    let (_, normalized) = normalize(train)?;
    let per_series = series_samples(&normalized, &settings.spec)?;
    let (points, weights) = match variant {
        ClusterVariant::ModelBased => {
            let locals: Vec<(String, FittedModel)> = per_series
                .par_iter()
                .map(|(id, s)| {
                    let m = models::fit(settings.kind, s, &settings.local_hp, settings.seed)
                        .map_err(model_err(format!("local model `{id}`")))?;
                    Ok((id.clone(), m))
                })
                .collect::<Result<_>>()?;
            let (z, _, _) = clustering::standardize_columns(&coefficient_matrix(&locals));
            let p = z.ncols();
            (z, vec![1.0; p])
        }
        ClusterVariant::Instance | ClusterVariant::WeightedInstance => {
            let pooled = pool(&per_series)?;
            let w = if variant == ClusterVariant::Instance {
                vec![1.0; pooled.n_features()]
            } else {
                let global = models::fit(settings.kind, &pooled, &settings.global_hp, settings.seed)
                    .map_err(model_err("global model for importances".into()))?;
                clustering::importance_weights(global.importance_vector())?
            };
            (pooled.x, w)
        }
    };
    Ok(clustering::select_k(points.view(), &weights, settings.seed, candidates)?)
}

/// Train whichever paradigm `name` selects (`local`, `global`, `clusterwise`).
pub fn train(
    name: &str,
    train: &SeriesCollection,
    settings: &TrainSettings,
    variant: ClusterVariant,
    k: usize,
) -> Result<Paradigm> {
    match name {
        "local" => train_local(train, settings).map(Paradigm::Local),
        "global" => train_global(train, settings).map(Paradigm::Global),
        "clusterwise" | "cluster-wise" | "cluster" => {
            train_clusterwise(train, settings, variant, k).map(Paradigm::Clusterwise)
        }
        other => Err(ParadigmError::Invalid(format!("unknown paradigm `{other}`"))),
    }
}

/// One-hour-ahead predictions for one series, aligned to target hours.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub series_id: String,
    /// Timestamp of the first target.
    pub start: DateTime<Utc>,
    pub predicted_norm: Vec<f64>,
    pub predicted: Vec<f64>,
    pub actual_norm: Vec<f64>,
    pub actual: Vec<f64>,
}

impl Forecast {
    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }
}

/// Predict every row with the model(s) the paradigm assigns to it.
fn predict_rows(model: &Paradigm, id: &str, samples: &SampleSet, theta_route: Option<usize>) -> Result<Vec<f64>> {
    let predict = |m: &FittedModel, x: ndarray::ArrayView2<'_, f64>| -> Result<Vec<f64>> {
        Ok(m.predict(x).map_err(model_err(format!("predicting `{id}`")))?.to_vec())
    };
    match model {
        Paradigm::Local(l) => {
            let m = l.models.get(id).ok_or_else(|| ParadigmError::UnknownSeries(id.to_string()))?;
            predict(m, samples.x.view())
        }
        Paradigm::Global(g) => predict(&g.model, samples.x.view()),
        Paradigm::Clusterwise(c) => match &c.routing {
            Routing::Series(_) => {
                let cluster = match theta_route {
                    Some(cl) => cl,
                    None => c.series_cluster(id).ok_or_else(|| ParadigmError::UnknownSeries(id.to_string()))?,
                };
                predict(&c.models[&cluster], samples.x.view())
            }
            Routing::Instance(_) => {
                let routes: Vec<usize> = (0..samples.n_rows())
                    .map(|i| c.route_row(samples.row(i)))
                    .collect::<Result<_>>()?;
                let mut out = vec![0.0; samples.n_rows()];
                let mut by_cluster: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (i, &r) in routes.iter().enumerate() {
                    by_cluster.entry(r).or_default().push(i);
                }
                for (cl, idx) in by_cluster {
                    let x = samples.x.select(ndarray::Axis(0), &idx);
                    let p = predict(&c.models[&cl], x.view())?;
                    for (i, v) in idx.into_iter().zip(p) {
                        out[i] = v;
                    }
                }
                Ok(out)
            }
        },
    }
}

/// Forecast every target hour `τ ∈ [window, len)` of series `id` in `eval`.
pub fn forecast_series(model: &Paradigm, id: &str, eval: &SeriesCollection) -> Result<Forecast> {
    let normalizer = model.normalizer();
    if !normalizer.series.contains_key(id) {
        return Err(ParadigmError::UnknownSeries(id.to_string()));
    }
    let one = eval.subset([id])?;
    let normalized = normalizer.apply(&one)?;
    let samples = build_samples(&normalized, id, model.spec()).map_err(feature_err(id))?;
    let predicted_norm = predict_rows(model, id, &samples, None)?;
    let predicted = normalizer.invert_series(id, &predicted_norm)?;
    let w = model.spec().window;
    Ok(Forecast {
        series_id: id.to_string(),
        start: eval.timestamp(w),
        actual_norm: samples.y.to_vec(),
        actual: one.get(id).expect("subset keeps id")[w..].to_vec(),
        predicted_norm,
        predicted,
    })
}

/// Forecasts for every series of `eval`, in id order.
pub fn forecast_all(model: &Paradigm, eval: &SeriesCollection) -> Result<Vec<Forecast>> {
    let ids: Vec<String> = eval.ids().map(str::to_string).collect();
    ids.par_iter().map(|id| forecast_series(model, id, eval)).collect()
}

/// Recursive multi-step forecast: predicts hours `origin..origin + steps` of
/// series `id`, feeding each prediction back as the next step's history.
/// Exogenous channels are taken as known.
pub fn forecast_recursive(
    model: &Paradigm,
    id: &str,
    collection: &SeriesCollection,
    origin: usize,
    steps: usize,
) -> Result<Vec<f64>> {
    let normalizer = model.normalizer();
    let spec = model.spec();
    let one = normalizer.apply(&collection.subset([id])?)?;
    let values = one.get(id).expect("subset keeps id");
    if origin <= spec.window || origin > values.len() {
        return Err(ParadigmError::Invalid(format!(
            "origin {origin} must lie in ({}, {}]",
            spec.window,
            values.len()
        )));
    }
    let mut history = values[..origin].to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        history.push(0.0);
        let samples = build_series_samples(id, &history, one.start(), one.exogenous(), spec).map_err(feature_err(id))?;
        let last = samples.select(&[samples.n_rows() - 1]);
        let p = predict_rows(model, id, &last, None)?[0];
        *history.last_mut().expect("pushed") = p;
        out.push(p);
    }
    Ok(normalizer.invert_series(id, &out)?)
}

/// Result of applying a pooled model to a series it never saw.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotForecast {
    pub start: DateTime<Utc>,
    pub predicted: Vec<f64>,
    pub actual: Vec<f64>,
    /// Min-max statistics of the series' own history.
    pub scaler: MinMax,
    /// Serving cluster for model-based routing.
    pub cluster: Option<usize>,
}

/// Forecast hours `history..len` of an unseen series.
///
/// The series is scaled with min-max statistics of `values[..history]`;
/// exogenous channels reuse the model's channel statistics. Model-based
/// cluster-wise models route the series by fitting a local model on its
/// history and picking the nearest coefficient centroid.
pub fn zero_shot_forecast(
    model: &Paradigm,
    id: &str,
    values: &[f64],
    start: DateTime<Utc>,
    exogenous: &BTreeMap<String, Vec<f64>>,
    history: usize,
) -> Result<ZeroShotForecast> {
    let spec = model.spec();
    let (normalizer, local_hp) = match model {
        Paradigm::Global(g) => (&g.normalizer, &g.local_hp),
        Paradigm::Clusterwise(c) => (&c.normalizer, &c.local_hp),
        Paradigm::Local(_) => {
            return Err(ParadigmError::Invalid(
                "zero-shot forecasting needs a global or cluster-wise model".into(),
            ))
        }
    };
    if history <= spec.window + 1 || history > values.len() {
        return Err(ParadigmError::InsufficientHistory {
            got: history.min(values.len()),
            need: spec.window + 1,
        });
    }
    if history == values.len() {
        return Err(ParadigmError::Invalid("no hours left to forecast after the history".into()));
    }
    let scaler = MinMax::fit(&values[..history]).ok_or_else(|| SeriesError::ConstantSeries(id.to_string()))?;
    let scaled: Vec<f64> = values.iter().map(|&v| scaler.apply(v)).collect();
    let channels = exogenous
        .iter()
        .map(|(name, v)| {
            let mm = normalizer
                .channels
                .get(name)
                .ok_or_else(|| SeriesError::Unfitted(name.clone()))?;
            Ok((name.clone(), v.iter().map(|&x| mm.apply(x)).collect()))
        })
        .collect::<Result<BTreeMap<String, Vec<f64>>>>()?;

    let cluster = match model {
        Paradigm::Clusterwise(c) => match &c.routing {
            Routing::Series(sc) => {
                let hist = build_series_samples(id, &scaled[..history], start, &channels, spec).map_err(feature_err(id))?;
                let local = models::fit(c.kind, &hist, local_hp, c.seed)
                    .map_err(model_err(format!("zero-shot local model `{id}`")))?;
                Some(c.cluster_map[&sc.route(local.importance_vector())?])
            }
            Routing::Instance(_) => None,
        },
        _ => None,
    };

    let samples = build_series_samples(id, &scaled, start, &channels, spec).map_err(feature_err(id))?;
    let skip = history - spec.window;
    let tail: Vec<usize> = (skip..samples.n_rows()).collect();
    let samples = samples.select(&tail);
    let predicted_norm = predict_rows(model, id, &samples, cluster)?;
    Ok(ZeroShotForecast {
        start: start + chrono::Duration::hours(history as i64),
        predicted: predicted_norm.iter().map(|&v| scaler.invert(v)).collect(),
        actual: values[history..].to_vec(),
        scaler,
        cluster,
    })
}

const BUNDLE_FORMAT: &str = "clustcast-paradigm";
const BUNDLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BundleFile {
    format: String,
    version: u32,
    spec_hash: String,
    paradigm: Paradigm,
}

/// Write `model` to a bundle directory: `manifest.txt`, `model.json`,
/// `clusters.csv` and `normalizers.csv`.
pub fn save_bundle(model: &Paradigm, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let spec_hash = model.spec().spec_hash();
    let mut manifest = format!(
        "format={BUNDLE_FORMAT}\nversion={BUNDLE_VERSION}\nparadigm={}\nkind={}\nspec_hash={spec_hash}\nmodels={}\n",
        model.name(),
        model.kind(),
        model.n_models()
    );
    if let Paradigm::Clusterwise(c) = model {
        manifest.push_str(&format!("variant={}\nk={}\nseed={}\n", c.variant, c.k, c.seed));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    let file = BundleFile {
        format: BUNDLE_FORMAT.into(),
        version: BUNDLE_VERSION,
        spec_hash,
        paradigm: model.clone(),
    };
    fs::write(dir.join("model.json"), serde_json::to_string(&file)?)?;

    let mut w = csv::Writer::from_path(dir.join("clusters.csv"))?;
    match model {
        Paradigm::Clusterwise(c) => match &c.routing {
            Routing::Series(sc) => {
                w.write_record(["series_id", "cluster"])?;
                for id in &sc.series_ids {
                    w.write_record([id.as_str(), &c.series_cluster(id).expect("training series").to_string()])?;
                }
            }
            Routing::Instance(ic) => {
                w.write_record(["row_index", "cluster"])?;
                for (i, raw) in ic.assignment.iter().enumerate() {
                    w.write_record([i.to_string(), c.cluster_map[raw].to_string()])?;
                }
            }
        },
        _ => {
            w.write_record(["series_id", "cluster"])?;
            for id in model.normalizer().series.keys() {
                let cluster = if let Paradigm::Local(_) = model { id.as_str() } else { "0" };
                w.write_record([id.as_str(), cluster])?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("normalizers.csv"))?;
    w.write_record(["scope", "name", "min", "max"])?;
    let n = model.normalizer();
    for (scope, stats) in [("series", &n.series), ("channel", &n.channels)] {
        for (name, mm) in stats {
            w.write_record([scope, name.as_str(), &mm.min.to_string(), &mm.max.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<Paradigm> {
    let raw = fs::read_to_string(dir.join("model.json"))?;
    let file: BundleFile = serde_json::from_str(&raw)?;
    if file.format != BUNDLE_FORMAT || file.version != BUNDLE_VERSION {
        return Err(ParadigmError::Bundle(format!(
            "unsupported bundle {} v{}",
            file.format, file.version
        )));
    }
    if file.paradigm.spec().spec_hash() != file.spec_hash {
        return Err(ParadigmError::Bundle("feature spec hash mismatch".into()));
    }
    Ok(file.paradigm)
}

/// Ids of training series with their serving cluster (model-based only).
pub fn series_assignment(model: &ClusterwiseModel) -> BTreeMap<String, usize> {
    match &model.routing {
        Routing::Series(sc) => sc
            .series_ids
            .iter()
            .map(|id| (id.clone(), model.cluster_map[&sc.assignment[id]]))
            .collect(),
        Routing::Instance(_) => BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_collection, SynthConfig};

    fn small_settings(kind: ModelKind) -> TrainSettings {
        let mut s = TrainSettings::new(FeatureSpec::default(), kind, 7);
        s.local_hp.n_estimators = 10;
        s.global_hp.n_estimators = 10;
        s
    }

    fn data(count: usize, hours: usize) -> SeriesCollection {
        generate_collection(&SynthConfig::two_archetype(count, hours, 11)).unwrap().collection
    }

    fn rows_of(c: &SeriesCollection, w: usize) -> usize {
        c.ids().map(|id| c.get(id).unwrap().len() - w).sum()
    }

    #[test]
    fn local_matches_standalone_fit_and_is_independent() {
        let c = data(2, 24 * 28);
        let s = small_settings(ModelKind::Ridge);
        let local = train_local(&c, &s).unwrap();
        assert_eq!(local.models.len(), 4);
        let id = "industrial_00";
        let single = c.subset([id]).unwrap();
        let alone = train_local(&single, &s).unwrap();
        assert_eq!(alone.models[id], local.models[id]);
        let ids: Vec<&str> = c.ids().filter(|i| *i != "residential_01").collect();
        let fewer = train_local(&c.subset(ids).unwrap(), &s).unwrap();
        let a = forecast_series(&Paradigm::Local(local), id, &c).unwrap();
        let b = forecast_series(&Paradigm::Local(fewer), id, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn global_pools_every_row() {
        let c = data(2, 24 * 28);
        let s = small_settings(ModelKind::Gbdt);
        let g = train_global(&c, &s).unwrap();
        assert_eq!(g.n_rows, rows_of(&c, s.spec.window));
        assert_eq!(Paradigm::Global(g).n_models(), 1);
    }

    #[test]
    fn single_cluster_reproduces_global() {
        let c = data(2, 24 * 28);
        for kind in [ModelKind::Ridge, ModelKind::Gbdt] {
            let s = small_settings(kind);
            let global = Paradigm::Global(train_global(&c, &s).unwrap());
            for variant in [ClusterVariant::ModelBased, ClusterVariant::Instance, ClusterVariant::WeightedInstance] {
                let cw = Paradigm::Clusterwise(train_clusterwise(&c, &s, variant, 1).unwrap());
                assert_eq!(cw.n_models(), 1);
                for id in c.ids() {
                    let a = forecast_series(&global, id, &c).unwrap();
                    let b = forecast_series(&cw, id, &c).unwrap();
                    for (x, y) in a.predicted_norm.iter().zip(&b.predicted_norm) {
                        assert!((x - y).abs() <= 1e-12, "{kind} {variant}: {x} vs {y}");
                    }
                }
            }
        }
    }

    #[test]
    fn clusterwise_model_counts() {
        let c = data(3, 24 * 28);
        let s = small_settings(ModelKind::Ridge);
        let mb = train_clusterwise(&c, &s, ClusterVariant::ModelBased, 2).unwrap();
        assert_eq!(mb.models.len(), 2);
        assert_eq!(series_assignment(&mb).len(), 6);
        let wi = train_clusterwise(&c, &s, ClusterVariant::WeightedInstance, 3).unwrap();
        assert_eq!(wi.models.len(), 3);
        assert_eq!(wi.cluster_rows.values().sum::<usize>(), rows_of(&c, s.spec.window));
    }

    #[test]
    fn opposite_ar_signs_form_two_clusters() {
        use crate::clustering::adjusted_rand_index;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        use rand_distr::{Distribution, StandardNormal};

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut series = BTreeMap::new();
        let mut truth = Vec::new();
        for (group, phi) in [(0, 0.8), (1, -0.8)] {
            for i in 0..10 {
                let mut v = vec![10.0];
                for _ in 1..24 * 30 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    v.push(10.0 + phi * (v.last().unwrap() - 10.0) + e);
                }
                series.insert(format!("g{group}_{i:02}"), v);
                truth.push(group);
            }
        }
        let c = SeriesCollection::new(crate::synthgen::default_start(), series, BTreeMap::new(), BTreeMap::new()).unwrap();
        let s = TrainSettings::new(FeatureSpec::load_only(), ModelKind::Ridge, 5);
        let cw = train_clusterwise(&c, &s, ClusterVariant::ModelBased, 2).unwrap();
        let got: Vec<usize> = series_assignment(&cw).values().copied().collect();
        assert_eq!(adjusted_rand_index(&truth, &got), 1.0);
    }

    #[test]
    fn tiny_clusters_are_merged() {
        let rows = [50, 3, 40];
        let map = merge_small_clusters(&rows, 10, |a, b| (a as f64 - b as f64).abs() + if b == 2 { 0.0 } else { 0.5 }).unwrap();
        assert_eq!(map[&1], 2);
        assert_eq!(map[&0], 0);
        assert!(merge_small_clusters(&[1, 2], 10, |_, _| 0.0).is_err());
    }

    #[test]
    fn eval_window_gives_length_minus_window_predictions() {
        let c = data(1, 24 * 35);
        let s = small_settings(ModelKind::Ridge);
        let train = c.window(0, 24 * 28 - 1).unwrap();
        let g = Paradigm::Global(train_global(&train, &s).unwrap());
        let eval = c.window(24 * 21, 24 * 35 - 1).unwrap();
        let f = forecast_series(&g, "industrial_00", &eval).unwrap();
        assert_eq!(f.len(), 24 * 14 - 168);
        assert_eq!(f.start, eval.timestamp(168));
        assert_eq!(f, forecast_series(&g, "industrial_00", &eval).unwrap());
        assert!(matches!(forecast_series(&g, "nope", &eval), Err(ParadigmError::UnknownSeries(_))));
    }

    #[test]
    fn zero_shot_on_a_training_series_matches_forecast() {
        let full = data(2, 24 * 35);
        let history = 24 * 28;
        let train = full.window(0, history - 1).unwrap();
        let s = small_settings(ModelKind::Ridge);
        let id = "residential_01";
        let values = full.get(id).unwrap();
        for model in [
            Paradigm::Global(train_global(&train, &s).unwrap()),
            Paradigm::Clusterwise(train_clusterwise(&train, &s, ClusterVariant::ModelBased, 2).unwrap()),
            Paradigm::Clusterwise(train_clusterwise(&train, &s, ClusterVariant::WeightedInstance, 2).unwrap()),
        ] {
            let z = zero_shot_forecast(&model, id, values, full.start(), full.exogenous(), history).unwrap();
            let f = forecast_series(&model, id, &full).unwrap();
            let offset = history - s.spec.window;
            assert_eq!(z.predicted, f.predicted[offset..].to_vec());
            assert_eq!(z.start, full.timestamp(history));
            if let Paradigm::Clusterwise(c) = &model {
                if c.variant == ClusterVariant::ModelBased {
                    assert_eq!(z.cluster, c.series_cluster(id));
                }
            }
        }
    }

    #[test]
    fn zero_shot_needs_history() {
        let c = data(1, 24 * 28);
        let s = small_settings(ModelKind::Ridge);
        let g = Paradigm::Global(train_global(&c, &s).unwrap());
        let v = c.get("industrial_00").unwrap();
        assert!(matches!(
            zero_shot_forecast(&g, "x", v, c.start(), c.exogenous(), 100),
            Err(ParadigmError::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn recursive_first_step_matches_one_step() {
        let c = data(1, 24 * 28);
        let s = small_settings(ModelKind::Ridge);
        let g = Paradigm::Global(train_global(&c, &s).unwrap());
        let id = "residential_00";
        let one = forecast_series(&g, id, &c).unwrap();
        let origin = 400;
        let rec = forecast_recursive(&g, id, &c, origin, 5).unwrap();
        assert_eq!(rec.len(), 5);
        assert!((rec[0] - one.predicted[origin - 168]).abs() < 1e-9);
    }

    #[test]
    fn bundle_round_trip() {
        let c = data(2, 24 * 28);
        let s = small_settings(ModelKind::Gbdt);
        let dir = tempfile::tempdir().unwrap();
        for (i, model) in [
            Paradigm::Local(train_local(&c, &s).unwrap()),
            Paradigm::Clusterwise(train_clusterwise(&c, &s, ClusterVariant::ModelBased, 2).unwrap()),
            Paradigm::Clusterwise(train_clusterwise(&c, &s, ClusterVariant::Instance, 2).unwrap()),
        ]
        .into_iter()
        .enumerate()
        {
            let path = dir.path().join(i.to_string());
            save_bundle(&model, &path).unwrap();
            let back = load_bundle(&path).unwrap();
            assert_eq!(back, model);
            let manifest = fs::read_to_string(path.join("manifest.txt")).unwrap();
            assert!(manifest.contains(&format!("spec_hash={}", model.spec().spec_hash())));
            assert!(path.join("clusters.csv").exists() && path.join("normalizers.csv").exists());
        }
    }

    #[test]
    fn choose_k_returns_the_best_scored_candidate() {
        let c = data(4, 24 * 28);
        let s = small_settings(ModelKind::Ridge);
        for variant in [ClusterVariant::ModelBased, ClusterVariant::WeightedInstance] {
            let (k, scores) = choose_k(&c, &s, variant, 2..=5).unwrap();
            assert_eq!(scores.iter().map(|p| p.0).collect::<Vec<_>>(), vec![2, 3, 4, 5]);
            let best = scores.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(scores.iter().find(|p| p.1 == best).unwrap().0, k);
        }
    }

    #[test]
    fn variant_parsing() {
        for v in [ClusterVariant::ModelBased, ClusterVariant::Instance, ClusterVariant::WeightedInstance] {
            assert_eq!(v.to_string().parse::<ClusterVariant>().unwrap(), v);
        }
        assert!("bogus".parse::<ClusterVariant>().is_err());
    }
}
