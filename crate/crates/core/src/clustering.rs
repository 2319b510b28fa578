//! Weighted k-means and the two time-series clustering schemes built on it.
//!
//! The metric throughout is `d(x, y)² = Σ_r w_r (x_r − y_r)²` with `w ≥ 0`.
//!
//! - [`model_based_tsc`] clusters whole series by the coefficient vectors of
//!   per-series models, after standardizing each coefficient column.
//! - [`weighted_instance_tsc`] clusters pooled sample rows, weighting each
//!   feature by the global model's normalized absolute importance.
//!
//! # Lloyd protocol
//!
//! Initialization is k-means++ under the weighted metric: the first center
//! is drawn uniformly, each following one with probability proportional to
//! its squared distance to the nearest chosen center (the lowest unchosen
//! index when all distances are zero). Every iteration then
//!
//! 1. moves each centroid to the mean of its members; an empty cluster is
//!    re-seeded at the point farthest from its own centroid, if that
//!    distance is positive, otherwise it keeps its previous centroid;
//! 2. assigns each point to its nearest centroid, ties to the lowest id;
//! 3. stops once no assignment changed.
//!
//! The same protocol drives [`kmeans_from_distance_matrix`], which only sees
//! pairwise squared distances and exists to verify the feature-space route.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurizer::{build_samples, FeatureError, FeatureSpec, SampleSet};
use crate::models::{self, FittedModel, Hyperparams, ModelError, ModelKind};
use crate::series_store::SeriesCollection;

/// Largest row count accepted by the explicit distance-matrix route.
pub const DISTANCE_MATRIX_MAX_ROWS: usize = 2000;

pub const DEFAULT_MAX_ITER: usize = 300;

/// Rows used for silhouette scoring when selecting K on large pools.
const SILHOUETTE_MAX_ROWS: usize = 2000;
/// k-means++ starts when clustering series coefficient vectors.
const SERIES_KMEANS_STARTS: u64 = 10;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("K = {k} is out of range for {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("weights must be finite and non-negative with a positive entry")]
    InvalidWeights,
    #[error("expected {expected} columns, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("points contain non-finite values")]
    NonFinite,
    #[error("distance-matrix route accepts at most {max} rows, got {rows}")]
    TooManyRows { rows: usize, max: usize },
    #[error("series `{id}`: {source}")]
    Featurize { id: String, source: FeatureError },
    #[error("local model for series `{id}`: {source}")]
    LocalFit { id: String, source: ModelError },
}

pub type Result<T, E = ClusterError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedKMeansResult {
    /// K × p centroids.
    pub centroids: Array2<f64>,
    pub assignment: Vec<usize>,
    pub weights: Vec<f64>,
    pub inertia: f64,
    /// Inertia after the initial assignment and after every iteration.
    pub inertia_trace: Vec<f64>,
    pub seed: u64,
    pub iterations: usize,
}

impl WeightedKMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }
}

pub fn weighted_sq_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, w: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .zip(w)
        .map(|((x, y), w)| w * (x - y) * (x - y))
        .sum()
}

/// Nearest centroid and its squared distance; ties go to the lowest id.
pub fn nearest_centroid(x: ArrayView1<'_, f64>, centroids: ArrayView2<'_, f64>, w: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = weighted_sq_distance(x, c, w);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn check_weights(w: &[f64], p: usize) -> Result<()> {
    if w.len() != p {
        return Err(ClusterError::ShapeMismatch {
            expected: p,
            got: w.len(),
        });
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) || !w.iter().any(|v| *v > 0.0) {
        return Err(ClusterError::InvalidWeights);
    }
    Ok(())
}

/// k-means++ seeding over an abstract squared distance between point indices.
fn kmeans_pp(m: usize, k: usize, seed: u64, d2: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..m)];
    let mut nearest: Vec<f64> = (0..m).map(|i| d2(i, chosen[0])).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut cum = 0.0;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                cum += d;
                if cum > u {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| nearest.iter().rposition(|&d| d > 0.0).expect("positive total"))
        } else {
            (0..m).find(|i| !chosen.contains(i)).expect("k <= m")
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(d2(i, next));
        }
    }
    chosen
}

/// Empty clusters and the points that re-seed them, farthest first.
fn reseed_targets(counts: &[usize], own_distance: &[f64]) -> Vec<(usize, usize)> {
    let mut used = Vec::new();
    let mut out = Vec::new();
    for (j, &n) in counts.iter().enumerate() {
        if n > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, &d) in own_distance.iter().enumerate() {
            if used.contains(&i) {
                continue;
            }
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, d)) = best {
            if d > 0.0 {
                used.push(i);
                out.push((j, i));
            }
        }
    }
    out
}

pub fn weighted_kmeans(
    points: ArrayView2<'_, f64>,
    k: usize,
    w: &[f64],
    seed: u64,
    max_iter: usize,
) -> Result<WeightedKMeansResult> {
    let (m, p) = points.dim();
    if k == 0 || k > m {
        return Err(ClusterError::InvalidK { k, n: m });
    }
    check_weights(w, p)?;
    if points.iter().any(|v| !v.is_finite()) {
        return Err(ClusterError::NonFinite);
    }
    let init = kmeans_pp(m, k, seed, |a, b| weighted_sq_distance(points.row(a), points.row(b), w));
    let mut centroids = Array2::zeros((k, p));
    for (j, &i) in init.iter().enumerate() {
        centroids.row_mut(j).assign(&points.row(i));
    }
    let assign = |centroids: &Array2<f64>| -> Vec<(usize, f64)> {
        (0..m)
            .into_par_iter()
            .with_min_len(1024)
            .map(|i| nearest_centroid(points.row(i), centroids.view(), w))
            .collect()
    };
    let mut current = assign(&centroids);
    let mut inertia_trace = vec![current.iter().map(|a| a.1).sum::<f64>()];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = Array2::<f64>::zeros((k, p));
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in current.iter().enumerate() {
            counts[c] += 1;
            sums.row_mut(c).scaled_add(1.0, &points.row(i));
        }
        for j in 0..k {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                centroids.row_mut(j).assign(&sums.row(j).mapv(|s| s / n));
            }
        }
        let own: Vec<f64> = current
            .iter()
            .enumerate()
            .map(|(i, &(c, _))| weighted_sq_distance(points.row(i), centroids.row(c), w))
            .collect();
        for (j, i) in reseed_targets(&counts, &own) {
            centroids.row_mut(j).assign(&points.row(i));
        }
        let next = assign(&centroids);
        let changed = next.iter().zip(&current).any(|(a, b)| a.0 != b.0);
        inertia_trace.push(next.iter().map(|a| a.1).sum::<f64>());
        current = next;
        if !changed {
            break;
        }
    }
    Ok(WeightedKMeansResult {
        centroids,
        assignment: current.iter().map(|a| a.0).collect(),
        weights: w.to_vec(),
        inertia: *inertia_trace.last().expect("non-empty trace"),
        inertia_trace,
        seed,
        iterations,
    })
}

/// Pairwise weighted squared distances; limited to small row counts.
pub fn weighted_distance_matrix(points: ArrayView2<'_, f64>, w: &[f64]) -> Result<Array2<f64>> {
    let (m, p) = points.dim();
    if m > DISTANCE_MATRIX_MAX_ROWS {
        return Err(ClusterError::TooManyRows {
            rows: m,
            max: DISTANCE_MATRIX_MAX_ROWS,
        });
    }
    check_weights(w, p)?;
    let mut d = Array2::zeros((m, m));
    for i in 0..m {
        for j in (i + 1)..m {
            let v = weighted_sq_distance(points.row(i), points.row(j), w);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(d)
}

/// Centroid of a cluster, represented by its members (a single point after re-seeding).
#[derive(Clone)]
struct MemberCentroid {
    members: Vec<usize>,
    /// `Σ_{j,l ∈ C} d²_jl / (2|C|²)`
    spread: f64,
}

impl MemberCentroid {
    fn new(members: Vec<usize>, d2: &Array2<f64>) -> Self {
        let n = members.len() as f64;
        let mut total = 0.0;
        for &a in &members {
            for &b in &members {
                total += d2[[a, b]];
            }
        }
        Self {
            spread: total / (2.0 * n * n),
            members,
        }
    }

    fn distance(&self, i: usize, d2: &Array2<f64>) -> f64 {
        let n = self.members.len() as f64;
        self.members.iter().map(|&j| d2[[i, j]]).sum::<f64>() / n - self.spread
    }
}

/// Lloyd iterations driven only by a squared-distance matrix, using
/// `‖x_i − μ_C‖² = (1/|C|) Σ_j d²_ij − (1/(2|C|²)) Σ_{j,l} d²_jl`.
/// Returns the assignment and iteration count.
pub fn kmeans_from_distance_matrix(d2: &Array2<f64>, k: usize, seed: u64, max_iter: usize) -> Result<(Vec<usize>, usize)> {
    let m = d2.nrows();
    if d2.ncols() != m {
        return Err(ClusterError::ShapeMismatch {
            expected: m,
            got: d2.ncols(),
        });
    }
    if k == 0 || k > m {
        return Err(ClusterError::InvalidK { k, n: m });
    }
    let init = kmeans_pp(m, k, seed, |a, b| d2[[a, b]]);
    let mut centroids: Vec<MemberCentroid> = init.iter().map(|&i| MemberCentroid::new(vec![i], d2)).collect();
    let assign = |centroids: &[MemberCentroid]| -> Vec<usize> {
        (0..m)
            .map(|i| {
                let mut best = (0, f64::INFINITY);
                for (j, c) in centroids.iter().enumerate() {
                    let d = c.distance(i, d2);
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best.0
            })
            .collect()
    };
    let mut current = assign(&centroids);
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut members = vec![Vec::new(); k];
        for (i, &c) in current.iter().enumerate() {
            members[c].push(i);
        }
        let counts: Vec<usize> = members.iter().map(Vec::len).collect();
        for (j, mem) in members.into_iter().enumerate() {
            if !mem.is_empty() {
                centroids[j] = MemberCentroid::new(mem, d2);
            }
        }
        let own: Vec<f64> = current.iter().enumerate().map(|(i, &c)| centroids[c].distance(i, d2)).collect();
        for (j, i) in reseed_targets(&counts, &own) {
            centroids[j] = MemberCentroid::new(vec![i], d2);
        }
        let next = assign(&centroids);
        let changed = next != current;
        current = next;
        if !changed {
            break;
        }
    }
    Ok((current, iterations))
}

/// Weighted k-means through the explicit distance matrix (verification mode).
pub fn weighted_kmeans_via_distance_matrix(
    points: ArrayView2<'_, f64>,
    k: usize,
    w: &[f64],
    seed: u64,
    max_iter: usize,
) -> Result<Vec<usize>> {
    let d2 = weighted_distance_matrix(points, w)?;
    kmeans_from_distance_matrix(&d2, k, seed, max_iter).map(|r| r.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesClusters {
    pub assignment: BTreeMap<String, usize>,
    pub series_ids: Vec<String>,
    /// n × p coefficient matrix, rows in `series_ids` order.
    pub coefficients: Array2<f64>,
    pub coef_means: Vec<f64>,
    pub coef_scales: Vec<f64>,
    /// Centroids in the standardized coefficient space.
    pub centroids: Array2<f64>,
    pub k: usize,
    pub seed: u64,
}

impl SeriesClusters {
    /// Cluster of an unseen coefficient vector.
    pub fn route(&self, theta: &[f64]) -> Result<usize> {
        let p = self.coef_means.len();
        if theta.len() != p {
            return Err(ClusterError::ShapeMismatch {
                expected: p,
                got: theta.len(),
            });
        }
        let z: ndarray::Array1<f64> = (0..p).map(|j| (theta[j] - self.coef_means[j]) / self.coef_scales[j]).collect();
        Ok(nearest_centroid(z.view(), self.centroids.view(), &vec![1.0; p]).0)
    }

    pub fn members(&self, cluster: usize) -> Vec<&str> {
        self.series_ids
            .iter()
            .filter(|id| self.assignment[*id] == cluster)
            .map(String::as_str)
            .collect()
    }
}

/// Column standardization; zero-variance columns keep scale 1.
pub fn standardize_columns(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let (n, p) = x.dim();
    let mut means = vec![0.0; p];
    let mut scales = vec![1.0; p];
    let mut z = x.clone();
    for j in 0..p {
        let mu = x.column(j).sum() / n as f64;
        let sd = (x.column(j).iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64).sqrt();
        means[j] = mu;
        if sd > 0.0 {
            scales[j] = sd;
        }
        z.column_mut(j).mapv_inplace(|v| (v - mu) / scales[j]);
    }
    (z, means, scales)
}

/// Seed of the `r`-th restart; restart 0 uses `seed` itself.
fn restart_seed(seed: u64, r: u64) -> u64 {
    seed.wrapping_add(r.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Cluster series from precomputed coefficient vectors (rows in `ids` order),
/// keeping the lowest-inertia of several k-means++ starts.
pub fn cluster_coefficients(ids: Vec<String>, coefficients: Array2<f64>, k: usize, seed: u64) -> Result<SeriesClusters> {
    let n = coefficients.nrows();
    if k == 0 || k > n {
        return Err(ClusterError::InvalidK { k, n });
    }
    let (z, coef_means, coef_scales) = standardize_columns(&coefficients);
    let w = vec![1.0; z.ncols()];
    let mut km = weighted_kmeans(z.view(), k, &w, seed, DEFAULT_MAX_ITER)?;
    for r in 1..SERIES_KMEANS_STARTS {
        let next = weighted_kmeans(z.view(), k, &w, restart_seed(seed, r), DEFAULT_MAX_ITER)?;
        if next.inertia < km.inertia {
            km = next;
        }
    }
    Ok(SeriesClusters {
        assignment: ids.iter().cloned().zip(km.assignment.iter().copied()).collect(),
        series_ids: ids,
        coefficients,
        coef_means,
        coef_scales,
        centroids: km.centroids,
        k,
        seed,
    })
}

/// Per-series local fits, in id order, fitted in parallel.
pub fn fit_local_models(
    train: &SeriesCollection,
    spec: &FeatureSpec,
    kind: ModelKind,
    hp: &Hyperparams,
    seed: u64,
) -> Result<Vec<(String, FittedModel)>> {
    let ids: Vec<String> = train.ids().map(str::to_string).collect();
    ids.into_par_iter()
        .map(|id| {
            let samples = build_samples(train, &id, spec).map_err(|source| ClusterError::Featurize {
                id: id.clone(),
                source,
            })?;
            let model = models::fit(kind, &samples, hp, seed).map_err(|source| ClusterError::LocalFit {
                id: id.clone(),
                source,
            })?;
            Ok((id, model))
        })
        .collect()
}

pub fn coefficient_matrix(locals: &[(String, FittedModel)]) -> Array2<f64> {
    let p = locals.first().map_or(0, |(_, m)| m.importance_vector().len());
    let mut out = Array2::zeros((locals.len(), p));
    for (i, (_, m)) in locals.iter().enumerate() {
        out.row_mut(i).assign(&ArrayView1::from(m.importance_vector()));
    }
    out
}

/// Model-based whole-series clustering on a (normalized) training collection.
pub fn model_based_tsc(
    train: &SeriesCollection,
    spec: &FeatureSpec,
    kind: ModelKind,
    hp: &Hyperparams,
    k: usize,
    seed: u64,
) -> Result<SeriesClusters> {
    let n = train.len();
    if k == 0 || k > n {
        return Err(ClusterError::InvalidK { k, n });
    }
    let locals = fit_local_models(train, spec, kind, hp, seed)?;
    let theta = coefficient_matrix(&locals);
    cluster_coefficients(locals.into_iter().map(|(id, _)| id).collect(), theta, k, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceClusters {
    pub assignment: Vec<usize>,
    /// K × p centroids in the original feature space.
    pub centroids: Array2<f64>,
    /// Non-negative, summing to 1.
    pub weights: Vec<f64>,
    pub feature_names: Vec<String>,
    pub k: usize,
    pub seed: u64,
}

impl InstanceClusters {
    pub fn route(&self, x: ArrayView1<'_, f64>) -> Result<usize> {
        route_instance(self, x)
    }
}

/// Nearest centroid under the stored weights, ties to the lowest id.
pub fn route_instance(clusters: &InstanceClusters, x: ArrayView1<'_, f64>) -> Result<usize> {
    if x.len() != clusters.weights.len() {
        return Err(ClusterError::ShapeMismatch {
            expected: clusters.weights.len(),
            got: x.len(),
        });
    }
    Ok(nearest_centroid(x, clusters.centroids.view(), &clusters.weights).0)
}

/// Absolute values scaled to sum 1.
pub fn importance_weights(importance: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = importance.iter().map(|v| v.abs()).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(ClusterError::InvalidWeights);
    }
    Ok(importance.iter().map(|v| v.abs() / total).collect())
}

/// Instance clustering of pooled rows with explicit weights (uniform for the unweighted variant).
pub fn instance_tsc(data: &SampleSet, weights: &[f64], k: usize, seed: u64) -> Result<InstanceClusters> {
    let w = importance_weights(weights)?;
    let km = weighted_kmeans(data.x.view(), k, &w, seed, DEFAULT_MAX_ITER)?;
    Ok(InstanceClusters {
        assignment: km.assignment,
        centroids: km.centroids,
        weights: w,
        feature_names: data.feature_names.clone(),
        k,
        seed,
    })
}

/// Instance clustering weighted by the global model's importances.
pub fn weighted_instance_tsc(global: &SampleSet, model: &FittedModel, k: usize, seed: u64) -> Result<InstanceClusters> {
    if model.feature_names() != &global.feature_names[..] {
        return Err(ClusterError::ShapeMismatch {
            expected: model.feature_names().len(),
            got: global.n_features(),
        });
    }
    instance_tsc(global, model.importance_vector(), k, seed)
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n as u64);
    let expected = if total > 0.0 { sum_a * sum_b / total } else { 0.0 };
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Mean silhouette under the weighted metric; singleton members score 0.
pub fn silhouette_score(points: ArrayView2<'_, f64>, assignment: &[usize], w: &[f64]) -> f64 {
    let m = points.nrows();
    let k = assignment.iter().max().map_or(0, |v| v + 1);
    if m < 2 || k < 2 {
        return 0.0;
    }
    let mut counts = vec![0usize; k];
    for &c in assignment {
        counts[c] += 1;
    }
    let scores: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let own = assignment[i];
            if counts[own] < 2 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..m {
                if j != i {
                    sums[assignment[j]] += weighted_sq_distance(points.row(i), points.row(j), w).sqrt();
                }
            }
            let a = sums[own] / (counts[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && counts[c] > 0)
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() || a.max(b) == 0.0 {
                0.0
            } else {
                (b - a) / a.max(b)
            }
        })
        .collect();
    scores.iter().sum::<f64>() / m as f64
}

/// K in `candidates` with the best silhouette (ties to the smaller K),
/// scored on at most 2000 evenly strided rows.
pub fn select_k(points: ArrayView2<'_, f64>, w: &[f64], seed: u64, candidates: impl IntoIterator<Item = usize>) -> Result<(usize, Vec<(usize, f64)>)> {
    let m = points.nrows();
    let stride = m.div_ceil(SILHOUETTE_MAX_ROWS).max(1);
    let sample: Vec<usize> = (0..m).step_by(stride).collect();
    let sub = points.select(ndarray::Axis(0), &sample);
    let mut scores = Vec::new();
    for k in candidates {
        if k < 2 || k > m {
            continue;
        }
        let km = weighted_kmeans(points, k, w, seed, DEFAULT_MAX_ITER)?;
        let labels: Vec<usize> = sample.iter().map(|&i| km.assignment[i]).collect();
        scores.push((k, silhouette_score(sub.view(), &labels, w)));
    }
    let best = scores
        .iter()
        .fold(None::<(usize, f64)>, |acc, &(k, s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((k, s)),
        })
        .ok_or(ClusterError::InvalidK { k: 2, n: m })?;
    Ok((best.0, scores))
}
