//! The two learner families: feature-transforming ridge regression and
//! target-transforming gradient-boosted trees, behind [`FittedModel`].

mod gbdt;
mod ridge;
mod tree;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gbdt::GbdtModel;
pub use ridge::RidgeModel;
pub use tree::{Node, RegressionTree, TreeParams};

use crate::featurizer::SampleSet;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("no training rows")]
    Empty,
    #[error("{rows} training rows; need at least {need}")]
    TooFewRows { rows: usize, need: usize },
    #[error("training data contains non-finite values")]
    NonFinite,
    #[error("normal equations are numerically singular; use alpha > 0")]
    Singular,
    #[error("expected {expected} feature columns, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("unknown model kind `{0}`")]
    UnknownKind(String),
    #[error("model container: {0}")]
    Container(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ridge,
    Gbdt,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Ridge => "ridge",
            ModelKind::Gbdt => "gbdt",
        })
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s.to_ascii_lowercase().as_str() {
            "ridge" => Ok(ModelKind::Ridge),
            "gbdt" | "lightgbm" => Ok(ModelKind::Gbdt),
            _ => Err(ModelError::UnknownKind(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub alpha: f64,
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub max_leaves: usize,
    pub min_samples_leaf: usize,
}

impl Hyperparams {
    /// Defaults for per-series (local) models: 200 boosting rounds.
    pub fn local_default() -> Self {
        Self {
            alpha: 1.0,
            n_estimators: 200,
            learning_rate: 0.1,
            max_depth: 4,
            max_leaves: 32,
            min_samples_leaf: 20,
        }
    }

    /// Defaults for pooled models: 1000 boosting rounds.
    pub fn global_default() -> Self {
        Self {
            n_estimators: 1000,
            ..Self::local_default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |what: &str| Err(ModelError::InvalidHyperparams(what.to_string()));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha must be finite and >= 0");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.n_estimators == 0 || self.max_depth == 0 || self.min_samples_leaf == 0 {
            return bad("n_estimators, max_depth and min_samples_leaf must be positive");
        }
        if self.max_leaves < 2 {
            return bad("max_leaves must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FittedModel {
    Ridge(RidgeModel),
    Gbdt(GbdtModel),
}

pub fn fit(kind: ModelKind, data: &SampleSet, hp: &Hyperparams, seed: u64) -> Result<FittedModel, ModelError> {
    match kind {
        ModelKind::Ridge => RidgeModel::fit(data, hp.alpha).map(FittedModel::Ridge),
        ModelKind::Gbdt => GbdtModel::fit(data, hp, seed).map(FittedModel::Gbdt),
    }
}

impl FittedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            FittedModel::Ridge(_) => ModelKind::Ridge,
            FittedModel::Gbdt(_) => ModelKind::Gbdt,
        }
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>, ModelError> {
        match self {
            FittedModel::Ridge(m) => m.predict(x),
            FittedModel::Gbdt(m) => m.predict(x),
        }
    }

    /// Ridge: signed standardized coefficients. GBDT: normalized split gains.
    pub fn importance_vector(&self) -> &[f64] {
        match self {
            FittedModel::Ridge(m) => &m.coefficients,
            FittedModel::Gbdt(m) => &m.importances,
        }
    }

    pub fn feature_names(&self) -> &[String] {
        match self {
            FittedModel::Ridge(m) => &m.feature_names,
            FittedModel::Gbdt(m) => &m.feature_names,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Container {
            format: CONTAINER_FORMAT.to_string(),
            version: CONTAINER_VERSION,
            feature_names: self.feature_names().to_vec(),
            model: self.clone(),
        })
        .expect("models serialize to JSON")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let c: Container = serde_json::from_str(s).map_err(|e| ModelError::Container(e.to_string()))?;
        if c.format != CONTAINER_FORMAT || c.version != CONTAINER_VERSION {
            return Err(ModelError::Container(format!(
                "unsupported container {} v{}",
                c.format, c.version
            )));
        }
        if c.feature_names != c.model.feature_names() {
            return Err(ModelError::Container("feature names disagree with model".into()));
        }
        Ok(c.model)
    }
}

const CONTAINER_FORMAT: &str = "clustcast-model";
const CONTAINER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    feature_names: Vec<String>,
    model: FittedModel,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(seed: u64, m: usize, p: usize) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((m, p), |_| rng.random_range(-3.0f64..3.0));
        let y = (0..m)
            .map(|i| x[[i, 0]] * 2.0 - x[[i, 1 % p]].powi(2) + rng.random_range(-0.2..0.2))
            .collect::<Array1<f64>>();
        SampleSet {
            x,
            y,
            feature_names: (0..p).map(|j| format!("c{j}")).collect(),
            rows: Vec::new(),
        }
    }

    fn small_gbdt() -> Hyperparams {
        Hyperparams {
            n_estimators: 30,
            min_samples_leaf: 5,
            ..Hyperparams::local_default()
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let data = random_set(1, 300, 4);
        for kind in [ModelKind::Ridge, ModelKind::Gbdt] {
            let m = fit(kind, &data, &small_gbdt(), 3).unwrap();
            let back = FittedModel::from_json(&m.to_json()).unwrap();
            assert_eq!(back, m);
            let a = m.predict(data.x.view()).unwrap();
            let b = back.predict(data.x.view()).unwrap();
            assert!(a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        assert!(FittedModel::from_json("{\"format\":\"other\"}").is_err());
    }

    #[test]
    fn gbdt_without_trees_has_zero_importance() {
        let mut data = random_set(2, 100, 3);
        data.y.fill(1.5);
        let m = fit(ModelKind::Gbdt, &data, &small_gbdt(), 0).unwrap();
        assert!(m.importance_vector().iter().all(|&v| v == 0.0));
        assert_eq!(m.feature_names(), &data.feature_names[..]);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("Ridge".parse::<ModelKind>().unwrap(), ModelKind::Ridge);
        assert_eq!("gbdt".parse::<ModelKind>().unwrap(), ModelKind::Gbdt);
        assert!("svm".parse::<ModelKind>().is_err());
        assert_eq!(ModelKind::Gbdt.to_string(), "gbdt");
    }

    #[test]
    fn default_hyperparams() {
        let l = Hyperparams::local_default();
        let g = Hyperparams::global_default();
        assert_eq!((l.max_depth, l.max_leaves, l.n_estimators), (4, 32, 200));
        assert_eq!(g.n_estimators, 1000);
        assert_eq!((l.alpha, l.learning_rate), (1.0, 0.1));
        assert!(Hyperparams { max_leaves: 1, ..l }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gbdt_predictions_within_training_range(seed in 0u64..1000) {
            let data = random_set(seed, 120, 3);
            let m = fit(ModelKind::Gbdt, &data, &small_gbdt(), seed).unwrap();
            let lo = data.y.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = data.y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let probes = Array2::from_shape_fn((2000, 3), |_| rng.random_range(-1e6..1e6));
            for v in m.predict(probes.view()).unwrap() {
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }

        #[test]
        fn ridge_extrapolates_along_coefficients(seed in 0u64..1000) {
            let data = random_set(seed, 60, 3);
            let FittedModel::Ridge(m) = fit(ModelKind::Ridge, &data, &Hyperparams::local_default(), 0).unwrap() else {
                unreachable!()
            };
            prop_assume!(m.coefficients.iter().any(|&c| c != 0.0));
            let hi = data.y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let t = 1e3;
            let probe = Array2::from_shape_fn((1, 3), |(_, j)| m.means[j] + t * m.coefficients[j] * m.scales[j]);
            prop_assert!(m.predict(probe.view()).unwrap()[0] > hi);
        }
    }
}
