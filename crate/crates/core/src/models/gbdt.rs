//! Gradient boosting with squared loss.
//!
//! `F₀` is the target mean; each stage fits a [`RegressionTree`] to the
//! current residuals and adds its output scaled by the learning rate.
//! Boosting stops early once the residuals admit no profitable root split.

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::tree::{RegressionTree, SortedColumns, TreeParams};
use super::{Hyperparams, ModelError};
use crate::featurizer::SampleSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub init: f64,
    /// Smallest and largest training target; predictions are clamped to this range.
    pub target_range: (f64, f64),
    pub trees: Vec<RegressionTree>,
    pub learning_rate: f64,
    pub n_estimators: usize,
    pub tree_params: TreeParams,
    /// Total split gain per feature, normalized to sum 1 (all zero without splits).
    pub importances: Vec<f64>,
    /// Training MSE after `F₀` and after every stage.
    pub train_loss: Vec<f64>,
    pub seed: u64,
    pub feature_names: Vec<String>,
}

impl GbdtModel {
    /// Fitting is deterministic; `seed` is recorded but no step samples.
    pub fn fit(data: &SampleSet, hp: &Hyperparams, seed: u64) -> Result<Self, ModelError> {
        hp.validate()?;
        let (m, p) = data.x.dim();
        if m == 0 {
            return Err(ModelError::Empty);
        }
        if m < 2 * hp.min_samples_leaf {
            return Err(ModelError::TooFewRows {
                rows: m,
                need: 2 * hp.min_samples_leaf,
            });
        }
        if data.x.iter().chain(data.y.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        let tree_params = TreeParams {
            max_depth: hp.max_depth,
            max_leaves: hp.max_leaves,
            min_samples_leaf: hp.min_samples_leaf,
        };
        // offset by the first target so constant targets give an exact mean
        let y0 = data.y[0];
        let init = y0 + data.y.iter().map(|y| y - y0).sum::<f64>() / m as f64;
        let mut fitted = vec![init; m];
        let mut residual: Vec<f64> = data.y.iter().map(|y| y - init).collect();
        let mse = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>() / m as f64;
        let mut train_loss = vec![mse(&residual)];
        let mut gains = vec![0.0; p];
        let mut trees = Vec::new();
        let sorted = SortedColumns::new(data.x.view());
        for _ in 0..hp.n_estimators {
            let (tree, leaf_of) = RegressionTree::fit_sorted(
                data.x.view(),
                &sorted,
                &residual,
                &tree_params,
                &mut |f, g| gains[f] += g,
            );
            if tree.n_leaves() < 2 {
                break;
            }
            for i in 0..m {
                fitted[i] += hp.learning_rate * tree.leaf_value(leaf_of[i]);
                residual[i] = data.y[i] - fitted[i];
            }
            train_loss.push(mse(&residual));
            trees.push(tree);
        }
        let total: f64 = gains.iter().sum();
        if total > 0.0 {
            gains.iter_mut().for_each(|g| *g /= total);
        }
        let target_range = data
            .y
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Ok(Self {
            init,
            target_range,
            trees,
            learning_rate: hp.learning_rate,
            n_estimators: hp.n_estimators,
            tree_params,
            importances: gains,
            train_loss,
            seed,
            feature_names: data.feature_names.clone(),
        })
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>, ModelError> {
        if x.ncols() != self.feature_names.len() {
            return Err(ModelError::ShapeMismatch {
                expected: self.feature_names.len(),
                got: x.ncols(),
            });
        }
        Ok(x
            .rows()
            .into_iter()
            .map(|row| {
                let raw = self.init
                    + self.learning_rate * self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>();
                raw.clamp(self.target_range.0, self.target_range.1)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn samples(x: Array2<f64>, y: Vec<f64>) -> SampleSet {
        let p = x.ncols();
        SampleSet {
            x,
            y: Array1::from(y),
            feature_names: (0..p).map(|j| format!("f{j}")).collect(),
            rows: Vec::new(),
        }
    }

    fn hp(rounds: usize, depth: usize, min_leaf: usize) -> Hyperparams {
        Hyperparams {
            n_estimators: rounds,
            max_depth: depth,
            min_samples_leaf: min_leaf,
            ..Hyperparams::local_default()
        }
    }

    fn step_data() -> SampleSet {
        let x = Array2::from_shape_fn((200, 1), |(i, _)| -1.0 + 2.0 * i as f64 / 199.0);
        let y = x.column(0).iter().map(|&v| if v < 0.0 { 0.0 } else { 1.0 }).collect();
        samples(x, y)
    }

    #[test]
    fn constant_target() {
        let x = Array2::from_shape_fn((50, 2), |(i, j)| (i + j) as f64);
        let m = GbdtModel::fit(&samples(x.clone(), vec![4.2; 50]), &hp(20, 3, 1), 0).unwrap();
        assert_eq!(m.init, 4.2);
        assert!(m.trees.is_empty());
        assert!(m.importances.iter().all(|&v| v == 0.0));
        assert!(m.predict(x.view()).unwrap().iter().all(|&v| v == 4.2));
    }

    #[test]
    fn step_function_converges_within_decay_bound() {
        let data = step_data();
        let m = GbdtModel::fit(&data, &hp(100, 1, 1), 0).unwrap();
        let mse = *m.train_loss.last().unwrap();
        // each stump removes a fraction η of the residual on both sides
        let bound = m.train_loss[0] * (1.0f64 - 0.1).powi(2 * 100);
        assert!(mse < 1e-3);
        assert!(mse <= bound * (1.0 + 1e-9), "mse {mse} bound {bound}");
    }

    #[test]
    fn predictions_stay_in_training_range() {
        let data = step_data();
        let m = GbdtModel::fit(&data, &hp(100, 1, 1), 0).unwrap();
        for x in [1e6, -1e6, 0.0, -1e-9] {
            let v = m.predict(Array2::from_elem((1, 1), x).view()).unwrap()[0];
            assert!((-1e-9..=1.0 + 1e-9).contains(&v), "{x} → {v}");
        }
    }

    #[test]
    fn loss_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((500, 3), |_| rng.random_range(-2.0f64..2.0));
        let y = (0..500)
            .map(|i| x[[i, 0]].sin() * 3.0 + x[[i, 1]] * x[[i, 2]] + rng.random_range(-0.1..0.1))
            .collect();
        let m = GbdtModel::fit(&samples(x, y), &hp(80, 4, 5), 0).unwrap();
        for w in m.train_loss.windows(2) {
            assert!(w[1] <= w[0]);
        }
        for t in &m.trees {
            assert!(t.depth() <= 4 && t.n_leaves() <= 32);
        }
    }

    #[test]
    fn importance_concentrates_on_signal_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((400, 2), |_| rng.random_range(-1.0f64..1.0));
        let y = x.column(0).iter().map(|v| (3.0 * v).sin()).collect();
        let m = GbdtModel::fit(&samples(x, y), &hp(50, 3, 5), 0).unwrap();
        assert!(m.importances[0] > 0.99, "{:?}", m.importances);
        assert!((m.importances.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_small_or_bad_data() {
        let x = Array2::zeros((10, 1));
        assert!(matches!(
            GbdtModel::fit(&samples(x.clone(), vec![0.0; 10]), &hp(5, 2, 20), 0),
            Err(ModelError::TooFewRows { rows: 10, need: 40 })
        ));
        let mut y = vec![0.0; 10];
        y[3] = f64::NAN;
        assert!(matches!(
            GbdtModel::fit(&samples(x, y), &hp(5, 2, 1), 0),
            Err(ModelError::NonFinite)
        ));
    }
}
