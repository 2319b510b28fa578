//! Ridge regression on standardized features with an unpenalized intercept.
//!
//! Minimizes `Σ (y - b - zθ)² + α‖θ‖²` where `z` are the columns standardized
//! with the population mean and standard deviation of the fit data. The
//! intercept is then `mean(y)` and `θ` solves `(ZᵀZ + αI) θ = Zᵀ(y - ȳ)` by
//! Cholesky factorization. Zero-variance columns get a zero coefficient and
//! are left out of the solve.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::featurizer::SampleSet;

/// Columns whose standard deviation is below this fraction of their scale are constant.
const CONSTANT_COLUMN_RTOL: f64 = 1e-12;

/// Reciprocal condition bound below which an unregularized system is singular.
const SINGULAR_RCOND: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// Coefficients on the standardized scale, one per feature.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub means: Vec<f64>,
    /// Population standard deviations; 1.0 for constant columns.
    pub scales: Vec<f64>,
    pub alpha: f64,
    pub feature_names: Vec<String>,
}

impl RidgeModel {
    pub fn fit(data: &SampleSet, alpha: f64) -> Result<Self, ModelError> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(ModelError::InvalidHyperparams(format!("alpha = {alpha}")));
        }
        let (m, p) = data.x.dim();
        if m == 0 {
            return Err(ModelError::Empty);
        }
        if data.x.iter().chain(data.y.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        let n = m as f64;
        let means: Vec<f64> = (0..p).map(|j| data.x.column(j).sum() / n).collect();
        let mut scales = vec![1.0; p];
        let mut active = Vec::with_capacity(p);
        for j in 0..p {
            let mu = means[j];
            let var = data.x.column(j).iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            let scale = data.x.column(j).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if sd > CONSTANT_COLUMN_RTOL * scale.max(f64::MIN_POSITIVE) {
                scales[j] = sd;
                active.push(j);
            }
        }
        let y_mean = data.y.sum() / n;
        let q = active.len();
        let mut coefficients = vec![0.0; p];
        if q > 0 {
            let mut gram = DMatrix::<f64>::zeros(q, q);
            let mut rhs = DVector::<f64>::zeros(q);
            let mut z = vec![0.0; q];
            for (i, row) in data.x.rows().into_iter().enumerate() {
                for (a, &j) in active.iter().enumerate() {
                    z[a] = (row[j] - means[j]) / scales[j];
                }
                let r = data.y[i] - y_mean;
                for a in 0..q {
                    rhs[a] += z[a] * r;
                    let za = z[a];
                    for b in a..q {
                        gram[(a, b)] += za * z[b];
                    }
                }
            }
            for a in 0..q {
                for b in 0..a {
                    gram[(a, b)] = gram[(b, a)];
                }
                gram[(a, a)] += alpha;
            }
            let max_diag = (0..q).map(|a| gram[(a, a)]).fold(0.0f64, f64::max);
            let chol = gram.cholesky().ok_or(ModelError::Singular)?;
            let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, v| a.min(v * v));
            if alpha == 0.0 && min_pivot <= SINGULAR_RCOND * max_diag {
                return Err(ModelError::Singular);
            }
            let theta = chol.solve(&rhs);
            for (a, &j) in active.iter().enumerate() {
                coefficients[j] = theta[a];
            }
        }
        Ok(Self {
            coefficients,
            intercept: y_mean,
            means,
            scales,
            alpha,
            feature_names: data.feature_names.clone(),
        })
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>, ModelError> {
        if x.ncols() != self.coefficients.len() {
            return Err(ModelError::ShapeMismatch {
                expected: self.coefficients.len(),
                got: x.ncols(),
            });
        }
        Ok(x
            .rows()
            .into_iter()
            .map(|row| {
                self.intercept
                    + row
                        .iter()
                        .zip(&self.coefficients)
                        .zip(self.means.iter().zip(&self.scales))
                        .map(|((v, c), (mu, sd))| c * (v - mu) / sd)
                        .sum::<f64>()
            })
            .collect())
    }
}
