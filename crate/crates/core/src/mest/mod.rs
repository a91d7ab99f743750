//! Weighted second-step M-estimators.
//!
//! Sign convention: scores are gradients of the minimized objective and
//! Hessians are gradients of the mean score, so `H` is positive definite
//! at a minimum.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::weights::WeightSet;

pub mod glm;
pub mod gmm;
pub mod ls;
pub mod qr;

pub use glm::{solve_glm, solve_weighted_glm};
pub use gmm::{solve_stacked_gmm, GmmFit, GmmSpec};
pub use ls::{solve_ls, solve_weighted_ls};
pub use qr::{solve_qr, solve_weighted_qr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GaussianIdentity,
    BernoulliLogit,
    PoissonLog,
    /// Non-canonical Bernoulli quasi-likelihood with the probit mean.
    BernoulliProbit,
}

impl Family {
    /// Inverse link `h`.
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Family::GaussianIdentity => eta,
            Family::BernoulliLogit => crate::special::logistic(eta),
            Family::PoissonLog => eta.exp(),
            Family::BernoulliProbit => crate::special::norm_cdf(eta),
        }
    }

    /// Derivative of the inverse link.
    pub fn mean_derivative(self, eta: f64) -> f64 {
        match self {
            Family::GaussianIdentity => 1.0,
            Family::BernoulliLogit => {
                let p = crate::special::logistic(eta);
                p * (1.0 - p)
            }
            Family::PoissonLog => eta.exp(),
            Family::BernoulliProbit => crate::special::norm_pdf(eta),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianIdentity => "gaussian_identity",
            Family::BernoulliLogit => "bernoulli_logit",
            Family::PoissonLog => "poisson_log",
            Family::BernoulliProbit => "bernoulli_probit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ObjectiveKind {
    LeastSquares,
    Glm { family: Family },
    /// Check-loss regression; with `log_outcome` the regression runs on `ln y`
    /// and predictions are exponentiated.
    Quantile { tau: f64, log_outcome: bool },
}

impl ObjectiveKind {
    pub fn quantile(tau: f64) -> Self {
        ObjectiveKind::Quantile { tau, log_outcome: false }
    }

    /// `E[Y | x]` (or the conditional quantile) implied by index `eta`.
    pub fn predict(&self, eta: f64) -> f64 {
        match self {
            ObjectiveKind::LeastSquares => eta,
            ObjectiveKind::Glm { family } => family.mean(eta),
            ObjectiveKind::Quantile { log_outcome: true, .. } => eta.exp(),
            ObjectiveKind::Quantile { .. } => eta,
        }
    }

    pub fn predict_derivative(&self, eta: f64) -> f64 {
        match self {
            ObjectiveKind::LeastSquares => 1.0,
            ObjectiveKind::Glm { family } => family.mean_derivative(eta),
            ObjectiveKind::Quantile { log_outcome: true, .. } => eta.exp(),
            ObjectiveKind::Quantile { .. } => 1.0,
        }
    }

    /// Whether two fits produce comparable mean predictions.
    pub fn same_family(&self, other: &ObjectiveKind) -> bool {
        match (self, other) {
            (ObjectiveKind::Quantile { tau: a, log_outcome: la }, ObjectiveKind::Quantile { tau: b, log_outcome: lb }) => {
                a == b && la == lb
            }
            (ObjectiveKind::Quantile { .. }, _) | (_, ObjectiveKind::Quantile { .. }) => false,
            (a, b) => a.mean_family() == b.mean_family(),
        }
    }

    fn mean_family(&self) -> Option<Family> {
        match self {
            ObjectiveKind::LeastSquares => Some(Family::GaussianIdentity),
            ObjectiveKind::Glm { family } => Some(*family),
            ObjectiveKind::Quantile { .. } => None,
        }
    }
}

/// Second-step solution for one arm.
#[derive(Debug, Clone)]
pub struct MEstimateFit {
    pub arm: Arm,
    pub objective: ObjectiveKind,
    pub columns: Vec<String>,
    pub theta: DVector<f64>,
    /// N x P rows `l_i`, zero for rows outside the arm.
    pub row_scores: DMatrix<f64>,
    pub hessian: DMatrix<f64>,
    pub objective_value: f64,
    pub iterations: usize,
}

impl MEstimateFit {
    /// Predictions `h(x_i theta)` for every row of `x`.
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let eta = x * &self.theta;
        eta.iter().map(|&e| self.objective.predict(e)).collect()
    }

    /// Mean over `rows` of the gradient of `h(x theta)` with respect to theta.
    pub fn mean_gradient(&self, x: &DMatrix<f64>, rows: &[usize]) -> DVector<f64> {
        let mut j = DVector::zeros(self.theta.len());
        for &i in rows {
            let eta = (x.row(i) * &self.theta)[0];
            let d = self.objective.predict_derivative(eta);
            for a in 0..j.len() {
                j[a] += d * x[(i, a)];
            }
        }
        j / rows.len().max(1) as f64
    }
}

/// Outcome vector with zero-weight rows filled by zero. Reading a masked
/// outcome on a positive-weight row is an error.
pub(crate) fn weighted_outcome(ds: &Dataset, w: &[f64]) -> Result<Vec<f64>> {
    (0..ds.n())
        .map(|i| if w[i] > 0.0 { ds.outcome(i) } else { Ok(0.0) })
        .collect()
}

pub(crate) fn check_weights(w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config("weights must be finite and nonnegative".into()));
    }
    if !w.iter().any(|&v| v > 0.0) {
        return Err(Error::Infeasible("all weights are zero".into()));
    }
    Ok(())
}

pub(crate) fn arm_weights(ds: &Dataset, ws: &WeightSet, arm: Arm) -> Result<Vec<f64>> {
    if arm.0 >= ws.levels() || ws.n() != ds.n() {
        return Err(Error::Config("weights are not aligned with the dataset".into()));
    }
    Ok(ws.arm(arm).to_vec())
}
