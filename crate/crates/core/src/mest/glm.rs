use nalgebra::{DMatrix, DVector};

use super::ls::{ls_start, solve_ls};
use super::{arm_weights, check_weights, weighted_outcome, Family, MEstimateFit, ObjectiveKind};
use crate::binary::{self, LinkKind, MAX_ITER, SCORE_TOL};
use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::linalg;
use crate::special;
use crate::weights::WeightSet;

fn check_range(family: Family, y: &[f64], w: &[f64]) -> Result<()> {
    for i in 0..y.len() {
        if w[i] == 0.0 {
            continue;
        }
        let ok = match family {
            Family::GaussianIdentity => true,
            Family::BernoulliLogit | Family::BernoulliProbit => (0.0..=1.0).contains(&y[i]),
            Family::PoissonLog => y[i] >= 0.0,
        };
        if !ok {
            return Err(Error::Range { family: family.name().into(), row: i });
        }
    }
    Ok(())
}

/// Negative quasi-log-likelihood per row (canonical families).
fn row_loss(family: Family, eta: f64, y: f64) -> f64 {
    match family {
        Family::GaussianIdentity => 0.5 * (y - eta) * (y - eta),
        Family::BernoulliLogit => special::softplus(eta) - y * eta,
        Family::PoissonLog => eta.exp() - y * eta,
        Family::BernoulliProbit => unreachable!(),
    }
}

/// Start values: least squares of the link-transformed outcome.
fn start_values(family: Family, x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<DVector<f64>> {
    let z: Vec<f64> = y
        .iter()
        .map(|&v| match family {
            Family::GaussianIdentity => v,
            Family::BernoulliLogit => special::logit(v.clamp(1e-3, 1.0 - 1e-3)),
            Family::BernoulliProbit => special::norm_quantile(v.clamp(1e-3, 1.0 - 1e-3)),
            Family::PoissonLog => (v + 0.1).ln(),
        })
        .collect();
    ls_start(x, &z, w)
}

struct State {
    loss: f64,
    score: DVector<f64>,
    hess: DMatrix<f64>,
}

fn evaluate(family: Family, x: &DMatrix<f64>, y: &[f64], w: &[f64], theta: &DVector<f64>) -> State {
    let n = y.len();
    let eta = x * theta;
    let mut loss = 0.0;
    let mut r = vec![0.0; n];
    let mut v = vec![0.0; n];
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        loss += w[i] * row_loss(family, eta[i], y[i]);
        r[i] = family.mean(eta[i]) - y[i];
        v[i] = w[i] * family.mean_derivative(eta[i]);
    }
    State {
        loss: loss / n as f64,
        score: linalg::weighted_xtv(x, w, &r) / n as f64,
        hess: linalg::weighted_gram(x, &v) / n as f64,
    }
}

/// Weighted GLM quasi-likelihood on an explicit design.
pub fn solve_glm(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    family: Family,
    arm: Arm,
    columns: Vec<String>,
) -> Result<MEstimateFit> {
    check_weights(w)?;
    check_range(family, y, w)?;
    if family == Family::GaussianIdentity {
        let mut fit = solve_ls(x, y, w, arm, columns)?;
        fit.objective = ObjectiveKind::Glm { family };
        return Ok(fit);
    }
    if family == Family::BernoulliProbit {
        return solve_probit_qmle(x, y, w, arm, columns);
    }
    let (n, p) = x.shape();
    let wsum: f64 = w.iter().sum::<f64>() / n as f64;
    let mut theta = start_values(family, x, y, w)?;
    let mut st = evaluate(family, x, y, w, &theta);
    let mut iterations = 0;
    loop {
        let norm = linalg::sup_norm(st.score.as_slice()) / wsum;
        if !norm.is_finite() {
            return Err(Error::Convergence { iterations, score_norm: norm, last_iterate: theta.iter().copied().collect() });
        }
        if norm <= SCORE_TOL {
            if let Ok(dir) = linalg::solve_spd(&st.hess, &st.score, "") {
                let cand = &theta - dir;
                let next = evaluate(family, x, y, w, &cand);
                if linalg::sup_norm(next.score.as_slice()) <= linalg::sup_norm(st.score.as_slice()) {
                    theta = cand;
                    st = next;
                }
            }
            break;
        }
        if iterations == MAX_ITER {
            return Err(Error::Convergence { iterations, score_norm: norm, last_iterate: theta.iter().copied().collect() });
        }
        let dir = linalg::solve_spd(&st.hess, &st.score, "GLM Hessian")?;
        let mut step = 1.0;
        loop {
            let cand = &theta - &dir * step;
            let next = evaluate(family, x, y, w, &cand);
            if next.loss.is_finite() && next.loss <= st.loss + 1e-14 * st.loss.abs() {
                theta = cand;
                st = next;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                return Err(Error::Convergence { iterations, score_norm: norm, last_iterate: theta.iter().copied().collect() });
            }
        }
        iterations += 1;
    }
    let eta = x * &theta;
    let mut scores = DMatrix::zeros(n, p);
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        let r = family.mean(eta[i]) - y[i];
        for j in 0..p {
            scores[(i, j)] = w[i] * r * x[(i, j)];
        }
    }
    Ok(MEstimateFit {
        arm,
        objective: ObjectiveKind::Glm { family },
        columns,
        theta,
        row_scores: scores,
        hessian: st.hess,
        objective_value: st.loss,
        iterations,
    })
}

fn solve_probit_qmle(x: &DMatrix<f64>, y: &[f64], w: &[f64], arm: Arm, columns: Vec<String>) -> Result<MEstimateFit> {
    let start = start_values(Family::BernoulliProbit, x, y, w)?;
    let fit = match binary::fit_binary_from(x, y, w, LinkKind::Probit, start) {
        Ok(f) => f,
        // a poor start can stall the line search; zero is always admissible
        Err(Error::Convergence { .. }) => binary::fit_binary_from(x, y, w, LinkKind::Probit, DVector::zeros(x.ncols()))?,
        Err(e) => return Err(e),
    };
    Ok(MEstimateFit {
        arm,
        objective: ObjectiveKind::Glm { family: Family::BernoulliProbit },
        columns,
        theta: fit.coefficients,
        row_scores: -fit.scores,
        hessian: fit.hessian,
        objective_value: -fit.log_likelihood / y.len() as f64,
        iterations: fit.iterations,
    })
}

/// Weighted GLM of the outcome on the covariates for one arm.
pub fn solve_weighted_glm(ds: &Dataset, ws: &WeightSet, arm: Arm, family: Family) -> Result<MEstimateFit> {
    let w = arm_weights(ds, ws, arm)?;
    let y = weighted_outcome(ds, &w)?;
    solve_glm(ds.covariates(), &y, &w, family, arm, ds.covariate_names().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn design() -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
        let x = DMatrix::from_row_slice(
            8,
            2,
            &[1., 0.3, 1., -1.0, 1., 2.2, 1., 0.1, 1., 0.7, 1., -0.4, 1., 1.5, 1., -2.0],
        );
        let y = vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let w = vec![1.0, 2.0, 0.5, 1.0, 3.0, 1.0, 0.7, 1.2];
        (x, y, w)
    }

    #[test]
    fn gaussian_equals_ls() {
        let (x, y, w) = design();
        let a = solve_glm(&x, &y, &w, Family::GaussianIdentity, Arm::TREATED, vec![]).unwrap();
        let b = solve_ls(&x, &y, &w, Arm::TREATED, vec![]).unwrap();
        assert!((&a.theta - &b.theta).abs().max() < 1e-10);
    }

    #[test]
    fn logit_intercept_only_is_logit_of_mean() {
        let x = DMatrix::from_element(5, 1, 1.0);
        let y = [1.0, 0.0, 1.0, 1.0, 0.0];
        let fit = solve_glm(&x, &y, &[1.0; 5], Family::BernoulliLogit, Arm::TREATED, vec![]).unwrap();
        assert_abs_diff_eq!(fit.theta[0], special::logit(0.6), epsilon = 1e-12);
    }

    #[test]
    fn mean_fitting_for_canonical_links() {
        let (x, y, w) = design();
        let counts: Vec<f64> = y.iter().enumerate().map(|(i, v)| v * (i as f64 + 1.0)).collect();
        for (fam, yy) in [(Family::BernoulliLogit, &y), (Family::PoissonLog, &counts)] {
            let fit = solve_glm(&x, yy, &w, fam, Arm::TREATED, vec![]).unwrap();
            let pred = fit.predict(&x);
            let resid: f64 = (0..8).map(|i| w[i] * (yy[i] - pred[i])).sum();
            let total: f64 = w.iter().sum();
            assert!(resid.abs() <= 1e-8 * total, "{fam:?} {resid}");
        }
    }

    #[test]
    fn probit_qmle_solves_its_foc() {
        let (x, y, w) = design();
        let fit = solve_glm(&x, &y, &w, Family::BernoulliProbit, Arm::TREATED, vec![]).unwrap();
        let eta = &x * &fit.theta;
        for j in 0..2 {
            let foc: f64 = (0..8)
                .map(|i| {
                    let p = special::norm_cdf(eta[i]);
                    w[i] * x[(i, j)] * special::norm_pdf(eta[i]) * (y[i] - p) / (p * (1.0 - p))
                })
                .sum();
            assert!(foc.abs() < 1e-9, "{foc}");
        }
    }

    #[test]
    fn range_violation_names_row() {
        let (x, mut y, w) = design();
        y[3] = 1.5;
        let err = solve_glm(&x, &y, &w, Family::BernoulliLogit, Arm::TREATED, vec![]).unwrap_err();
        assert!(matches!(err, Error::Range { row: 3, .. }));
        y[3] = -1.0;
        assert!(solve_glm(&x, &y, &w, Family::PoissonLog, Arm::TREATED, vec![]).is_err());
    }
}
