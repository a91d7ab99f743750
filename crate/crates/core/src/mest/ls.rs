use nalgebra::{DMatrix, DVector};

use super::{arm_weights, check_weights, weighted_outcome, MEstimateFit, ObjectiveKind};
use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::linalg;

/// Weighted least squares on an explicit design. Rows with zero weight are ignored.
pub fn solve_ls(x: &DMatrix<f64>, y: &[f64], w: &[f64], arm: Arm, columns: Vec<String>) -> Result<MEstimateFit> {
    check_weights(w)?;
    let (n, p) = x.shape();
    let gram = linalg::weighted_gram(x, w);
    let dependent = linalg::dependent_columns_gram(&gram);
    if !dependent.is_empty() {
        return Err(Error::Rank {
            what: "weighted least-squares design".into(),
            dependent: dependent.iter().map(|&j| columns.get(j).cloned().unwrap_or(format!("column {j}"))).collect(),
        });
    }
    let xty = linalg::weighted_xtv(x, w, y);
    let theta = linalg::solve_spd(&gram, &xty, "weighted Gram matrix")?;
    let fitted = x * &theta;
    let mut scores = DMatrix::zeros(n, p);
    let mut obj = 0.0;
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        let r = y[i] - fitted[i];
        obj += 0.5 * w[i] * r * r;
        for j in 0..p {
            scores[(i, j)] = -w[i] * r * x[(i, j)];
        }
    }
    Ok(MEstimateFit {
        arm,
        objective: ObjectiveKind::LeastSquares,
        columns,
        theta,
        row_scores: scores,
        hessian: gram / n as f64,
        objective_value: obj / n as f64,
        iterations: 1,
    })
}

/// Weighted least squares of the outcome on the covariates for one arm.
pub fn solve_weighted_ls(ds: &Dataset, ws: &crate::weights::WeightSet, arm: Arm) -> Result<MEstimateFit> {
    let w = arm_weights(ds, ws, arm)?;
    let y = weighted_outcome(ds, &w)?;
    solve_ls(ds.covariates(), &y, &w, arm, ds.covariate_names().to_vec())
}

/// Plain (unweighted) least squares, used by other solvers for start values.
pub(crate) fn ls_start(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<DVector<f64>> {
    let gram = linalg::weighted_gram(x, w);
    linalg::solve_spd(&gram, &linalg::weighted_xtv(x, w, y), "weighted Gram matrix")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn interpolates_exact_line() {
        let x = DMatrix::from_row_slice(4, 2, &[1., 0., 1., 1., 1., 2., 1., 5.]);
        let y: Vec<f64> = (0..4).map(|i| 2.0 + 3.0 * x[(i, 1)]).collect();
        let fit = solve_ls(&x, &y, &[1.0; 4], Arm::TREATED, vec![]).unwrap();
        assert_abs_diff_eq!(fit.theta[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.theta[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn scores_sum_to_zero() {
        let x = DMatrix::from_row_slice(5, 2, &[1., 0.3, 1., -1.0, 1., 2.2, 1., 0.1, 1., 0.7]);
        let y = [0.5, -1.0, 2.5, 0.0, 1.7];
        let w = [1.0, 0.0, 2.0, 0.5, 3.0];
        let fit = solve_ls(&x, &y, &w, Arm::TREATED, vec![]).unwrap();
        let m = linalg::column_means(&fit.row_scores);
        assert!(linalg::sup_norm(m.as_slice()) < 1e-13);
        assert_eq!(fit.row_scores.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
    }

    #[test]
    fn collinear_weighted_design_is_rank_error() {
        let x = DMatrix::from_row_slice(3, 2, &[1., 1., 1., 2., 1., 3.]);
        let err = solve_ls(&x, &[1.0, 2.0, 3.0], &[1.0, 0.0, 0.0], Arm::TREATED, vec!["a".into(), "b".into()]);
        assert!(matches!(err, Err(Error::Rank { .. })));
    }
}
