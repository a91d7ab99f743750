//! Small dense linear-algebra helpers shared by the estimators.
//!
//! Everything here works on `nalgebra` dynamic matrices. Accumulations run
//! in fixed row order so results are bit-reproducible.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative pivot below which a column is treated as linearly dependent.
const RANK_TOL: f64 = 1e-10;

/// Condition number beyond which projections fall back to a pseudo-inverse.
pub const PINV_CONDITION: f64 = 1e12;

/// `sum_i w_i x_i x_i'` over the rows of `x`.
pub fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let (n, p) = x.shape();
    debug_assert_eq!(n, w.len());
    let mut g = DMatrix::zeros(p, p);
    let mut row = vec![0.0; p];
    for i in 0..n {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for (a, r) in row.iter_mut().enumerate() {
            *r = x[(i, a)];
        }
        for a in 0..p {
            let xa = wi * row[a];
            for b in 0..=a {
                g[(a, b)] += xa * row[b];
            }
        }
    }
    fill_upper(&mut g);
    g
}

/// `sum_i w_i x_i v_i`.
pub fn weighted_xtv(x: &DMatrix<f64>, w: &[f64], v: &[f64]) -> DVector<f64> {
    let (n, p) = x.shape();
    let mut out = DVector::zeros(p);
    for i in 0..n {
        let s = w[i] * v[i];
        if s == 0.0 {
            continue;
        }
        for a in 0..p {
            out[a] += s * x[(i, a)];
        }
    }
    out
}

/// `A'B / n` for two matrices with the same row count.
pub fn cross_moment(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    debug_assert_eq!(n, b.nrows());
    let mut out = DMatrix::zeros(a.ncols(), b.ncols());
    for i in 0..n {
        for j in 0..a.ncols() {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for k in 0..b.ncols() {
                out[(j, k)] += aij * b[(i, k)];
            }
        }
    }
    out / n as f64
}

/// Mean of each column.
pub fn column_means(a: &DMatrix<f64>) -> DVector<f64> {
    let n = a.nrows().max(1) as f64;
    let mut out = DVector::zeros(a.ncols());
    for j in 0..a.ncols() {
        let mut s = 0.0;
        for i in 0..a.nrows() {
            s += a[(i, j)];
        }
        out[j] = s / n;
    }
    out
}

pub fn fill_upper(g: &mut DMatrix<f64>) {
    let p = g.nrows();
    for a in 0..p {
        for b in (a + 1)..p {
            g[(a, b)] = g[(b, a)];
        }
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Solve `A x = b` for symmetric positive definite `A`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    let x = chol.solve(b);
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Singular(what.to_string()))
    }
}

/// Inverse of a symmetric positive definite matrix.
pub fn inverse_spd(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Ok(a.clone());
    }
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    let inv = chol.inverse();
    if inv.iter().all(|v| v.is_finite()) {
        Ok(symmetrize(&inv))
    } else {
        Err(Error::Singular(what.to_string()))
    }
}

/// General square inverse via LU.
pub fn inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let inv = a
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    if inv.iter().all(|v| v.is_finite()) {
        Ok(inv)
    } else {
        Err(Error::Singular(what.to_string()))
    }
}

/// Solve a general square system via LU.
pub fn solve_lu(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let lu = a.clone().lu();
    let x = lu
        .solve(b)
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Singular(what.to_string()))
    }
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Spectral condition number of a symmetric psd matrix (infinite when singular).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    match (ev.first(), ev.last()) {
        (Some(&lo), Some(&hi)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

/// Moore-Penrose inverse of a symmetric matrix by eigen-decomposition.
pub fn pinv_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let p = m.nrows();
    if p == 0 {
        return m.clone();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let cutoff = max * p as f64 * f64::EPSILON * 16.0;
    let mut out = DMatrix::zeros(p, p);
    for k in 0..p {
        let lam = eig.eigenvalues[k];
        if lam.abs() <= cutoff {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        out += (v * v.transpose()) / lam;
    }
    out
}

/// Inverse of a symmetric psd matrix, switching to the pseudo-inverse when
/// the condition number exceeds [`PINV_CONDITION`]. The flag reports the switch.
pub fn robust_inverse_sym(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if condition_number(m) > PINV_CONDITION {
        return (pinv_sym(m), true);
    }
    match inverse_spd(m, "") {
        Ok(inv) => (inv, false),
        Err(_) => (pinv_sym(m), true),
    }
}

/// Indices of columns that are (numerically) linear combinations of the
/// preceding columns, found by a greedy incremental Cholesky of `X'X`.
pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let w = vec![1.0; x.nrows()];
    dependent_columns_gram(&weighted_gram(x, &w))
}

/// Same as [`dependent_columns`] but starting from a precomputed Gram matrix.
pub fn dependent_columns_gram(g: &DMatrix<f64>) -> Vec<usize> {
    let p = g.nrows();
    let mut kept: Vec<usize> = Vec::new();
    // lower-triangular factor restricted to kept columns
    let mut l: Vec<Vec<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..p {
        let gjj = g[(j, j)];
        let mut row = Vec::with_capacity(kept.len());
        for (a, &ka) in kept.iter().enumerate() {
            let mut s = g[(j, ka)];
            for b in 0..a {
                s -= row[b] * l[a][b];
            }
            row.push(s / l[a][a]);
        }
        let resid = gjj - row.iter().map(|v| v * v).sum::<f64>();
        if gjj <= 0.0 || resid <= RANK_TOL * gjj.max(f64::MIN_POSITIVE) {
            dependent.push(j);
            continue;
        }
        row.push(resid.sqrt());
        l.push(row);
        kept.push(j);
    }
    dependent
}

/// Sup-norm of a slice.
pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |a, &b| a.max(b.abs()))
}

/// Select a subset of columns.
pub fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |i, j| x[(i, cols[j])])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_duplicate_and_combination_columns() {
        let x = DMatrix::from_row_slice(
            5,
            4,
            &[
                1.0, 2.0, 4.0, 3.0, //
                1.0, 3.0, 6.0, 1.0, //
                1.0, 5.0, 10.0, 2.0, //
                1.0, 7.0, 14.0, 8.0, //
                1.0, 1.0, 2.0, 5.0,
            ],
        );
        assert_eq!(dependent_columns(&x), vec![2]);
    }

    #[test]
    fn pinv_matches_inverse_when_regular() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let a = pinv_sym(&m);
        let b = inverse_spd(&m, "m").unwrap();
        assert!((a - b).abs().max() < 1e-14);
    }

    #[test]
    fn pinv_of_singular_projects() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = pinv_sym(&m);
        assert!((&m * &p * &m - &m).abs().max() < 1e-12);
        assert!(robust_inverse_sym(&m).1);
    }
}
