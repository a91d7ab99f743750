//! Weighted quantile regression as an exact linear program.
//!
//! The solver walks between vertices (fits interpolating P rows) along
//! edges of the polyhedral objective. Directional derivatives count the
//! kinks of every zero-residual row, so each move strictly decreases the
//! objective. Degenerate vertices (more than P zero residuals) enumerate
//! all edges spanned by (P-1)-subsets of the zero set. Among optimal
//! vertices the lexicographically smallest coefficient vector is returned.

use nalgebra::{DMatrix, DVector};

use super::{arm_weights, check_weights, weighted_outcome, MEstimateFit, ObjectiveKind};
use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::linalg;
use crate::special;
use crate::weights::WeightSet;

/// Problems larger than this start from the solution on a systematic subsample.
const WARM_START_ROWS: usize = 20_000;
const MAX_DEGENERATE_EDGES: usize = 200_000;

pub fn check_loss(tau: f64, r: f64) -> f64 {
    if r < 0.0 {
        (tau - 1.0) * r
    } else {
        tau * r
    }
}

struct Problem {
    /// Row-major m x p design.
    x: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    p: usize,
    tau: f64,
}

struct Edge {
    d: Vec<f64>,
    fixed: Vec<usize>,
}

impl Problem {
    fn m(&self) -> usize {
        self.y.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    fn dot(&self, i: usize, v: &[f64]) -> f64 {
        self.row(i).iter().zip(v).map(|(a, b)| a * b).sum()
    }

    fn residuals(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.m()).map(|i| self.y[i] - self.dot(i, theta)).collect()
    }

    fn basis_matrix(&self, rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), self.p, |a, b| self.x[rows[a] * self.p + b])
    }

    /// Vertex through `rows`, with the inverse of the interpolation matrix.
    fn vertex(&self, rows: &[usize]) -> Option<(Vec<f64>, DMatrix<f64>)> {
        let xb = self.basis_matrix(rows);
        let inv = xb.try_inverse()?;
        if !inv.iter().all(|v| v.is_finite()) {
            return None;
        }
        let yb = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        let theta = &inv * yb;
        Some((theta.iter().copied().collect(), inv))
    }

    fn zero_tol(&self, i: usize, theta: &[f64]) -> f64 {
        let fit = self.dot(i, theta);
        1e-11 * (1.0 + self.y[i].abs() + fit.abs())
    }

    /// `p` linearly independent rows, preferring small residuals at `theta`.
    fn initial_basis(&self, theta: &[f64]) -> Result<Vec<usize>> {
        let r = self.residuals(theta);
        let mut order: Vec<usize> = (0..self.m()).collect();
        order.sort_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs()).then(a.cmp(&b)));
        let p = self.p;
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(p);
        let mut basis = Vec::with_capacity(p);
        for &i in &order {
            let mut v = self.row(i).to_vec();
            let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm0 == 0.0 {
                continue;
            }
            for _ in 0..2 {
                for qk in &q {
                    let c: f64 = v.iter().zip(qk).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(qk).for_each(|(a, b)| *a -= c * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 * norm0 {
                v.iter_mut().for_each(|a| *a /= norm);
                q.push(v);
                basis.push(i);
                if basis.len() == p {
                    basis.sort_unstable();
                    return Ok(basis);
                }
            }
        }
        Err(Error::Rank { what: "quantile-regression design".into(), dependent: vec![] })
    }

    /// Directional derivative of the objective along `d` (and its absolute scale).
    fn derivative(&self, d: &[f64], r: &[f64], zero: &[bool]) -> (f64, f64) {
        let (mut der, mut scale) = (0.0, 0.0);
        for i in 0..self.m() {
            let c = -self.dot(i, d);
            if c == 0.0 {
                continue;
            }
            let wc = self.w[i] * c;
            scale += wc.abs();
            der += if zero[i] {
                if c > 0.0 {
                    self.tau * wc
                } else {
                    (self.tau - 1.0) * wc
                }
            } else if r[i] > 0.0 {
                self.tau * wc
            } else {
                (self.tau - 1.0) * wc
            };
        }
        (der, scale)
    }

    /// Edges from a nondegenerate vertex: `+-` columns of the basis inverse.
    fn basis_edges(&self, basis: &[usize], inv: &DMatrix<f64>) -> Vec<Edge> {
        let mut edges = Vec::with_capacity(2 * self.p);
        for j in 0..self.p {
            let fixed: Vec<usize> = basis.iter().enumerate().filter(|&(k, _)| k != j).map(|(_, &b)| b).collect();
            for s in [1.0, -1.0] {
                let d = (0..self.p).map(|a| s * inv[(a, j)]).collect();
                edges.push(Edge { d, fixed: fixed.clone() });
            }
        }
        edges
    }

    /// All edges of a degenerate vertex whose zero-residual rows are `zset`.
    fn degenerate_edges(&self, zset: &[usize]) -> Result<Vec<Edge>> {
        let k = self.p - 1;
        let mut edges = Vec::new();
        let mut idx: Vec<usize> = (0..k).collect();
        let mut count = 0usize;
        loop {
            count += 1;
            if count > MAX_DEGENERATE_EDGES {
                return Err(Error::Infeasible("quantile regression vertex is too degenerate".into()));
            }
            let fixed: Vec<usize> = idx.iter().map(|&a| zset[a]).collect();
            for &j in zset {
                if fixed.contains(&j) {
                    continue;
                }
                let mut rows = fixed.clone();
                rows.push(j);
                let xb = self.basis_matrix(&rows);
                let det = xb.clone().lu().determinant();
                let scale: f64 = rows.iter().map(|&i| self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).product();
                if det.abs() <= 1e-10 * scale {
                    continue;
                }
                if let Some(inv) = xb.try_inverse() {
                    for s in [1.0, -1.0] {
                        let d = (0..self.p).map(|a| s * inv[(a, k)]).collect();
                        edges.push(Edge { d, fixed: fixed.clone() });
                    }
                    break;
                }
            }
            // next k-combination of zset indices
            let n = zset.len();
            let mut pos = k;
            loop {
                if pos == 0 {
                    return Ok(edges);
                }
                pos -= 1;
                if idx[pos] < n - k + pos {
                    idx[pos] += 1;
                    for q in pos + 1..k {
                        idx[q] = idx[q - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    /// Moves along `d` from slope `der` to the first breakpoint after which the
    /// slope is nonnegative. Returns the row that reaches zero residual.
    fn line_search(&self, d: &[f64], r: &[f64], zero: &[bool], der: f64) -> Option<usize> {
        let mut cand: Vec<(f64, usize, f64)> = Vec::new();
        for i in 0..self.m() {
            if zero[i] {
                continue;
            }
            let c = -self.dot(i, d);
            if c == 0.0 {
                continue;
            }
            let t = -r[i] / c;
            if t > 0.0 {
                cand.push((t, i, self.w[i] * c.abs()));
            }
        }
        let cmp = |a: &(f64, usize, f64), b: &(f64, usize, f64)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let mut slope = der.min(0.0);
        let mut lo = 0;
        let mut chunk = 64;
        while lo < cand.len() {
            let hi = (lo + chunk).min(cand.len());
            let rest = &mut cand[lo..];
            if hi - lo < rest.len() {
                rest.select_nth_unstable_by(hi - lo - 1, cmp);
            }
            cand[lo..hi].sort_unstable_by(cmp);
            for &(_, i, inc) in &cand[lo..hi] {
                slope += inc;
                if slope >= 0.0 {
                    return Some(i);
                }
            }
            lo = hi;
            chunk *= 4;
        }
        None
    }

    fn zero_set(&self, theta: &[f64], r: &mut [f64], basis: &[usize]) -> (Vec<bool>, Vec<usize>) {
        let mut zero = vec![false; self.m()];
        for &b in basis {
            r[b] = 0.0;
            zero[b] = true;
        }
        for i in 0..self.m() {
            if !zero[i] && r[i].abs() <= self.zero_tol(i, theta) {
                zero[i] = true;
                r[i] = 0.0;
            }
        }
        let zset = (0..self.m()).filter(|&i| zero[i]).collect();
        (zero, zset)
    }

    fn solve(&self, start: &[f64]) -> Result<Vec<f64>> {
        let mut basis = self.initial_basis(start)?;
        let (mut theta, mut inv) = self
            .vertex(&basis)
            .ok_or_else(|| Error::Singular("initial quantile-regression basis".into()))?;
        let max_iter = 100_000 + 20 * self.m();
        let mut lex_phase = false;
        for _ in 0..max_iter {
            let mut r = self.residuals(&theta);
            let (zero, zset) = self.zero_set(&theta, &mut r, &basis);
            let pick = |edges: &[Edge]| -> Option<(usize, f64)> {
                let mut best: Option<(usize, f64)> = None;
                for (e, edge) in edges.iter().enumerate() {
                    let (der, scale) = self.derivative(&edge.d, &r, &zero);
                    let tol = 1e-11 * scale.max(f64::MIN_POSITIVE);
                    let eligible = if lex_phase { der.abs() <= tol && lex_negative(&edge.d) } else { der < -tol };
                    if !eligible {
                        continue;
                    }
                    let key = if lex_phase { 0.0 } else { der };
                    if best.is_none_or(|(_, b)| key < b) {
                        best = Some((e, key));
                    }
                }
                best
            };
            let mut edges = self.basis_edges(&basis, &inv);
            let mut choice = pick(&edges);
            if choice.is_none() && zset.len() > self.p {
                edges = self.degenerate_edges(&zset)?;
                choice = pick(&edges);
            }
            let Some((e, der)) = choice else {
                if lex_phase {
                    return Ok(theta);
                }
                lex_phase = true;
                continue;
            };
            let edge = &edges[e];
            let Some(k) = self.line_search(&edge.d, &r, &zero, der) else {
                if lex_phase {
                    return Ok(theta);
                }
                return Err(Error::Infeasible("quantile-regression objective is unbounded".into()));
            };
            let mut next = edge.fixed.clone();
            next.push(k);
            next.sort_unstable();
            match self.vertex(&next) {
                Some((t, i)) => {
                    basis = next;
                    theta = t;
                    inv = i;
                }
                None => return Err(Error::Singular("quantile-regression basis update".into())),
            }
        }
        Err(Error::Convergence { iterations: max_iter, score_norm: f64::NAN, last_iterate: theta })
    }
}

fn lex_negative(d: &[f64]) -> bool {
    let norm = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for &v in d {
        if v.abs() > 1e-12 * norm {
            return v < 0.0;
        }
    }
    false
}

fn solve_problem(prob: &Problem) -> Result<Vec<f64>> {
    let m = prob.m();
    let start = if m > WARM_START_ROWS {
        let stride = m.div_ceil(WARM_START_ROWS);
        let rows: Vec<usize> = (0..m).step_by(stride).collect();
        let sub = Problem {
            x: rows.iter().flat_map(|&i| prob.row(i).to_vec()).collect(),
            y: rows.iter().map(|&i| prob.y[i]).collect(),
            w: rows.iter().map(|&i| prob.w[i]).collect(),
            p: prob.p,
            tau: prob.tau,
        };
        solve_problem(&sub).or_else(|_| ls_theta(prob))?
    } else {
        ls_theta(prob)?
    };
    prob.solve(&start)
}

fn ls_theta(prob: &Problem) -> Result<Vec<f64>> {
    let x = DMatrix::from_row_slice(prob.m(), prob.p, &prob.x);
    let gram = linalg::weighted_gram(&x, &prob.w);
    let theta = linalg::solve_spd(&gram, &linalg::weighted_xtv(&x, &prob.w, &prob.y), "quantile start")?;
    Ok(theta.iter().copied().collect())
}

/// Hall-Sheather bandwidth on the quantile scale.
fn hall_sheather(n: usize, tau: f64) -> f64 {
    let z = special::norm_quantile(0.975);
    let q = special::norm_quantile(tau);
    let f = special::norm_pdf(q);
    let h = (n as f64).powf(-1.0 / 3.0) * z.powf(2.0 / 3.0) * (1.5 * f * f / (2.0 * q * q + 1.0)).powf(1.0 / 3.0);
    h.min(0.99 * tau.min(1.0 - tau))
}

/// Powell kernel estimate of `E[f(0 | x) w x x']`.
fn powell_hessian(x: &DMatrix<f64>, r: &[f64], w: &[f64], tau: f64) -> DMatrix<f64> {
    let n = x.nrows();
    let active: Vec<f64> = (0..n).filter(|&i| w[i] > 0.0).map(|i| r[i]).collect();
    let m = active.len();
    let hn = hall_sheather(m, tau);
    let mean = active.iter().sum::<f64>() / m as f64;
    let sd = (active.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m.max(2) - 1) as f64).sqrt();
    let mut sorted = active.clone();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let kappa = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = kappa * (special::norm_quantile(tau + hn) - special::norm_quantile(tau - hn));
    if !(h > 0.0) {
        return DMatrix::zeros(x.ncols(), x.ncols());
    }
    let kw: Vec<f64> = (0..n).map(|i| if w[i] > 0.0 && r[i].abs() <= h { w[i] } else { 0.0 }).collect();
    linalg::weighted_gram(x, &kw) / (2.0 * h * n as f64)
}

fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let pos = p * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Weighted quantile regression on an explicit design.
pub fn solve_qr(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    tau: f64,
    arm: Arm,
    columns: Vec<String>,
) -> Result<MEstimateFit> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("quantile level {tau} must lie strictly inside (0, 1)")));
    }
    check_weights(w)?;
    let (n, p) = x.shape();
    let rows: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    if rows.len() < p {
        return Err(Error::Infeasible(format!("{} positive-weight rows for {p} coefficients", rows.len())));
    }
    let gram = linalg::weighted_gram(x, w);
    let dependent = linalg::dependent_columns_gram(&gram);
    if !dependent.is_empty() {
        return Err(Error::Rank {
            what: "quantile-regression design".into(),
            dependent: dependent.iter().map(|&j| columns.get(j).cloned().unwrap_or(format!("column {j}"))).collect(),
        });
    }
    let prob = Problem {
        x: rows.iter().flat_map(|&i| (0..p).map(move |j| (i, j))).map(|(i, j)| x[(i, j)]).collect(),
        y: rows.iter().map(|&i| y[i]).collect(),
        w: rows.iter().map(|&i| w[i]).collect(),
        p,
        tau,
    };
    let theta = DVector::from_vec(solve_problem(&prob)?);
    let fitted = x * &theta;
    let r: Vec<f64> = (0..n).map(|i| if w[i] > 0.0 { y[i] - fitted[i] } else { 0.0 }).collect();
    let mut scores = DMatrix::zeros(n, p);
    let mut obj = 0.0;
    for &i in &rows {
        obj += w[i] * check_loss(tau, r[i]);
        let psi = tau - if r[i] < 0.0 { 1.0 } else { 0.0 };
        for j in 0..p {
            scores[(i, j)] = -w[i] * psi * x[(i, j)];
        }
    }
    Ok(MEstimateFit {
        arm,
        objective: ObjectiveKind::quantile(tau),
        columns,
        hessian: powell_hessian(x, &r, w, tau),
        theta,
        row_scores: scores,
        objective_value: obj / n as f64,
        iterations: 0,
    })
}

/// Weighted quantile regression of the outcome (or its log) on the covariates.
pub fn solve_weighted_qr(ds: &Dataset, ws: &WeightSet, arm: Arm, tau: f64, log_outcome: bool) -> Result<MEstimateFit> {
    let w = arm_weights(ds, ws, arm)?;
    let mut y = weighted_outcome(ds, &w)?;
    if log_outcome {
        for i in 0..y.len() {
            if w[i] > 0.0 {
                if y[i] <= 0.0 {
                    return Err(Error::Range { family: "log-outcome quantile".into(), row: i });
                }
                y[i] = y[i].ln();
            }
        }
    }
    let mut fit = solve_qr(ds.covariates(), &y, &w, tau, arm, ds.covariate_names().to_vec())?;
    fit.objective = ObjectiveKind::Quantile { tau, log_outcome };
    Ok(fit)
}
