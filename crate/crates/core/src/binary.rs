//! Binary-response maximum likelihood for the propensity and missingness
//! probabilities, and a multinomial logit for multivalued treatments.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Arm, ColumnSubset, Dataset};
use crate::error::{Error, Result};
use crate::linalg;
use crate::special;

pub const PROB_FLOOR: f64 = 1e-6;
pub const SCORE_TOL: f64 = 1e-8;
pub const MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Logit,
    Probit,
}

impl LinkKind {
    pub fn cdf(self, eta: f64) -> f64 {
        match self {
            LinkKind::Logit => special::logistic(eta),
            LinkKind::Probit => special::norm_cdf(eta),
        }
    }

    pub fn pdf(self, eta: f64) -> f64 {
        match self {
            LinkKind::Logit => {
                let p = special::logistic(eta);
                p * (1.0 - p)
            }
            LinkKind::Probit => special::norm_pdf(eta),
        }
    }

    /// `y ln F(eta) + (1 - y) ln(1 - F(eta))`.
    fn loglik(self, eta: f64, y: f64) -> f64 {
        let (lp, lq) = match self {
            LinkKind::Logit => (-special::softplus(-eta), -special::softplus(eta)),
            LinkKind::Probit => (special::log_norm_cdf(eta), special::log_norm_cdf(-eta)),
        };
        let mut v = 0.0;
        if y != 0.0 {
            v += y * lp;
        }
        if y != 1.0 {
            v += (1.0 - y) * lq;
        }
        v
    }

    /// Derivative of the row log-likelihood with respect to the index, and
    /// the negative second derivative.
    pub fn score_terms(self, eta: f64, y: f64) -> (f64, f64) {
        match self {
            LinkKind::Logit => {
                let p = special::logistic(eta);
                (y - p, p * (1.0 - p))
            }
            LinkKind::Probit => {
                let l1 = special::inv_mills_lower(eta);
                let l0 = special::inv_mills_upper(eta);
                let g = y * l1 - (1.0 - y) * l0;
                let h = y * l1 * (eta + l1) + (1.0 - y) * l0 * (l0 - eta);
                (g, h)
            }
        }
    }
}

/// Fitted binary-response model.
///
/// `scores` rows are the per-observation log-likelihood gradients at the
/// estimate (times the row weight for weighted fits). `information` is the
/// mean outer product of those rows; `hessian` is the mean negative Hessian.
#[derive(Debug, Clone)]
pub struct BinaryFit {
    pub link: LinkKind,
    pub columns: Vec<String>,
    pub coefficients: DVector<f64>,
    pub fitted_probs: Vec<f64>,
    pub scores: DMatrix<f64>,
    pub information: DMatrix<f64>,
    pub hessian: DMatrix<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub clipped: usize,
}

/// Serializable summary of a [`BinaryFit`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BinaryFitReport {
    pub link: LinkKind,
    pub columns: Vec<String>,
    pub coefficients: Vec<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub clipped: usize,
    pub mean_fitted: f64,
}

impl BinaryFit {
    pub fn report(&self) -> BinaryFitReport {
        let n = self.fitted_probs.len().max(1) as f64;
        BinaryFitReport {
            link: self.link,
            columns: self.columns.clone(),
            coefficients: self.coefficients.iter().copied().collect(),
            log_likelihood: self.log_likelihood,
            converged: self.converged,
            iterations: self.iterations,
            clipped: self.clipped,
            mean_fitted: self.fitted_probs.iter().sum::<f64>() / n,
        }
    }

    pub fn predict(&self, design: &DMatrix<f64>) -> Vec<f64> {
        let eta = design * &self.coefficients;
        eta.iter().map(|&e| clip(self.link.cdf(e)).0).collect()
    }

    pub fn score_mean(&self) -> DVector<f64> {
        linalg::column_means(&self.scores)
    }
}

fn clip(p: f64) -> (f64, bool) {
    if p < PROB_FLOOR {
        (PROB_FLOOR, true)
    } else if p > 1.0 - PROB_FLOOR {
        (1.0 - PROB_FLOOR, true)
    } else {
        (p, false)
    }
}

fn weighted_loglik(x: &DMatrix<f64>, y: &[f64], w: &[f64], link: LinkKind, beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    let mut ll = 0.0;
    for i in 0..y.len() {
        if w[i] != 0.0 {
            ll += w[i] * link.loglik(eta[i], y[i]);
        }
    }
    ll / y.len() as f64
}

/// Mean score and mean negative Hessian.
fn derivatives(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    link: LinkKind,
    beta: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = y.len();
    let eta = x * beta;
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    for i in 0..n {
        if w[i] != 0.0 {
            let (gi, hi) = link.score_terms(eta[i], y[i]);
            g[i] = gi;
            h[i] = w[i] * hi;
        }
    }
    let score = linalg::weighted_xtv(x, w, &g) / n as f64;
    let hess = linalg::weighted_gram(x, &h) / n as f64;
    (score, hess)
}

/// Newton-Raphson with step halving on the weighted Bernoulli log-likelihood.
/// `y` may be fractional in `[0, 1]` (quasi-likelihood use).
fn newton(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    link: LinkKind,
    start: DVector<f64>,
) -> Result<(DVector<f64>, usize)> {
    let mut beta = start;
    let mut ll = weighted_loglik(x, y, w, link, &beta);
    for iter in 0..=MAX_ITER {
        let (score, hess) = derivatives(x, y, w, link, &beta);
        let norm = linalg::sup_norm(score.as_slice());
        if !norm.is_finite() {
            return Err(Error::Convergence {
                iterations: iter,
                score_norm: norm,
                last_iterate: beta.iter().copied().collect(),
            });
        }
        if norm <= SCORE_TOL {
            // one more full step pushes the score to rounding level
            if let Ok(dir) = linalg::solve_spd(&hess, &score, "") {
                let cand = &beta + dir;
                let (s2, _) = derivatives(x, y, w, link, &cand);
                if linalg::sup_norm(s2.as_slice()) <= norm {
                    beta = cand;
                }
            }
            return Ok((beta, iter));
        }
        if iter == MAX_ITER {
            return Err(Error::Convergence {
                iterations: iter,
                score_norm: norm,
                last_iterate: beta.iter().copied().collect(),
            });
        }
        let dir = linalg::solve_spd(&hess, &score, "binary-response Hessian")?;
        let mut step = 1.0;
        loop {
            let cand = &beta + &dir * step;
            let cand_ll = weighted_loglik(x, y, w, link, &cand);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-14 * ll.abs() {
                beta = cand;
                ll = cand_ll;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                return Err(Error::Convergence {
                    iterations: iter,
                    score_norm: norm,
                    last_iterate: beta.iter().copied().collect(),
                });
            }
        }
        if beta.iter().any(|b| b.abs() > 1e6) {
            return Err(Error::Separation("coefficients diverge".into()));
        }
    }
    unreachable!()
}

/// Fits `P(y = 1 | x) = F(x'beta)` by maximum likelihood.
pub fn fit_binary_response(design: &DMatrix<f64>, response: &[f64], link: LinkKind) -> Result<BinaryFit> {
    let w = vec![1.0; response.len()];
    fit_binary_weighted(design, response, &w, link)
}

/// Weighted (quasi-)maximum likelihood; scores carry the row weight.
pub fn fit_binary_weighted(
    design: &DMatrix<f64>,
    response: &[f64],
    weights: &[f64],
    link: LinkKind,
) -> Result<BinaryFit> {
    fit_binary_from(design, response, weights, link, DVector::zeros(design.ncols()))
}

pub(crate) fn fit_binary_from(
    design: &DMatrix<f64>,
    response: &[f64],
    weights: &[f64],
    link: LinkKind,
    start: DVector<f64>,
) -> Result<BinaryFit> {
    let (n, k) = design.shape();
    if response.len() != n || weights.len() != n {
        return Err(Error::Config("design, response and weights differ in length".into()));
    }
    let mut any = false;
    let (mut has_pos, mut has_neg) = (false, false);
    for i in 0..n {
        if weights[i] > 0.0 {
            any = true;
            has_pos |= response[i] > 0.0;
            has_neg |= response[i] < 1.0;
        }
    }
    if !any {
        return Err(Error::Infeasible("all weights are zero".into()));
    }
    if !(has_pos && has_neg) {
        return Err(Error::Separation("response is constant".into()));
    }
    let gram = linalg::weighted_gram(design, weights);
    let dependent = linalg::dependent_columns_gram(&gram);
    if !dependent.is_empty() {
        return Err(Error::Rank {
            what: "binary-response design".into(),
            dependent: dependent.iter().map(|j| format!("column {j}")).collect(),
        });
    }
    let (beta, iterations) = newton(design, response, weights, link, start)?;
    let eta = design * &beta;
    let perfect = (0..n)
        .filter(|&i| weights[i] > 0.0)
        .all(|i| (response[i] - link.cdf(eta[i])).abs() < PROB_FLOOR);
    if perfect {
        return Err(Error::Separation("fitted probabilities reproduce the response exactly".into()));
    }
    let mut fitted = Vec::with_capacity(n);
    let mut clipped = 0;
    let mut scores = DMatrix::zeros(n, k);
    let mut hw = vec![0.0; n];
    for i in 0..n {
        let (p, c) = clip(link.cdf(eta[i]));
        fitted.push(p);
        clipped += c as usize;
        if weights[i] != 0.0 {
            let (g, h) = link.score_terms(eta[i], response[i]);
            let s = weights[i] * g;
            for j in 0..k {
                scores[(i, j)] = s * design[(i, j)];
            }
            hw[i] = weights[i] * h;
        }
    }
    let information = linalg::cross_moment(&scores, &scores);
    let hessian = linalg::weighted_gram(design, &hw) / n as f64;
    let log_likelihood = weighted_loglik(design, response, weights, link, &beta) * n as f64;
    Ok(BinaryFit {
        link,
        columns: (0..k).map(|j| format!("x{j}")).collect(),
        coefficients: beta,
        fitted_probs: fitted,
        scores,
        information,
        hessian,
        log_likelihood,
        converged: true,
        iterations,
        clipped,
    })
}

fn named(mut fit: BinaryFit, names: Vec<String>) -> BinaryFit {
    fit.columns = names;
    fit
}

/// Propensity score `G(X, gamma)`: regression of `W` on the chosen covariate columns.
pub fn fit_propensity(ds: &Dataset, spec: &ColumnSubset, link: LinkKind) -> Result<BinaryFit> {
    if ds.levels() != 2 {
        return Err(Error::Config("binary propensity needs a binary treatment".into()));
    }
    let cols = spec.resolve(ds.covariate_names())?;
    let x = linalg::select_columns(ds.covariates(), &cols);
    let names = cols.iter().map(|&j| ds.covariate_names()[j].clone()).collect();
    let y = ds.treatment_indicator(Arm::TREATED);
    fit_binary_response(&x, &y, link).map(|f| named(f, names))
}

/// Missingness probability `R(X, W, delta)`: regression of `S` on columns of `Z = (X, W)`.
pub fn fit_missingness(ds: &Dataset, spec: &ColumnSubset, link: LinkKind) -> Result<BinaryFit> {
    let all = ds.augmented_names();
    let cols = spec.resolve(&all)?;
    let z = linalg::select_columns(&ds.augmented_design(), &cols);
    let names = cols.iter().map(|&j| all[j].clone()).collect();
    fit_binary_response(&z, &ds.observed_indicator(), link).map(|f| named(f, names))
}

/// `R(X, W = g)` for every row: the missingness model evaluated with the
/// treatment column(s) set to level `g`.
pub fn missingness_at_level(ds: &Dataset, fit: &BinaryFit, level: usize) -> Result<Vec<f64>> {
    let all = ds.augmented_names();
    let mut z = ds.augmented_design();
    let p = ds.covariates().ncols();
    for i in 0..ds.n() {
        for j in p..z.ncols() {
            z[(i, j)] = 0.0;
        }
        if level > 0 {
            z[(i, p + level - 1)] = 1.0;
        }
    }
    let cols = fit
        .columns
        .iter()
        .map(|c| {
            all.iter()
                .position(|a| a == c)
                .ok_or_else(|| Error::Config(format!("fit column `{c}` not in design")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(fit.predict(&linalg::select_columns(&z, &cols)))
}

/// Multinomial logit for a multivalued treatment, level 0 as the base.
#[derive(Debug, Clone)]
pub struct MultinomialFit {
    pub columns: Vec<String>,
    /// K x (L - 1) coefficients; column `g - 1` belongs to level `g`.
    pub coefficients: DMatrix<f64>,
    /// N x L probabilities, rows summing to one.
    pub probs: DMatrix<f64>,
    pub scores: DMatrix<f64>,
    pub information: DMatrix<f64>,
    pub iterations: usize,
    pub clipped: usize,
}

fn softmax_row(x: &DMatrix<f64>, i: usize, beta: &DMatrix<f64>, out: &mut [f64]) {
    let k = x.ncols();
    out[0] = 0.0;
    for g in 1..out.len() {
        let mut e = 0.0;
        for j in 0..k {
            e += x[(i, j)] * beta[(j, g - 1)];
        }
        out[g] = e;
    }
    let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in out.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in out.iter_mut() {
        *v /= s;
    }
}

fn multinomial_loglik(x: &DMatrix<f64>, w: &[usize], beta: &DMatrix<f64>, levels: usize) -> f64 {
    let mut p = vec![0.0; levels];
    let mut ll = 0.0;
    for i in 0..x.nrows() {
        softmax_row(x, i, beta, &mut p);
        ll += p[w[i]].ln();
    }
    ll / x.nrows() as f64
}

/// Mean score (stacked by level) and mean negative Hessian.
fn multinomial_derivatives(
    x: &DMatrix<f64>,
    w: &[usize],
    beta: &DMatrix<f64>,
    levels: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let (n, k) = x.shape();
    let m = levels - 1;
    let mut score = DVector::zeros(k * m);
    let mut hess = DMatrix::zeros(k * m, k * m);
    let mut p = vec![0.0; levels];
    for i in 0..n {
        softmax_row(x, i, beta, &mut p);
        for g in 1..levels {
            let r = (w[i] == g) as u8 as f64 - p[g];
            for a in 0..k {
                score[(g - 1) * k + a] += r * x[(i, a)];
            }
            for h in 1..levels {
                let c = if g == h { p[g] * (1.0 - p[g]) } else { -p[g] * p[h] };
                for a in 0..k {
                    let xa = c * x[(i, a)];
                    for b in 0..k {
                        hess[((g - 1) * k + a, (h - 1) * k + b)] += xa * x[(i, b)];
                    }
                }
            }
        }
    }
    (score / n as f64, hess / n as f64)
}

/// Multinomial logit of the treatment level on the chosen covariates.
pub fn fit_multinomial_propensity(ds: &Dataset, spec: &ColumnSubset) -> Result<MultinomialFit> {
    let levels = ds.levels();
    let cols = spec.resolve(ds.covariate_names())?;
    let x = linalg::select_columns(ds.covariates(), &cols);
    let w = ds.treatment_levels();
    let (n, k) = x.shape();
    for g in 0..levels {
        if !w.contains(&g) {
            return Err(Error::Separation(format!("treatment level {g} never observed")));
        }
    }
    let m = levels - 1;
    let mut beta = DMatrix::zeros(k, m);
    let mut ll = multinomial_loglik(&x, w, &beta, levels);
    let mut iterations = 0;
    loop {
        let (score, hess) = multinomial_derivatives(&x, w, &beta, levels);
        let norm = linalg::sup_norm(score.as_slice());
        if norm <= SCORE_TOL {
            if let Ok(dir) = linalg::solve_spd(&hess, &score, "") {
                let cand = &beta + DMatrix::from_column_slice(k, m, dir.as_slice());
                let (s2, _) = multinomial_derivatives(&x, w, &cand, levels);
                if linalg::sup_norm(s2.as_slice()) <= norm {
                    beta = cand;
                }
            }
            break;
        }
        if iterations == MAX_ITER {
            return Err(Error::Convergence {
                iterations,
                score_norm: norm,
                last_iterate: beta.iter().copied().collect(),
            });
        }
        let dir = linalg::solve_spd(&hess, &score, "multinomial Hessian")?;
        let dir = DMatrix::from_column_slice(k, m, dir.as_slice());
        let mut step = 1.0;
        loop {
            let cand = &beta + &dir * step;
            let cand_ll = multinomial_loglik(&x, w, &cand, levels);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-14 * ll.abs() {
                beta = cand;
                ll = cand_ll;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                return Err(Error::Convergence {
                    iterations,
                    score_norm: norm,
                    last_iterate: beta.iter().copied().collect(),
                });
            }
        }
        iterations += 1;
    }
    let mut probs = DMatrix::zeros(n, levels);
    let mut scores = DMatrix::zeros(n, k * m);
    let mut p = vec![0.0; levels];
    let mut clipped = 0;
    for i in 0..n {
        softmax_row(&x, i, &beta, &mut p);
        for g in 1..levels {
            let r = (w[i] == g) as u8 as f64 - p[g];
            for a in 0..k {
                scores[(i, (g - 1) * k + a)] = r * x[(i, a)];
            }
        }
        clipped += clip_simplex(&mut p) as usize;
        for g in 0..levels {
            probs[(i, g)] = p[g];
        }
    }
    let information = linalg::cross_moment(&scores, &scores);
    Ok(MultinomialFit {
        columns: cols.iter().map(|&j| ds.covariate_names()[j].clone()).collect(),
        coefficients: beta,
        probs,
        scores,
        information,
        iterations,
        clipped,
    })
}

/// Raises entries below the floor and takes the excess from the largest entry.
fn clip_simplex(p: &mut [f64]) -> bool {
    let mut excess = 0.0;
    for v in p.iter_mut() {
        if *v < PROB_FLOOR {
            excess += PROB_FLOOR - *v;
            *v = PROB_FLOOR;
        }
    }
    if excess > 0.0 {
        let (imax, _) = p
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        p[imax] -= excess;
        true
    } else {
        false
    }
}
