//! Sandwich and bootstrap variances, and Monte Carlo efficiency checks.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binary::BinaryFit;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::mest::MEstimateFit;
use crate::rng;

/// Eigenvalue floor used for psd checks.
pub const PSD_FLOOR: f64 = -1e-8;
pub const BOOTSTRAP_MAX_FAILURE_SHARE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// First-stage scores projected out of the second-step scores.
    Adjusted,
    /// Outer product of the raw scores, treating the weights as known.
    Unadjusted,
    Bootstrap,
}

/// How the ATE variance treats the conditional-mean model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    CorrectMean,
    MisspecifiedMean,
}

#[derive(Debug, Clone)]
pub struct SandwichComponents {
    pub sigma: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub hessian: DMatrix<f64>,
    /// Smallest eigenvalue of `sigma - omega`.
    pub min_eig_gap: f64,
}

#[derive(Debug, Clone)]
pub struct VarianceEstimate {
    pub mode: VarianceMode,
    pub covariance: DMatrix<f64>,
    pub components: Option<SandwichComponents>,
    pub replications: Option<usize>,
    pub failures: usize,
    /// A projection fell back to the pseudo-inverse.
    pub used_pinv: bool,
}

impl VarianceEstimate {
    pub fn se(&self) -> Vec<f64> {
        (0..self.covariance.nrows()).map(|j| self.covariance[(j, j)].max(0.0).sqrt()).collect()
    }
}

/// Stacks the first-stage score matrices column-wise.
fn stack_scores(first_stage: &[&BinaryFit], rows: &[usize]) -> Option<DMatrix<f64>> {
    if first_stage.is_empty() {
        return None;
    }
    let k: usize = first_stage.iter().map(|f| f.scores.ncols()).sum();
    let mut f = DMatrix::zeros(rows.len(), k);
    let mut off = 0;
    for fit in first_stage {
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..fit.scores.ncols() {
                f[(r, off + j)] = fit.scores[(i, j)];
            }
        }
        off += fit.scores.ncols();
    }
    Some(f)
}

fn take_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, j| m[(rows[r], j)])
}

/// Residual of the least-squares projection of the columns of `l` on the
/// columns of `f`, using population-moment notation `E(l f') E(f f')^-1 f`.
pub fn project_out(l: &DMatrix<f64>, f: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let ff = linalg::cross_moment(f, f);
    let fl = linalg::cross_moment(f, l);
    let (inv, used_pinv) = linalg::robust_inverse_sym(&ff);
    let coef = inv * fl;
    (l - f * coef, used_pinv)
}

/// `H^-1 Omega H^-1 / N` for one arm. `first_stage` lists the fits whose
/// estimation enters the weights; it is ignored in unadjusted mode.
pub fn sandwich_theta(fit: &MEstimateFit, first_stage: &[&BinaryFit], mode: VarianceMode) -> Result<VarianceEstimate> {
    let rows: Vec<usize> = (0..fit.row_scores.nrows()).collect();
    sandwich_on_rows(fit, first_stage, mode, &rows)
}

pub fn sandwich_on_rows(
    fit: &MEstimateFit,
    first_stage: &[&BinaryFit],
    mode: VarianceMode,
    rows: &[usize],
) -> Result<VarianceEstimate> {
    let n_all = fit.row_scores.nrows();
    for f in first_stage {
        if f.scores.nrows() != n_all {
            return Err(Error::Config("first-stage scores are not aligned with the second step".into()));
        }
    }
    let n = rows.len();
    let l = take_rows(&fit.row_scores, rows);
    let sigma = linalg::cross_moment(&l, &l);
    let (omega, used_pinv) = match (mode, stack_scores(first_stage, rows)) {
        (VarianceMode::Adjusted, Some(f)) => {
            let (u, p) = project_out(&l, &f);
            (linalg::cross_moment(&u, &u), p)
        }
        (VarianceMode::Bootstrap, _) => return Err(Error::Config("bootstrap is not a sandwich mode".into())),
        _ => (sigma.clone(), false),
    };
    let hessian = &fit.hessian * (n_all as f64 / n as f64);
    let hinv = linalg::inverse(&hessian, "second-step Hessian")?;
    let cov = linalg::symmetrize(&(&hinv * &omega * hinv.transpose())) / n as f64;
    let min_eig_gap = linalg::min_eigenvalue(&(&sigma - &omega));
    Ok(VarianceEstimate {
        mode,
        covariance: cov,
        components: Some(SandwichComponents { sigma, omega, hessian, min_eig_gap }),
        replications: None,
        failures: 0,
        used_pinv,
    })
}

/// Delta-method variance of `mean_i m(x_i, theta1) - mean_i m(x_i, theta0)`
/// averaged over `rows` of `x`.
pub fn ate_variance(
    fit1: &MEstimateFit,
    fit0: &MEstimateFit,
    x: &DMatrix<f64>,
    rows: &[usize],
    first_stage: &[&BinaryFit],
    mean_mode: MeanMode,
) -> Result<VarianceEstimate> {
    if fit1.theta.len() != x.ncols() || fit0.theta.len() != x.ncols() {
        return Err(Error::Config("arm fits do not share the covariate matrix".into()));
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::Infeasible("no rows to average over".into()));
    }
    let p1 = fit1.predict(x);
    let p0 = fit0.predict(x);
    let diff: Vec<f64> = rows.iter().map(|&i| p1[i] - p0[i]).collect();
    let delta = diff.iter().sum::<f64>() / n as f64;
    let a: Vec<f64> = diff.iter().map(|d| d - delta).collect();
    let j1 = fit1.mean_gradient(x, rows);
    let j0 = fit0.mean_gradient(x, rows);
    let n_all = fit1.row_scores.nrows();
    let scale = n_all as f64 / n as f64;
    match mean_mode {
        MeanMode::CorrectMean => {
            let v1 = sandwich_on_rows(fit1, &[], VarianceMode::Unadjusted, rows)?;
            let v0 = sandwich_on_rows(fit0, &[], VarianceMode::Unadjusted, rows)?;
            let var_a = a.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let total = var_a / n as f64
                + (j1.transpose() * &v1.covariance * &j1)[0]
                + (j0.transpose() * &v0.covariance * &j0)[0];
            Ok(scalar_estimate(VarianceMode::Unadjusted, total, false))
        }
        MeanMode::MisspecifiedMean => {
            let mut u1 = take_rows(&fit1.row_scores, rows);
            let mut u0 = take_rows(&fit0.row_scores, rows);
            let mut used_pinv = false;
            if let Some(f) = stack_scores(first_stage, rows) {
                let (r1, a1) = project_out(&u1, &f);
                let (r0, a0) = project_out(&u0, &f);
                u1 = r1;
                u0 = r0;
                used_pinv = a1 || a0;
            }
            let h1 = linalg::inverse(&(&fit1.hessian * scale), "treated Hessian")?;
            let h0 = linalg::inverse(&(&fit0.hessian * scale), "control Hessian")?;
            let c1: DVector<f64> = h1.transpose() * &j1;
            let c0: DVector<f64> = h0.transpose() * &j0;
            let psi1 = &u1 * &c1;
            let psi0 = &u0 * &c0;
            let mut s = 0.0;
            for r in 0..n {
                let psi = a[r] - psi1[r] + psi0[r];
                s += psi * psi;
            }
            Ok(scalar_estimate(VarianceMode::Adjusted, s / n as f64 / n as f64, used_pinv))
        }
    }
}

fn scalar_estimate(mode: VarianceMode, v: f64, used_pinv: bool) -> VarianceEstimate {
    VarianceEstimate {
        mode,
        covariance: DMatrix::from_element(1, 1, v),
        components: None,
        replications: None,
        failures: 0,
        used_pinv,
    }
}

/// Replicate estimates of a pairs bootstrap.
#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub estimates: Vec<Vec<f64>>,
    pub failures: usize,
    pub variance: VarianceEstimate,
}

impl BootstrapResult {
    pub fn se(&self) -> Vec<f64> {
        self.variance.se()
    }

    /// Percentile interval of coordinate `j`.
    pub fn percentile_interval(&self, j: usize, level: f64) -> (f64, f64) {
        let mut v: Vec<f64> = self.estimates.iter().map(|e| e[j]).collect();
        v.sort_by(f64::total_cmp);
        let a = (1.0 - level) / 2.0;
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        };
        (q(a), q(1.0 - a))
    }
}

/// Index sets for `b` resamples of `n` rows, one ChaCha stream per replicate.
pub fn bootstrap_indices(n: usize, b: usize, seed: u64) -> Vec<Vec<usize>> {
    (0..b)
        .map(|r| {
            let mut g = rng::stream(seed, rng::BOOTSTRAP_STREAM_BASE + r as u64);
            (0..n).map(|_| g.random_range(0..n)).collect()
        })
        .collect()
}

/// Nonparametric pairs bootstrap: resample full rows and rerun `pipeline`,
/// which must return the same number of estimates for every replicate.
pub fn pairs_bootstrap<F>(ds: &Dataset, pipeline: F, b: usize, seed: u64) -> Result<BootstrapResult>
where
    F: Fn(&Dataset) -> Result<Vec<f64>> + Sync,
{
    if b < 2 {
        return Err(Error::Config("bootstrap needs at least two replications".into()));
    }
    bootstrap_with_indices(ds, pipeline, &bootstrap_indices(ds.n(), b, seed))
}

/// Bootstrap over caller-supplied index sets.
pub fn bootstrap_with_indices<F>(ds: &Dataset, pipeline: F, index_sets: &[Vec<usize>]) -> Result<BootstrapResult>
where
    F: Fn(&Dataset) -> Result<Vec<f64>> + Sync,
{
    let results: Vec<Result<Vec<f64>>> = index_sets
        .par_iter()
        .map(|rows| ds.subset(rows).and_then(|d| pipeline(&d)))
        .collect();
    let total = results.len();
    let estimates: Vec<Vec<f64>> = results.into_iter().filter_map(|r| r.ok()).filter(|e| e.iter().all(|v| v.is_finite())).collect();
    let failures = total - estimates.len();
    if failures as f64 > BOOTSTRAP_MAX_FAILURE_SHARE * total as f64 || estimates.len() < 2 {
        return Err(Error::Reliability { failed: failures, total });
    }
    let k = estimates[0].len();
    if estimates.iter().any(|e| e.len() != k) {
        return Err(Error::Config("bootstrap replicates returned different lengths".into()));
    }
    let covariance = sample_covariance(&estimates);
    Ok(BootstrapResult {
        variance: VarianceEstimate {
            mode: VarianceMode::Bootstrap,
            covariance,
            components: None,
            replications: Some(estimates.len()),
            failures,
            used_pinv: false,
        },
        estimates,
        failures,
    })
}

/// Covariance across rows of `draws` with the `n - 1` divisor, accumulated in order.
pub fn sample_covariance(draws: &[Vec<f64>]) -> DMatrix<f64> {
    let r = draws.len();
    let k = draws.first().map_or(0, |d| d.len());
    let mut mean = vec![0.0; k];
    for d in draws {
        for j in 0..k {
            mean[j] += d[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= r as f64);
    let mut cov = DMatrix::zeros(k, k);
    for d in draws {
        for a in 0..k {
            for b in 0..k {
                cov[(a, b)] += (d[a] - mean[a]) * (d[b] - mean[b]);
            }
        }
    }
    cov / (r.max(2) - 1) as f64
}

/// Identifies a Monte Carlo run so paired series can be matched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunKey {
    pub scenario: String,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
}

/// Per-replicate values of one estimator on one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub key: RunKey,
    pub label: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Informational,
}

/// Outcome of a "`lhs` is no larger than `rhs`" comparison with Monte Carlo slack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub claim: String,
    pub statistic: String,
    pub lhs_label: String,
    pub rhs_label: String,
    pub lhs: f64,
    pub rhs: f64,
    pub mc_se: f64,
    pub slack: f64,
    pub verdict: Verdict,
}

fn paired(lhs: &Series, rhs: &Series) -> Result<usize> {
    if lhs.key != rhs.key {
        return Err(Error::Config(format!(
            "run registry mismatch: `{}` ({:?}) vs `{}` ({:?})",
            lhs.label, lhs.key, rhs.label, rhs.key
        )));
    }
    if lhs.values.len() != rhs.values.len() || lhs.values.len() < 3 {
        return Err(Error::Config("paired series need equal lengths of at least 3".into()));
    }
    Ok(lhs.values.len())
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, s)
}

fn sd_of(v: &[f64]) -> f64 {
    mean_var(v).1.sqrt()
}

/// `Var(lhs) <= Var(rhs) + slack * MC-SE`, the MC-SE from the paired
/// squared deviations.
pub fn variance_ordering(claim: &str, lhs: &Series, rhs: &Series, slack: f64) -> Result<OrderingCheck> {
    let r = paired(lhs, rhs)?;
    let (ml, vl) = mean_var(&lhs.values);
    let (mr, vr) = mean_var(&rhs.values);
    let d: Vec<f64> = (0..r).map(|i| (lhs.values[i] - ml).powi(2) - (rhs.values[i] - mr).powi(2)).collect();
    let mc_se = sd_of(&d) / (r as f64).sqrt();
    Ok(OrderingCheck {
        claim: claim.into(),
        statistic: "variance".into(),
        lhs_label: lhs.label.clone(),
        rhs_label: rhs.label.clone(),
        lhs: vl,
        rhs: vr,
        mc_se,
        slack,
        verdict: if vl <= vr + slack * mc_se { Verdict::Pass } else { Verdict::Fail },
    })
}

/// `SD(lhs) <= SD(rhs) + slack * MC-SE`, the MC-SE by the delta method on
/// paired squared deviations.
pub fn sd_ordering(claim: &str, lhs: &Series, rhs: &Series, slack: f64) -> Result<OrderingCheck> {
    let r = paired(lhs, rhs)?;
    let (ml, vl) = mean_var(&lhs.values);
    let (mr, vr) = mean_var(&rhs.values);
    let (sl, sr) = (vl.sqrt(), vr.sqrt());
    let d: Vec<f64> = (0..r)
        .map(|i| (lhs.values[i] - ml).powi(2) / (2.0 * sl.max(f64::MIN_POSITIVE)) - (rhs.values[i] - mr).powi(2) / (2.0 * sr.max(f64::MIN_POSITIVE)))
        .collect();
    let mc_se = sd_of(&d) / (r as f64).sqrt();
    Ok(OrderingCheck {
        claim: claim.into(),
        statistic: "sd".into(),
        lhs_label: lhs.label.clone(),
        rhs_label: rhs.label.clone(),
        lhs: sl,
        rhs: sr,
        mc_se,
        slack,
        verdict: if sl <= sr + slack * mc_se { Verdict::Pass } else { Verdict::Fail },
    })
}

/// Efficiency-ordering checks between estimator variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    /// Estimating the weights does no worse than using the true ones.
    pub estimated_vs_known: Option<OrderingCheck>,
    /// Under the information-matrix equality, weighting does not help.
    pub unweighted_vs_weighted: Option<OrderingCheck>,
    /// With a correct conditional model, estimated and known weights agree.
    pub no_gain: Option<OrderingCheck>,
    /// Smallest eigenvalue of `Sigma - Omega` over replicates, per arm.
    pub min_eig_gap: Option<f64>,
    pub psd_verdict: Option<Verdict>,
}

/// Builds the report. Series pairs must come from the same run.
pub fn efficiency_report(
    estimated_vs_known: Option<(&Series, &Series)>,
    unweighted_vs_weighted: Option<(&Series, &Series)>,
    no_gain: Option<(&Series, &Series)>,
    min_eig_gap: Option<f64>,
) -> Result<EfficiencyReport> {
    let slack = 2.0;
    let c1 = estimated_vs_known
        .map(|(e, k)| variance_ordering("estimated weights variance <= known weights variance", e, k, slack))
        .transpose()?;
    let c3 = unweighted_vs_weighted
        .map(|(u, d)| sd_ordering("unweighted SD <= d-weighted SD", u, d, slack))
        .transpose()?;
    let c2 = no_gain
        .map(|(e, k)| {
            variance_ordering("estimated and known weights give equal variance", e, k, slack).map(|mut c| {
                c.verdict = Verdict::Informational;
                c
            })
        })
        .transpose()?;
    Ok(EfficiencyReport {
        estimated_vs_known: c1,
        unweighted_vs_weighted: c3,
        no_gain: c2,
        min_eig_gap,
        psd_verdict: min_eig_gap.map(|m| if m >= PSD_FLOOR { Verdict::Pass } else { Verdict::Fail }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Arm;
    use crate::mest::{solve_ls, ObjectiveKind};

    fn key() -> RunKey {
        RunKey { scenario: "s".into(), n: 10, reps: 4, seed: 1 }
    }

    #[test]
    fn mismatched_runs_are_rejected() {
        let a = Series { key: key(), label: "a".into(), values: vec![1.0, 2.0, 3.0, 4.0] };
        let mut b = a.clone();
        b.key.seed = 2;
        assert!(matches!(variance_ordering("c", &a, &b, 2.0), Err(Error::Config(_))));
    }

    #[test]
    fn ordering_of_identical_series_passes() {
        let a = Series { key: key(), label: "a".into(), values: vec![1.0, 2.0, 4.0, 3.0] };
        let c = variance_ordering("c", &a, &a, 2.0).unwrap();
        assert_eq!(c.verdict, Verdict::Pass);
        assert_eq!(c.mc_se, 0.0);
    }

    #[test]
    fn exact_fit_has_zero_ate_variance() {
        let x = DMatrix::from_row_slice(4, 2, &[1., 0., 1., 1., 1., 2., 1., 3.]);
        let y: Vec<f64> = (0..4).map(|i| 1.0 + 2.0 * x[(i, 1)]).collect();
        let fit = solve_ls(&x, &y, &[1.0; 4], Arm::TREATED, vec![]).unwrap();
        assert_eq!(fit.objective, ObjectiveKind::LeastSquares);
        let rows = [0, 1, 2, 3];
        for mode in [MeanMode::CorrectMean, MeanMode::MisspecifiedMean] {
            let v = ate_variance(&fit, &fit, &x, &rows, &[], mode).unwrap();
            assert!(v.covariance[(0, 0)].abs() < 1e-12);
        }
    }

    #[test]
    fn identical_resamples_give_zero_se() {
        let x = DMatrix::from_row_slice(3, 1, &[0.1, 0.5, 0.9]);
        let ds = Dataset::new(vec![Some(1.0), Some(2.0), Some(4.0)], vec![1, 0, 1], x, vec!["x".into()]).unwrap();
        let idx = vec![vec![0, 2, 1], vec![0, 2, 1]];
        let res = bootstrap_with_indices(&ds, |d| Ok(vec![d.outcome(0)? + d.outcome(1)?]), &idx).unwrap();
        assert_eq!(res.se(), vec![0.0]);
    }

    #[test]
    fn failing_replicates_trigger_reliability_error() {
        let x = DMatrix::from_row_slice(3, 1, &[0.1, 0.5, 0.9]);
        let ds = Dataset::new(vec![Some(1.0), Some(2.0), Some(4.0)], vec![1, 0, 1], x, vec!["x".into()]).unwrap();
        let res = pairs_bootstrap(&ds, |_| Err(Error::Infeasible("x".into())), 10, 1);
        assert!(matches!(res, Err(Error::Reliability { failed: 10, total: 10 })));
    }
}
