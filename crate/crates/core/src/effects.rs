//! Treatment-effect estimands built on the second-step fits.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::linalg;
use crate::mest::{self, Family, MEstimateFit};
use crate::special;
use crate::weights::{Variant, WeightSet};

/// Density values below this make the influence function unusable.
pub const MIN_DENSITY: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Estimand {
    AteSeparate,
    AtePooled,
    Cqte { tau: f64 },
    LpCqte { tau: f64 },
    UqteDirect { tau: f64 },
    UqteRif { tau: f64 },
    ArmContrast { level: usize, reference: usize },
}

impl Estimand {
    pub fn name(&self) -> &'static str {
        match self {
            Estimand::AteSeparate => "ate_separate",
            Estimand::AtePooled => "ate_pooled",
            Estimand::Cqte { .. } => "cqte",
            Estimand::LpCqte { .. } => "lp_cqte",
            Estimand::UqteDirect { .. } => "uqte_direct",
            Estimand::UqteRif { .. } => "uqte_rif",
            Estimand::ArmContrast { .. } => "arm_contrast",
        }
    }

    pub fn tau(&self) -> Option<f64> {
        match *self {
            Estimand::Cqte { tau } | Estimand::LpCqte { tau } | Estimand::UqteDirect { tau } | Estimand::UqteRif { tau } => Some(tau),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub estimand: Estimand,
    pub variant: Variant,
    /// One value for scalar estimands, one per grid point otherwise.
    pub point: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci: Option<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub flags: Vec<String>,
}

impl EffectEstimate {
    fn new(estimand: Estimand, variant: Variant, point: Vec<f64>) -> Self {
        EffectEstimate { estimand, variant, point, se: None, ci: None, flags: Vec::new() }
    }

    pub fn value(&self) -> f64 {
        self.point[0]
    }

    /// Attaches standard errors and normal intervals at `level`.
    pub fn with_se(mut self, se: Vec<f64>, level: f64) -> Self {
        let z = special::norm_quantile(0.5 + level / 2.0);
        self.ci = Some(self.point.iter().zip(&se).map(|(p, s)| [p - z * s, p + z * s]).collect());
        self.se = Some(se);
        self
    }
}

fn mean_over(v: &[f64], rows: &[usize]) -> f64 {
    rows.iter().map(|&i| v[i]).sum::<f64>() / rows.len() as f64
}

/// Difference of mean predictions over `rows` (every kept row, observed or not).
pub fn ate_separate(fit1: &MEstimateFit, fit0: &MEstimateFit, ds: &Dataset, rows: &[usize], variant: Variant) -> Result<EffectEstimate> {
    if !fit1.objective.same_family(&fit0.objective) {
        return Err(Error::Config("arm fits use different model families".into()));
    }
    if rows.is_empty() {
        return Err(Error::Infeasible("no rows to average over".into()));
    }
    let x = ds.covariates();
    let d = mean_over(&fit1.predict(x), rows) - mean_over(&fit0.predict(x), rows);
    Ok(EffectEstimate::new(Estimand::AteSeparate, variant, vec![d]))
}

/// Single weighted GLM on `(X, W)` with weight `w1 + w0`; the effect is the
/// mean difference of predictions with the treatment dummy switched on and off.
pub fn ate_pooled(ds: &Dataset, ws: &WeightSet, family: Family, rows: &[usize]) -> Result<(EffectEstimate, MEstimateFit)> {
    if ds.levels() != 2 {
        return Err(Error::Config("pooled ATE needs a binary treatment".into()));
    }
    let z = ds.augmented_design();
    let w: Vec<f64> = ws.treated().iter().zip(ws.control()).map(|(a, b)| a + b).collect();
    let y: Vec<f64> = (0..ds.n()).map(|i| if w[i] > 0.0 { ds.outcome(i) } else { Ok(0.0) }).collect::<Result<_>>()?;
    let fit = mest::solve_glm(&z, &y, &w, family, Arm::TREATED, ds.augmented_names())?;
    let p = ds.covariates().ncols();
    let (mut on, mut off) = (0.0, 0.0);
    for &i in rows {
        let mut eta = 0.0;
        for j in 0..p {
            eta += z[(i, j)] * fit.theta[j];
        }
        on += fit.objective.predict(eta + fit.theta[p]);
        off += fit.objective.predict(eta);
    }
    let d = (on - off) / rows.len() as f64;
    Ok((EffectEstimate::new(Estimand::AtePooled, ws.variant, vec![d]), fit))
}

/// Grid over one covariate from its `lo`-quantile to its `hi`-quantile, the
/// other covariates held at their sample means.
pub fn covariate_grid(ds: &Dataset, column: &str, points: usize, lo: f64, hi: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let j = ds
        .covariate_names()
        .iter()
        .position(|c| c == column)
        .ok_or_else(|| Error::Config(format!("unknown covariate `{column}`")))?;
    if points < 2 {
        return Err(Error::Config("a grid needs at least two points".into()));
    }
    let x = ds.covariates();
    let mut col: Vec<f64> = x.column(j).iter().copied().collect();
    col.sort_by(f64::total_cmp);
    let at = |p: f64| col[((col.len() - 1) as f64 * p).round() as usize];
    let (a, b) = (at(lo), at(hi));
    let means = linalg::column_means(x);
    let values: Vec<f64> = (0..points).map(|k| a + (b - a) * k as f64 / (points - 1) as f64).collect();
    let grid = DMatrix::from_fn(points, x.ncols(), |r, c| if c == j { values[r] } else { means[c] });
    Ok((values, grid))
}

fn outside_support(ds: &Dataset, grid: &DMatrix<f64>) -> bool {
    let x = ds.covariates();
    (0..x.ncols()).any(|j| {
        let lo = x.column(j).min();
        let hi = x.column(j).max();
        grid.column(j).iter().any(|&v| v < lo || v > hi)
    })
}

/// Conditional quantile treatment effect at each grid row.
pub fn cqte(fit1: &MEstimateFit, fit0: &MEstimateFit, grid: &DMatrix<f64>, support: Option<&Dataset>, variant: Variant) -> Result<EffectEstimate> {
    let tau = match (fit1.objective, fit0.objective) {
        (mest::ObjectiveKind::Quantile { tau, .. }, mest::ObjectiveKind::Quantile { tau: t0, .. }) if tau == t0 => tau,
        _ => return Err(Error::Config("CQTE needs quantile fits at a common level".into())),
    };
    if !fit1.objective.same_family(&fit0.objective) {
        return Err(Error::Config("arm fits use different outcome transforms".into()));
    }
    let a = fit1.predict(grid);
    let b = fit0.predict(grid);
    let mut est = EffectEstimate::new(Estimand::Cqte { tau }, variant, a.iter().zip(&b).map(|(p, q)| p - q).collect());
    if support.is_some_and(|ds| outside_support(ds, grid)) {
        est.flags.push("extrapolation".into());
    }
    Ok(est)
}

/// Linear-index difference `x (theta1 - theta0)` on the grid.
pub fn lp_cqte(fit1: &MEstimateFit, fit0: &MEstimateFit, grid: &DMatrix<f64>, variant: Variant) -> Result<EffectEstimate> {
    let tau = match (fit1.objective, fit0.objective) {
        (mest::ObjectiveKind::Quantile { tau, .. }, mest::ObjectiveKind::Quantile { tau: t0, .. }) if tau == t0 => tau,
        _ => return Err(Error::Config("linear-projection CQTE needs quantile fits at a common level".into())),
    };
    let diff = &fit1.theta - &fit0.theta;
    let v = grid * diff;
    Ok(EffectEstimate::new(Estimand::LpCqte { tau }, variant, v.iter().copied().collect()))
}

/// Smallest value whose cumulative normalized weight reaches `tau`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], tau: f64) -> Result<f64> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| weights[i] > 0.0).collect();
    if idx.is_empty() {
        return Err(Error::Infeasible("no positive weights for a quantile".into()));
    }
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = idx.iter().map(|&i| weights[i]).sum();
    let target = tau * total * (1.0 - 1e-12);
    let mut cum = 0.0;
    for &i in &idx {
        cum += weights[i];
        if cum >= target {
            return Ok(values[i]);
        }
    }
    Ok(values[*idx.last().unwrap()])
}

fn arm_sample(ds: &Dataset, ws: &WeightSet, arm: Arm) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = ws.arm(arm);
    let mut ys = Vec::new();
    let mut wt = Vec::new();
    for i in 0..ds.n() {
        if w[i] > 0.0 {
            ys.push(ds.outcome(i)?);
            wt.push(w[i]);
        }
    }
    if ys.is_empty() {
        return Err(Error::Infeasible(format!("arm {} has no positive weights", arm.0)));
    }
    Ok((ys, wt))
}

/// Difference of weighted marginal quantiles.
pub fn uqte_direct(ds: &Dataset, ws: &WeightSet, tau: f64) -> Result<EffectEstimate> {
    check_tau(tau)?;
    let (y1, w1) = arm_sample(ds, ws, Arm::TREATED)?;
    let (y0, w0) = arm_sample(ds, ws, Arm::CONTROL)?;
    let q1 = weighted_quantile(&y1, &w1, tau)?;
    let q0 = weighted_quantile(&y0, &w0, tau)?;
    let mut est = EffectEstimate::new(Estimand::UqteDirect { tau }, ws.variant, vec![q1 - q0]);
    if q1 == 0.0 && q0 == 0.0 {
        est.point = vec![0.0];
        est.flags.push("degenerate_quantile".into());
    }
    Ok(est)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("quantile level {tau} must lie strictly inside (0, 1)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum Bandwidth {
    #[default]
    Silverman,
    Fixed { h: f64 },
}

/// Kernel density settings for the influence-function route (Gaussian kernel).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RifConfig {
    pub bandwidth: Bandwidth,
}

/// Weighted rule-of-thumb bandwidth `0.9 min(SD, IQR / 1.34) (sum w)^(-1/5)`.
pub fn silverman_bandwidth(y: &[f64], w: &[f64]) -> Result<f64> {
    let total: f64 = w.iter().sum();
    let mean = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total;
    let sd = (y.iter().zip(w).map(|(a, b)| b * (a - mean).powi(2)).sum::<f64>() / total).sqrt();
    let iqr = weighted_quantile(y, w, 0.75)? - weighted_quantile(y, w, 0.25)?;
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * total.powf(-0.2))
}

/// Weighted Gaussian kernel density at `at`, normalized by the weight total.
pub fn weighted_kde(y: &[f64], w: &[f64], h: f64, at: f64) -> f64 {
    let total: f64 = w.iter().sum();
    y.iter().zip(w).map(|(&v, &wi)| wi * special::norm_pdf((v - at) / h)).sum::<f64>() / (h * total)
}

/// Per-arm pieces of the influence-function route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RifArm {
    pub quantile: f64,
    pub density: f64,
    pub bandwidth: f64,
    /// Mean of the fitted influence-function regression over the averaging rows.
    pub fitted_mean: f64,
}

pub fn rif_arm(ds: &Dataset, ws: &WeightSet, arm: Arm, tau: f64, cfg: &RifConfig, rows: &[usize]) -> Result<RifArm> {
    check_tau(tau)?;
    let (ys, wt) = arm_sample(ds, ws, arm)?;
    let q = weighted_quantile(&ys, &wt, tau)?;
    let h = match cfg.bandwidth {
        Bandwidth::Silverman => silverman_bandwidth(&ys, &wt)?,
        Bandwidth::Fixed { h } => h,
    };
    if !(h > 0.0) {
        return Err(Error::Config(format!("bandwidth {h} must be positive")));
    }
    let f = weighted_kde(&ys, &wt, h, q);
    if !(f >= MIN_DENSITY) {
        return Err(Error::Instability { density: f });
    }
    let w = ws.arm(arm);
    let rif: Vec<f64> = (0..ds.n())
        .map(|i| match ds.outcome_opt(i) {
            Some(y) if w[i] > 0.0 => q + (tau - if y <= q { 1.0 } else { 0.0 }) / f,
            _ => 0.0,
        })
        .collect();
    let fit = mest::solve_ls(ds.covariates(), &rif, w, arm, ds.covariate_names().to_vec())?;
    let fitted = fit.predict(ds.covariates());
    Ok(RifArm { quantile: q, density: f, bandwidth: h, fitted_mean: mean_over(&fitted, rows) })
}

/// Unconditional quantile effect through weighted influence-function regressions.
pub fn uqte_rif(ds: &Dataset, ws: &WeightSet, tau: f64, cfg: &RifConfig, rows: &[usize]) -> Result<(EffectEstimate, [RifArm; 2])> {
    let a1 = rif_arm(ds, ws, Arm::TREATED, tau, cfg, rows)?;
    let a0 = rif_arm(ds, ws, Arm::CONTROL, tau, cfg, rows)?;
    let est = EffectEstimate::new(Estimand::UqteRif { tau }, ws.variant, vec![a1.fitted_mean - a0.fitted_mean]);
    Ok((est, [a1, a0]))
}

/// `E[Y(level)] - E[Y(reference)]` from per-level weighted mean fits.
pub fn arm_contrast_multivalued(
    ds: &Dataset,
    ws: &WeightSet,
    family: Family,
    level: usize,
    reference: usize,
    rows: &[usize],
) -> Result<EffectEstimate> {
    if level >= ds.levels() || reference >= ds.levels() {
        return Err(Error::Config("treatment level out of range".into()));
    }
    let fa = mest::solve_weighted_glm(ds, ws, Arm(level), family)?;
    let fb = mest::solve_weighted_glm(ds, ws, Arm(reference), family)?;
    let x = ds.covariates();
    let d = mean_over(&fa.predict(x), rows) - mean_over(&fb.predict(x), rows);
    Ok(EffectEstimate::new(Estimand::ArmContrast { level, reference }, ws.variant, vec![d]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::from_probabilities;

    #[test]
    fn weighted_quantile_convention() {
        assert_eq!(weighted_quantile(&[3.0, 1.0, 2.0], &[1.0, 1.0, 1.0], 0.5).unwrap(), 2.0);
        assert_eq!(weighted_quantile(&[1.0, 2.0, 3.0], &[1.0, 1.0, 2.0], 0.5).unwrap(), 2.0);
        assert_eq!(weighted_quantile(&[1.0, 2.0, 3.0], &[1.0, 1.0, 2.0], 0.51).unwrap(), 3.0);
        assert!(weighted_quantile(&[1.0], &[0.0], 0.5).is_err());
    }

    #[test]
    fn exp_equivariance_of_weighted_quantile() {
        let z = [0.3, -1.2, 0.8, 2.1, -0.4];
        let w = [0.5, 1.5, 1.0, 0.2, 2.0];
        let ez: Vec<f64> = z.iter().map(|v: &f64| v.exp()).collect();
        for tau in [0.1, 0.3, 0.5, 0.77, 0.95] {
            assert_eq!(weighted_quantile(&ez, &w, tau).unwrap(), weighted_quantile(&z, &w, tau).unwrap().exp());
        }
    }

    #[test]
    fn degenerate_quantiles_report_zero() {
        let x = DMatrix::from_row_slice(6, 1, &[0.1, 0.5, 0.9, 0.3, 0.2, 0.7]);
        let y = vec![Some(0.0), Some(0.0), Some(5.0), Some(0.0), Some(0.0), Some(3.0)];
        let ds = Dataset::new(y, vec![1, 0, 1, 0, 1, 0], x, vec!["x".into()]).unwrap();
        let ws = from_probabilities(&ds, &[0.5; 6], &[1.0 - 1e-9; 6], Variant::Unweighted).unwrap();
        let est = uqte_direct(&ds, &ws, 0.3).unwrap();
        assert_eq!(est.point, vec![0.0]);
        assert_eq!(est.flags, vec!["degenerate_quantile".to_string()]);
    }

    #[test]
    fn kde_integrates_to_one() {
        let y = [0.0, 1.0, 2.5];
        let w = [1.0, 2.0, 0.5];
        let h = 0.7;
        let step = 0.01;
        let total: f64 = (-1000..1500).map(|k| weighted_kde(&y, &w, h, k as f64 * step) * step).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}
