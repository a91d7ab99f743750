//! End-to-end estimation: fit weights, trim, solve, compute effects and SEs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::binary::{self, BinaryFit, BinaryFitReport, LinkKind, MultinomialFit};
use crate::data::{Arm, ColumnSubset, Dataset};
use crate::effects::{self, EffectEstimate, Estimand, RifArm, RifConfig};
use crate::error::{Error, Result};
use crate::inference::{self, MeanMode, VarianceMode};
use crate::linalg;
use crate::mest::{self, Family, MEstimateFit, ObjectiveKind};
use crate::weights::{self, TrimReport, Variant, WeightSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbModel {
    pub link: LinkKind,
    #[serde(default)]
    pub columns: ColumnSubset,
}

impl ProbModel {
    pub fn new(link: LinkKind, columns: ColumnSubset) -> Self {
        ProbModel { link, columns }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MeanModel {
    LeastSquares,
    Glm { family: Family },
}

impl MeanModel {
    fn solve(&self, ds: &Dataset, ws: &WeightSet, arm: Arm) -> Result<MEstimateFit> {
        match *self {
            MeanModel::LeastSquares => mest::solve_weighted_ls(ds, ws, arm),
            MeanModel::Glm { family } => mest::solve_weighted_glm(ds, ws, arm, family),
        }
    }

    fn family(&self) -> Family {
        match *self {
            MeanModel::LeastSquares => Family::GaussianIdentity,
            MeanModel::Glm { family } => family,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSpec {
    pub taus: Vec<f64>,
    /// Fit the conditional quantile on `ln y` and exponentiate predictions.
    #[serde(default)]
    pub log_outcome: bool,
    /// Conditional quantile fits (CQTE and its linear projection on a grid).
    #[serde(default = "yes")]
    pub conditional: bool,
    #[serde(default = "yes")]
    pub uqte_direct: bool,
    #[serde(default)]
    pub uqte_rif: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub propensity: ProbModel,
    pub missingness: ProbModel,
    pub variants: Vec<Variant>,
    /// Conditional-mean model for the ATE; `None` skips mean effects.
    pub mean: Option<MeanModel>,
    #[serde(default)]
    pub pooled: bool,
    /// Analytic ATE standard errors; `None` skips them.
    pub mean_mode: Option<MeanMode>,
    pub quantiles: Option<QuantileSpec>,
    #[serde(default)]
    pub rif: RifConfig,
    pub trim: Option<[f64; 2]>,
    #[serde(default = "default_level")]
    pub ci_level: f64,
}

fn default_level() -> f64 {
    0.95
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("no estimator variants requested".into()));
        }
        if self.mean.is_none() && self.quantiles.is_none() {
            return Err(Error::Config("no estimands requested".into()));
        }
        if self.pooled && self.mean.is_none() {
            return Err(Error::Config("pooled ATE needs a mean model".into()));
        }
        if let Some(q) = &self.quantiles {
            if q.taus.is_empty() {
                return Err(Error::Config("quantile effects need at least one level".into()));
            }
            if let Some(t) = q.taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
                return Err(Error::Config(format!("quantile level {t} must lie strictly inside (0, 1)")));
            }
        }
        if let Some([lo, hi]) = self.trim {
            if !(0.0..1.0).contains(&lo) || !(lo < hi && hi <= 1.0) {
                return Err(Error::Config(format!("invalid trimming bounds ({lo}, {hi})")));
            }
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Config("confidence level must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

pub struct FirstStage {
    pub propensity: BinaryFit,
    pub missingness: BinaryFit,
}

impl FirstStage {
    /// The fits whose estimation enters `variant`'s weights.
    pub fn entering(&self, variant: Variant) -> Vec<&BinaryFit> {
        let mut v = Vec::new();
        if variant.uses_propensity() {
            v.push(&self.propensity);
        }
        if variant.uses_missingness() {
            v.push(&self.missingness);
        }
        v
    }
}

pub fn fit_first_stage(ds: &Dataset, spec: &PipelineSpec) -> Result<FirstStage> {
    Ok(FirstStage {
        propensity: binary::fit_propensity(ds, &spec.propensity.columns, spec.propensity.link)?,
        missingness: binary::fit_missingness(ds, &spec.missingness.columns, spec.missingness.link)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmFitSummary {
    pub arm: usize,
    pub objective: ObjectiveKind,
    pub columns: Vec<String>,
    pub theta: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<Vec<f64>>,
    pub objective_value: f64,
    pub iterations: usize,
}

fn summarize(fit: &MEstimateFit, se: Option<Vec<f64>>) -> ArmFitSummary {
    ArmFitSummary {
        arm: fit.arm.0,
        objective: fit.objective,
        columns: fit.columns.clone(),
        theta: fit.theta.iter().copied().collect(),
        se,
        objective_value: fit.objective_value,
        iterations: fit.iterations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileEffects {
    pub tau: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cqte: Option<EffectEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lp_cqte: Option<EffectEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uqte_direct: Option<EffectEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uqte_rif: Option<EffectEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rif_arms: Option<[RifArm; 2]>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub arm_fits: Vec<ArmFitSummary>,
}

/// Second-step diagnostics of the variance structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceDiagnostics {
    /// Smallest eigenvalue of `Sigma - Omega` over both arms.
    pub min_eig_gap: f64,
    /// `max |mean(l b')|` over both arms (missingness scores).
    pub cross_missingness: f64,
    /// `max |mean(l d')|` over both arms (propensity scores).
    pub cross_propensity: f64,
    pub used_pinv: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantOutput {
    pub variant: Variant,
    /// Label used in exports; differs from the variant name for known weights.
    pub label: String,
    pub effective_n: usize,
    pub clipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trim: Option<TrimReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ate: Option<EffectEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ate_pooled: Option<EffectEstimate>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub arm_fits: Vec<ArmFitSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub quantiles: Vec<QuantileEffects>,
    /// Multivalued treatments: each level against level 0.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub contrasts: Vec<EffectEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<VarianceDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultinomialReport {
    pub columns: Vec<String>,
    /// One coefficient vector per non-base level.
    pub coefficients: Vec<Vec<f64>>,
    pub iterations: usize,
    pub clipped: usize,
}

impl From<&MultinomialFit> for MultinomialReport {
    fn from(f: &MultinomialFit) -> Self {
        MultinomialReport {
            columns: f.columns.clone(),
            coefficients: f.coefficients.column_iter().map(|c| c.iter().copied().collect()).collect(),
            iterations: f.iterations,
            clipped: f.clipped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum PropensityReport {
    Binary(BinaryFitReport),
    Multinomial(MultinomialReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub propensity: PropensityReport,
    pub missingness: BinaryFitReport,
    pub variants: Vec<VariantOutput>,
}

fn cross_sup(l: &DMatrix<f64>, f: &DMatrix<f64>) -> f64 {
    let m = linalg::cross_moment(l, f);
    linalg::sup_norm(m.as_slice())
}

/// Weight set for one variant, trimmed per the spec.
pub fn weights_for(ds: &Dataset, fs: &FirstStage, variant: Variant, trim: Option<[f64; 2]>) -> Result<WeightSet> {
    let ws = weights::compute_weights(&fs.propensity, &fs.missingness, ds, variant)?;
    match trim {
        Some([lo, hi]) => weights::trim(&ws, lo, hi),
        None => Ok(ws),
    }
}

/// Everything downstream of a given weight set. `first_stage` lists the
/// fits whose estimation should be accounted for in the variance; `all_scores`
/// (propensity, missingness) feed the orthogonality diagnostics.
pub fn run_variant(
    ds: &Dataset,
    spec: &PipelineSpec,
    ws: &WeightSet,
    label: &str,
    first_stage: &[&BinaryFit],
    all_scores: Option<(&BinaryFit, &BinaryFit)>,
    grid: Option<&DMatrix<f64>>,
) -> Result<VariantOutput> {
    let rows = ws.kept_rows();
    let x = ds.covariates();
    let mut out = VariantOutput {
        variant: ws.variant,
        label: label.to_string(),
        effective_n: ws.effective_n(),
        clipped: ws.clipped,
        trim: ws.trim_report(),
        ate: None,
        ate_pooled: None,
        arm_fits: Vec::new(),
        quantiles: Vec::new(),
        contrasts: Vec::new(),
        diagnostics: None,
    };
    if let Some(mean) = &spec.mean {
        let f1 = mean.solve(ds, ws, Arm::TREATED)?;
        let f0 = mean.solve(ds, ws, Arm::CONTROL)?;
        let mut ate = effects::ate_separate(&f1, &f0, ds, &rows, ws.variant)?;
        let mut ses = [None, None];
        if let Some(mode) = spec.mean_mode {
            let v = inference::ate_variance(&f1, &f0, x, &rows, first_stage, mode)?;
            ate = ate.with_se(v.se(), spec.ci_level);
            let vmode = match mode {
                MeanMode::CorrectMean => VarianceMode::Unadjusted,
                MeanMode::MisspecifiedMean => VarianceMode::Adjusted,
            };
            for (k, f) in [&f1, &f0].into_iter().enumerate() {
                ses[k] = Some(inference::sandwich_on_rows(f, first_stage, vmode, &rows)?.se());
            }
        }
        let mut gap = f64::INFINITY;
        let mut used_pinv = false;
        let (mut cb, mut cd) = (0.0f64, 0.0f64);
        for f in [&f1, &f0] {
            let v = inference::sandwich_on_rows(f, first_stage, VarianceMode::Adjusted, &rows)?;
            if let Some(c) = &v.components {
                gap = gap.min(c.min_eig_gap);
            }
            used_pinv |= v.used_pinv;
            if let Some((ps, miss)) = all_scores {
                cb = cb.max(cross_sup(&f.row_scores, &miss.scores));
                cd = cd.max(cross_sup(&f.row_scores, &ps.scores));
            }
        }
        out.diagnostics = Some(VarianceDiagnostics { min_eig_gap: gap, cross_missingness: cb, cross_propensity: cd, used_pinv });
        out.arm_fits = vec![summarize(&f1, ses[0].take()), summarize(&f0, ses[1].take())];
        out.ate = Some(ate);
        if spec.pooled {
            out.ate_pooled = Some(effects::ate_pooled(ds, ws, mean.family(), &rows)?.0);
        }
    }
    if let Some(q) = &spec.quantiles {
        for &tau in &q.taus {
            let mut qe = QuantileEffects {
                tau,
                cqte: None,
                lp_cqte: None,
                uqte_direct: None,
                uqte_rif: None,
                rif_arms: None,
                arm_fits: Vec::new(),
            };
            if q.conditional {
                let f1 = mest::solve_weighted_qr(ds, ws, Arm::TREATED, tau, q.log_outcome)?;
                let f0 = mest::solve_weighted_qr(ds, ws, Arm::CONTROL, tau, q.log_outcome)?;
                if let Some(g) = grid {
                    qe.cqte = Some(effects::cqte(&f1, &f0, g, Some(ds), ws.variant)?);
                    qe.lp_cqte = Some(effects::lp_cqte(&f1, &f0, g, ws.variant)?);
                }
                qe.arm_fits = vec![summarize(&f1, None), summarize(&f0, None)];
            }
            if q.uqte_direct {
                qe.uqte_direct = Some(effects::uqte_direct(ds, ws, tau)?);
            }
            if q.uqte_rif {
                let (e, arms) = effects::uqte_rif(ds, ws, tau, &spec.rif, &rows)?;
                qe.uqte_rif = Some(e);
                qe.rif_arms = Some(arms);
            }
            out.quantiles.push(qe);
        }
    }
    Ok(out)
}

/// Full pipeline on one dataset.
pub fn run_pipeline(ds: &Dataset, spec: &PipelineSpec, grid: Option<&DMatrix<f64>>) -> Result<PipelineOutput> {
    spec.validate()?;
    if ds.levels() > 2 {
        return run_multivalued(ds, spec);
    }
    let fs = fit_first_stage(ds, spec)?;
    let mut variants = Vec::with_capacity(spec.variants.len());
    for &v in &spec.variants {
        let ws = weights_for(ds, &fs, v, spec.trim)?;
        let entering = fs.entering(v);
        variants.push(run_variant(ds, spec, &ws, v.name(), &entering, Some((&fs.propensity, &fs.missingness)), grid)?);
    }
    Ok(PipelineOutput {
        propensity: PropensityReport::Binary(fs.propensity.report()),
        missingness: fs.missingness.report(),
        variants,
    })
}

/// Multivalued treatments: multinomial-logit propensity, per-level mean
/// fits and contrasts against level 0.
fn run_multivalued(ds: &Dataset, spec: &PipelineSpec) -> Result<PipelineOutput> {
    let mean = spec
        .mean
        .ok_or_else(|| Error::Config("multivalued treatments support mean contrasts only".into()))?;
    if spec.quantiles.is_some() || spec.pooled {
        return Err(Error::Config("multivalued treatments support mean contrasts only".into()));
    }
    if spec.mean_mode.is_some() {
        return Err(Error::Config("analytic standard errors need a binary treatment; use the bootstrap".into()));
    }
    let ps = binary::fit_multinomial_propensity(ds, &spec.propensity.columns)?;
    let miss = binary::fit_missingness(ds, &spec.missingness.columns, spec.missingness.link)?;
    let mut variants = Vec::with_capacity(spec.variants.len());
    for &v in &spec.variants {
        let mut ws = weights::compute_weights_multivalued(&ps, &miss, ds, v)?;
        if let Some([lo, hi]) = spec.trim {
            ws = weights::trim(&ws, lo, hi)?;
        }
        let rows = ws.kept_rows();
        let contrasts = (1..ds.levels())
            .map(|g| effects::arm_contrast_multivalued(ds, &ws, mean.family(), g, 0, &rows))
            .collect::<Result<Vec<_>>>()?;
        variants.push(VariantOutput {
            variant: v,
            label: v.name().to_string(),
            effective_n: ws.effective_n(),
            clipped: ws.clipped,
            trim: ws.trim_report(),
            ate: None,
            ate_pooled: None,
            arm_fits: Vec::new(),
            quantiles: Vec::new(),
            contrasts,
            diagnostics: None,
        });
    }
    Ok(PipelineOutput {
        propensity: PropensityReport::Multinomial((&ps).into()),
        missingness: miss.report(),
        variants,
    })
}

/// A labelled scalar produced by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointLabel {
    pub variant: String,
    pub estimand: String,
    pub tau: Option<f64>,
    pub index: Option<usize>,
}

impl PipelineOutput {
    /// Every point estimate in a fixed order, with labels.
    pub fn points(&self) -> Vec<(PointLabel, f64)> {
        let mut out = Vec::new();
        for v in &self.variants {
            let mut push = |est: &EffectEstimate, name: &str, tau: Option<f64>| {
                let grid = est.point.len() > 1;
                for (k, &p) in est.point.iter().enumerate() {
                    out.push((
                        PointLabel {
                            variant: v.label.clone(),
                            estimand: name.to_string(),
                            tau,
                            index: grid.then_some(k),
                        },
                        p,
                    ));
                }
            };
            if let Some(e) = &v.ate {
                push(e, "ate", None);
            }
            if let Some(e) = &v.ate_pooled {
                push(e, "ate_pooled", None);
            }
            for e in &v.contrasts {
                let name = match e.estimand {
                    Estimand::ArmContrast { level, .. } => format!("contrast_{level}"),
                    _ => e.estimand.name().to_string(),
                };
                push(e, &name, None);
            }
            for q in &v.quantiles {
                for (e, name) in [(&q.cqte, "cqte"), (&q.lp_cqte, "lp_cqte"), (&q.uqte_direct, "uqte_direct"), (&q.uqte_rif, "uqte_rif")] {
                    if let Some(e) = e {
                        push(e, name, Some(q.tau));
                    }
                }
            }
        }
        out
    }

    pub fn point_values(&self) -> Vec<f64> {
        self.points().into_iter().map(|(_, v)| v).collect()
    }

    /// Replaces analytic SEs by bootstrap ones (and percentile intervals).
    pub fn attach_bootstrap(&mut self, boot: &inference::BootstrapResult, level: f64) {
        let se = boot.se();
        let mut k = 0;
        let mut attach = |est: &mut EffectEstimate| {
            let n = est.point.len();
            let s: Vec<f64> = se[k..k + n].to_vec();
            let ci: Vec<[f64; 2]> = (k..k + n)
                .map(|j| {
                    let (a, b) = boot.percentile_interval(j, level);
                    [a, b]
                })
                .collect();
            est.se = Some(s);
            est.ci = Some(ci);
            k += n;
        };
        for v in &mut self.variants {
            if let Some(e) = &mut v.ate {
                attach(e);
            }
            if let Some(e) = &mut v.ate_pooled {
                attach(e);
            }
            for e in &mut v.contrasts {
                attach(e);
            }
            for q in &mut v.quantiles {
                for e in [&mut q.cqte, &mut q.lp_cqte, &mut q.uqte_direct, &mut q.uqte_rif].into_iter().flatten() {
                    attach(e);
                }
            }
        }
    }
}
