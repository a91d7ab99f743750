//! Monte Carlo designs: a large seeded population, repeated subsamples,
//! and the three estimator variants on each.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binary::LinkKind;
use crate::data::{Arm, ColumnSubset, Dataset};
use crate::error::{Error, Result};
use crate::inference::{self, EfficiencyReport, MeanMode, OrderingCheck, RunKey, Series, Verdict};
use crate::linalg;
use crate::mest::{self, Family};
use crate::pipeline::{self, MeanModel, PipelineSpec, ProbModel, QuantileSpec, VariantOutput};
use crate::rng;
use crate::special;
use crate::weights::{self, Variant};

/// Share of failed replicates above which a scenario is unreliable.
pub const MAX_FAILURE_SHARE: f64 = 0.05;
pub const DEFAULT_POPULATION: usize = 1_000_000;
pub const KNOWN_LABEL: &str = "d_weighted_known";

const GAMMA: [f64; 3] = [0.05, -0.2, -0.11];
/// Coefficients on (1, W, X1, X2).
const DELTA: [f64; 4] = [0.01, 0.03, 0.05, -0.28];
const X_MEAN: [f64; 2] = [1.0, 2.0];
const X_COV: [[f64; 2]; 2] = [[3.0, 0.2], [0.2, 2.0]];
const U_COV: [[f64; 2]; 2] = [[1.0, 0.2], [0.2, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    AteBinary,
    QteLognormal,
}

impl Design {
    pub fn name(self) -> &'static str {
        match self {
            Design::AteBinary => "ate_binary",
            Design::QteLognormal => "qte_lognormal",
        }
    }

    /// Outcome-index coefficients `(theta_0, theta_1)` on (1, X1, X2).
    pub fn theta(self) -> [[f64; 3]; 2] {
        match self {
            Design::AteBinary => [[-1.0, 1.0, 1.0], [0.0, 1.0, 1.0]],
            Design::QteLognormal => [[0.2, 0.24, -0.45], [0.1, -0.36, -0.1]],
        }
    }

    fn outcome(self, index: f64) -> f64 {
        match self {
            Design::AteBinary => f64::from(index > 0.0),
            Design::QteLognormal => index.exp(),
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Design {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ate_binary" => Ok(Design::AteBinary),
            "qte_lognormal" => Ok(Design::QteLognormal),
            _ => Err(Error::Config(format!("unknown design `{s}`"))),
        }
    }
}

/// How a cell estimates the second step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SecondStep {
    Mean { model: MeanModel, mean_mode: MeanMode },
    Quantile { log_outcome: bool },
}

/// Estimation choices for one cell of the misspecification tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub id: String,
    pub design: Design,
    pub case: u8,
    pub propensity: ProbModel,
    pub missingness: ProbModel,
    pub second: SecondStep,
}

fn probit_without_x1() -> ProbModel {
    ProbModel::new(LinkKind::Probit, ColumnSubset::without(&["x1"]))
}

fn logit_all() -> ProbModel {
    ProbModel::new(LinkKind::Logit, ColumnSubset::All)
}

/// Every registered cell.
pub fn registry() -> Vec<CellSpec> {
    let ls = SecondStep::Mean { model: MeanModel::LeastSquares, mean_mode: MeanMode::MisspecifiedMean };
    let mut cells = vec![
        (Design::AteBinary, 1, logit_all(), logit_all(), ls),
        (Design::AteBinary, 2, probit_without_x1(), probit_without_x1(), ls),
        (
            Design::AteBinary,
            3,
            probit_without_x1(),
            probit_without_x1(),
            SecondStep::Mean {
                model: MeanModel::Glm { family: Family::BernoulliProbit },
                mean_mode: MeanMode::CorrectMean,
            },
        ),
    ];
    // The quantile design's misspecified missingness model is on X only.
    let r_on_x = ProbModel::new(LinkKind::Probit, ColumnSubset::Only(vec!["intercept".into(), "x2".into()]));
    cells.push((Design::QteLognormal, 1, logit_all(), logit_all(), SecondStep::Quantile { log_outcome: false }));
    cells.push((Design::QteLognormal, 2, probit_without_x1(), r_on_x.clone(), SecondStep::Quantile { log_outcome: false }));
    cells.push((Design::QteLognormal, 3, probit_without_x1(), r_on_x, SecondStep::Quantile { log_outcome: true }));
    cells
        .into_iter()
        .map(|(design, case, propensity, missingness, second)| CellSpec {
            id: cell_id(design, case),
            design,
            case,
            propensity,
            missingness,
            second,
        })
        .collect()
}

fn cell_id(design: Design, case: u8) -> String {
    let prefix = match design {
        Design::AteBinary => "ate",
        Design::QteLognormal => "qte",
    };
    format!("{prefix}-case{case}")
}

pub fn cell(design: Design, case: u8) -> Result<CellSpec> {
    registry()
        .into_iter()
        .find(|c| c.design == design && c.case == case)
        .ok_or_else(|| Error::Config(format!("no cell for {design} case {case}")))
}

/// Looks a cell up by id, e.g. `ate-case1`.
pub fn cell_by_id(id: &str) -> Result<CellSpec> {
    registry()
        .into_iter()
        .find(|c| c.id == id)
        .ok_or_else(|| {
            let ids: Vec<String> = registry().into_iter().map(|c| c.id).collect();
            Error::Config(format!("unknown scenario `{id}`; registered: {}", ids.join(", ")))
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub design: Design,
    pub case: u8,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    #[serde(default = "default_population")]
    pub population_size: usize,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// Also run the d-weighted estimator with the true probabilities.
    #[serde(default)]
    pub known_weights: bool,
    /// Influence-function route for the unconditional quantile effect.
    #[serde(default = "default_true")]
    pub uqte_rif: bool,
}

fn default_population() -> usize {
    DEFAULT_POPULATION
}

fn default_taus() -> Vec<f64> {
    vec![0.25, 0.5, 0.75]
}

fn default_grid_points() -> usize {
    25
}

fn default_true() -> bool {
    true
}

impl ScenarioConfig {
    pub fn new(design: Design, case: u8, n: usize, reps: usize, seed: u64) -> Self {
        ScenarioConfig {
            design,
            case,
            n,
            reps,
            seed,
            population_size: DEFAULT_POPULATION,
            taus: default_taus(),
            grid_points: default_grid_points(),
            known_weights: false,
            uqte_rif: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.case) {
            return Err(Error::Config(format!("case {} is not one of 1, 2, 3", self.case)));
        }
        if self.reps == 0 {
            return Err(Error::Config("need at least one replication".into()));
        }
        if self.n == 0 || self.n > self.population_size {
            return Err(Error::Config(format!(
                "sample size {} must lie in 1..={}",
                self.n, self.population_size
            )));
        }
        if self.design == Design::QteLognormal {
            if self.taus.is_empty() {
                return Err(Error::Config("quantile design needs at least one level".into()));
            }
            if let Some(t) = self.taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
                return Err(Error::Config(format!("quantile level {t} must lie strictly inside (0, 1)")));
            }
            if self.grid_points < 2 {
                return Err(Error::Config("a grid needs at least two points".into()));
            }
        }
        Ok(())
    }

    pub fn cell(&self) -> Result<CellSpec> {
        cell(self.design, self.case)
    }

    /// Pipeline specification for the configured cell.
    pub fn pipeline_spec(&self) -> Result<PipelineSpec> {
        let cell = self.cell()?;
        let (mean, mean_mode, quantiles) = match cell.second {
            SecondStep::Mean { model, mean_mode } => (Some(model), Some(mean_mode), None),
            SecondStep::Quantile { log_outcome } => (
                None,
                None,
                Some(QuantileSpec {
                    taus: self.taus.clone(),
                    log_outcome,
                    conditional: true,
                    uqte_direct: true,
                    uqte_rif: self.uqte_rif,
                }),
            ),
        };
        Ok(PipelineSpec {
            propensity: cell.propensity,
            missingness: cell.missingness,
            variants: Variant::ALL.to_vec(),
            mean,
            pooled: false,
            mean_mode,
            quantiles,
            rif: Default::default(),
            trim: None,
            ci_level: 0.95,
        })
    }
}

/// A seeded finite population with both potential outcomes and the true
/// assignment and observation probabilities.
pub struct Population {
    pub design: Design,
    pub seed: u64,
    /// Columns (1, X1, X2).
    pub x: DMatrix<f64>,
    /// Potential outcomes, indexed by arm.
    pub y: [Vec<f64>; 2],
    pub w: Vec<u8>,
    pub s: Vec<u8>,
    /// `P(W = 1 | X)`.
    pub g: Vec<f64>,
    /// `P(S = 1 | X, W)` at each row's realized treatment.
    pub r: Vec<f64>,
    lp: Mutex<BTreeMap<u64, Arc<[Vec<f64>; 2]>>>,
}

fn chol2(c: [[f64; 2]; 2]) -> [f64; 3] {
    let l11 = c[0][0].sqrt();
    let l21 = c[1][0] / l11;
    [l11, l21, (c[1][1] - l21 * l21).sqrt()]
}

/// Draws the population from its own stream; rows are generated in order.
pub fn generate_population(design: Design, seed: u64, size: usize) -> Population {
    let mut rng = rng::stream(seed, rng::POPULATION_STREAM);
    let lx = chol2(X_COV);
    let lu = chol2(U_COV);
    let theta = design.theta();
    let mut x = DMatrix::zeros(size, 3);
    let mut y = [vec![0.0; size], vec![0.0; size]];
    let mut w = vec![0u8; size];
    let mut s = vec![0u8; size];
    let mut g = vec![0.0; size];
    let mut r = vec![0.0; size];
    for i in 0..size {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let uw: f64 = rng.random();
        let us: f64 = rng.random();
        let x1 = X_MEAN[0] + lx[0] * z1;
        let x2 = X_MEAN[1] + lx[1] * z1 + lx[2] * z2;
        let u = [lu[0] * e1, lu[1] * e1 + lu[2] * e2];
        x[(i, 0)] = 1.0;
        x[(i, 1)] = x1;
        x[(i, 2)] = x2;
        for (k, t) in theta.iter().enumerate() {
            y[k][i] = design.outcome(t[0] + t[1] * x1 + t[2] * x2 + u[k]);
        }
        g[i] = special::logistic(GAMMA[0] + GAMMA[1] * x1 + GAMMA[2] * x2);
        let wi = u8::from(uw < g[i]);
        r[i] = special::logistic(DELTA[0] + DELTA[1] * f64::from(wi) + DELTA[2] * x1 + DELTA[3] * x2);
        w[i] = wi;
        s[i] = u8::from(us < r[i]);
    }
    Population { design, seed, x, y, w, s, g, r, lp: Mutex::new(BTreeMap::new()) }
}

type PopKey = (Design, u64, usize);

/// Populations are cached per (design, seed, size).
pub fn population(design: Design, seed: u64, size: usize) -> Arc<Population> {
    static CACHE: OnceLock<Mutex<HashMap<PopKey, Arc<Population>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (design, seed, size);
    if let Some(p) = cache.lock().unwrap().get(&key) {
        return p.clone();
    }
    let pop = Arc::new(generate_population(design, seed, size));
    cache.lock().unwrap().entry(key).or_insert(pop).clone()
}

fn order_quantile(v: &[f64], tau: f64) -> f64 {
    let mut v = v.to_vec();
    let k = ((tau * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    *v.select_nth_unstable_by(k, f64::total_cmp).1
}

impl Population {
    pub fn size(&self) -> usize {
        self.w.len()
    }

    /// Observed outcome, or `None` where `S = 0`.
    pub fn observed(&self, i: usize) -> Option<f64> {
        (self.s[i] == 1).then(|| self.y[usize::from(self.w[i])][i])
    }

    pub fn ate(&self) -> f64 {
        self.y[1].iter().zip(&self.y[0]).map(|(a, b)| a - b).sum::<f64>() / self.size() as f64
    }

    pub fn p_treated(&self) -> f64 {
        self.w.iter().map(|&v| f64::from(v)).sum::<f64>() / self.size() as f64
    }

    pub fn p_observed(&self) -> f64 {
        self.s.iter().map(|&v| f64::from(v)).sum::<f64>() / self.size() as f64
    }

    /// Marginal `tau`-quantile of a potential outcome.
    pub fn quantile(&self, arm: Arm, tau: f64) -> f64 {
        order_quantile(&self.y[arm.0], tau)
    }

    /// R-squared of the linear projection of each potential outcome on X.
    pub fn r_squared(&self) -> [f64; 2] {
        let ones = vec![1.0; self.size()];
        let gram = linalg::weighted_gram(&self.x, &ones);
        [0, 1].map(|k| {
            let yv = DVector::from_column_slice(&self.y[k]);
            let xty = self.x.transpose() * &yv;
            let beta = linalg::solve_spd(&gram, &xty, "population design").expect("population design has full rank");
            let fitted = &self.x * beta;
            let mean = yv.mean();
            let sst: f64 = yv.iter().map(|v| (v - mean).powi(2)).sum();
            let ssr: f64 = yv.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            1.0 - ssr / sst
        })
    }

    /// Linear-projection coefficients of the conditional `tau`-quantile of
    /// each potential outcome on X, indexed by arm.
    pub fn lp_constants(&self, tau: f64) -> Result<Arc<[Vec<f64>; 2]>> {
        let key = tau.to_bits();
        if let Some(v) = self.lp.lock().unwrap().get(&key) {
            return Ok(v.clone());
        }
        let ones = vec![1.0; self.size()];
        let names = vec!["intercept".to_string(), "x1".to_string(), "x2".to_string()];
        let fits: Vec<Result<Vec<f64>>> = [0usize, 1]
            .par_iter()
            .map(|&k| {
                mest::solve_qr(&self.x, &self.y[k], &ones, tau, Arm(k), names.clone())
                    .map(|f| f.theta.iter().copied().collect())
            })
            .collect();
        let mut it = fits.into_iter();
        let v0 = it.next().unwrap()?;
        let v1 = it.next().unwrap()?;
        let v = Arc::new([v0, v1]);
        Ok(self.lp.lock().unwrap().entry(key).or_insert(v).clone())
    }

    /// True conditional `tau`-quantile of `Y(g)` at covariates (1, x1, x2).
    pub fn conditional_quantile(&self, arm: Arm, tau: f64, x1: f64, x2: f64) -> f64 {
        let t = self.design.theta()[arm.0];
        self.design.outcome(t[0] + t[1] * x1 + t[2] * x2 + special::norm_quantile(tau))
    }

    /// Without-replacement subsample of `n` rows on the replicate's own stream.
    pub fn draw_rows(&self, n: usize, rep: usize) -> Vec<usize> {
        let mut g = rng::stream(self.seed, rng::SAMPLE_STREAM_BASE + rep as u64);
        rand::seq::index::sample(&mut g, self.size(), n).into_vec()
    }

    pub fn sample(&self, rows: &[usize]) -> Result<Dataset> {
        let outcome = rows.iter().map(|&i| self.observed(i)).collect();
        let treatment = rows.iter().map(|&i| usize::from(self.w[i])).collect();
        let cov = DMatrix::from_fn(rows.len(), 2, |r, j| self.x[(rows[r], j + 1)]);
        Dataset::new(outcome, treatment, cov, vec!["x1".into(), "x2".into()])
    }
}

/// Dataset for replicate `rep`: deterministic per (population seed, rep).
pub fn draw_sample(pop: &Population, n: usize, rep: usize) -> Result<Dataset> {
    if n > pop.size() {
        return Err(Error::Config(format!("sample size {n} exceeds the population ({})", pop.size())));
    }
    pop.sample(&pop.draw_rows(n, rep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTruth {
    pub tau: f64,
    pub q_treated: f64,
    pub q_control: f64,
    pub uqte: f64,
    pub lp_treated: Vec<f64>,
    pub lp_control: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truths {
    pub design: Design,
    pub seed: u64,
    pub population_size: usize,
    pub p_treated: f64,
    pub p_observed: f64,
    /// Indexed by arm: (control, treated).
    pub r_squared: [f64; 2],
    pub ate: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub quantiles: Vec<QuantileTruth>,
}

/// Population truths; linear-projection constants only for the quantile design.
pub fn truths(pop: &Population, taus: &[f64]) -> Result<Truths> {
    let mut quantiles = Vec::new();
    if pop.design == Design::QteLognormal {
        for &tau in taus {
            let lp = pop.lp_constants(tau)?;
            let q1 = pop.quantile(Arm::TREATED, tau);
            let q0 = pop.quantile(Arm::CONTROL, tau);
            quantiles.push(QuantileTruth {
                tau,
                q_treated: q1,
                q_control: q0,
                uqte: q1 - q0,
                lp_treated: lp[1].clone(),
                lp_control: lp[0].clone(),
            });
        }
    }
    Ok(Truths {
        design: pop.design,
        seed: pop.seed,
        population_size: pop.size(),
        p_treated: pop.p_treated(),
        p_observed: pop.p_observed(),
        r_squared: pop.r_squared(),
        ate: pop.ate(),
        quantiles,
    })
}

/// One scalar from one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub rep: usize,
    pub variant: String,
    pub estimand: String,
    pub tau: Option<f64>,
    pub value: f64,
}

/// Grid of x1 values (x2 at its population mean) for conditional effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x1: Vec<f64>,
    pub x2: f64,
}

impl Grid {
    fn from_population(pop: &Population, points: usize) -> Grid {
        let col: Vec<f64> = pop.x.column(1).iter().copied().collect();
        let lo = order_quantile(&col, 0.05);
        let hi = order_quantile(&col, 0.95);
        let x2 = pop.x.column(2).mean();
        Grid {
            x1: (0..points).map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64).collect(),
            x2,
        }
    }

    pub fn design(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.x1.len(), 3, |r, c| match c {
            0 => 1.0,
            1 => self.x1[r],
            _ => self.x2,
        })
    }
}

/// Monte Carlo distribution of a grid-valued estimand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub estimand: String,
    pub tau: f64,
    pub x1: Vec<f64>,
    pub truth: Vec<f64>,
    /// Per-variant mean curve across replicates.
    pub mean: BTreeMap<String, Vec<f64>>,
    /// Per-variant pointwise SD across replicates.
    pub sd: BTreeMap<String, Vec<f64>>,
}

impl CurveSummary {
    /// Pointwise Monte Carlo standard error of the mean curve.
    pub fn mc_se(&self, variant: &str, reps: usize) -> Option<Vec<f64>> {
        self.sd.get(variant).map(|s| s.iter().map(|v| v / (reps as f64).sqrt()).collect())
    }

    pub fn bias(&self, variant: &str) -> Option<Vec<f64>> {
        self.mean.get(variant).map(|m| m.iter().zip(&self.truth).map(|(a, b)| a - b).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub estimand: String,
    pub tau: Option<f64>,
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub mc_se: f64,
    pub truth: Option<f64>,
    pub bias: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub config: ScenarioConfig,
    pub cell: CellSpec,
    pub truths: Truths,
    pub completed: usize,
    pub failures: usize,
    pub records: Vec<Record>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub curves: Vec<CurveSummary>,
    pub summary: Vec<SummaryRow>,
}

impl McResult {
    /// Per-replicate values of one series, in replicate order.
    pub fn series(&self, variant: &str, estimand: &str, tau: Option<f64>) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.variant == variant && r.estimand == estimand && r.tau == tau)
            .map(|r| r.value)
            .collect()
    }

    pub fn summary_row(&self, variant: &str, estimand: &str, tau: Option<f64>) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == variant && r.estimand == estimand && r.tau == tau)
    }

    pub fn curve(&self, estimand: &str, tau: f64) -> Option<&CurveSummary> {
        self.curves.iter().find(|c| c.estimand == estimand && c.tau == tau)
    }

    /// Per-replicate estimates as CSV: `rep,variant,estimand,tau,value`.
    pub fn write_sims_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rep", "variant", "estimand", "tau", "value"])?;
        for r in &self.records {
            let tau = r.tau.map(|t| format!("{t:?}")).unwrap_or_default();
            w.write_record([r.rep.to_string(), r.variant.clone(), r.estimand.clone(), tau, format!("{:?}", r.value)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean curves as CSV: `x1,truth,unweighted,ps_weighted,d_weighted`.
    pub fn write_curve_csv<W: std::io::Write>(&self, estimand: &str, tau: f64, bias: bool, out: W) -> Result<()> {
        let c = self
            .curve(estimand, tau)
            .ok_or_else(|| Error::Config(format!("no `{estimand}` curve at tau = {tau}")))?;
        write_curves(c, bias, out)
    }
}

/// Writes a curve summary; with `bias` each column is mean minus truth and
/// the truth column is zero. An unknown (NaN) truth is left empty.
pub fn write_curves<W: std::io::Write>(c: &CurveSummary, bias: bool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["x1".to_string(), "truth".to_string()];
    let variants: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
    header.extend(variants.iter().map(|v| v.to_string()));
    w.write_record(&header)?;
    for (k, x) in c.x1.iter().enumerate() {
        let truth = if bias { 0.0 } else { c.truth[k] };
        let truth = if truth.is_nan() { String::new() } else { format!("{truth:?}") };
        let mut row = vec![format!("{x:?}"), truth];
        for v in &variants {
            let val = c.mean.get(*v).map(|m| if bias { m[k] - c.truth[k] } else { m[k] });
            row.push(val.map(|v| format!("{v:?}")).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

struct RepOutput {
    records: Vec<Record>,
    curves: Vec<(String, f64, String, Vec<f64>)>,
}

fn push_variant(rep: usize, v: &VariantOutput, out: &mut RepOutput) {
    let mut rec = |estimand: String, tau: Option<f64>, value: f64| {
        out.records.push(Record { rep, variant: v.label.clone(), estimand, tau, value })
    };
    if let Some(e) = &v.ate {
        rec("ate".into(), None, e.value());
        if let Some(se) = &e.se {
            rec("ate_se".into(), None, se[0]);
        }
        for f in &v.arm_fits {
            for (j, t) in f.theta.iter().enumerate() {
                rec(format!("theta{}_{}", f.arm, f.columns[j]), None, *t);
            }
        }
    }
    if let Some(d) = &v.diagnostics {
        rec("min_eig_gap".into(), None, d.min_eig_gap);
        rec("cross_missingness".into(), None, d.cross_missingness);
        rec("cross_propensity".into(), None, d.cross_propensity);
    }
    for q in &v.quantiles {
        let t = Some(q.tau);
        if let Some(e) = &q.uqte_direct {
            rec("uqte_direct".into(), t, e.value());
        }
        if let Some(e) = &q.uqte_rif {
            rec("uqte_rif".into(), t, e.value());
        }
        if let Some([a0, a1]) = &q.rif_arms {
            rec("q_treated".into(), t, a1.quantile);
            rec("q_control".into(), t, a0.quantile);
            rec("rif_treated".into(), t, a1.fitted_mean);
            rec("rif_control".into(), t, a0.fitted_mean);
        }
        for (name, e) in [("cqte", &q.cqte), ("lp_cqte", &q.lp_cqte)] {
            if let Some(e) = e {
                out.curves.push((name.to_string(), q.tau, v.label.clone(), e.point.clone()));
            }
        }
    }
}

fn run_replicate(pop: &Population, cfg: &ScenarioConfig, spec: &PipelineSpec, grid: Option<&DMatrix<f64>>, rep: usize) -> Result<RepOutput> {
    let rows = pop.draw_rows(cfg.n, rep);
    let ds = pop.sample(&rows)?;
    let result = pipeline::run_pipeline(&ds, spec, grid)?;
    let mut out = RepOutput { records: Vec::new(), curves: Vec::new() };
    for v in &result.variants {
        push_variant(rep, v, &mut out);
    }
    if cfg.known_weights {
        let g: Vec<f64> = rows.iter().map(|&i| pop.g[i]).collect();
        let r: Vec<f64> = rows.iter().map(|&i| pop.r[i]).collect();
        let ws = weights::from_probabilities(&ds, &g, &r, Variant::DWeighted)?;
        let v = pipeline::run_variant(&ds, spec, &ws, KNOWN_LABEL, &[], None, grid)?;
        push_variant(rep, &v, &mut out);
    }
    Ok(out)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

fn truth_for(t: &Truths, estimand: &str, tau: Option<f64>) -> Option<f64> {
    let q = tau.and_then(|tau| t.quantiles.iter().find(|q| q.tau == tau));
    match estimand {
        "ate" if t.design == Design::AteBinary => Some(t.ate),
        "uqte_direct" | "uqte_rif" => q.map(|q| q.uqte),
        "q_treated" | "rif_treated" => q.map(|q| q.q_treated),
        "q_control" | "rif_control" => q.map(|q| q.q_control),
        _ => None,
    }
}

fn summarize(records: &[Record], truths: &Truths) -> Vec<SummaryRow> {
    let mut groups: Vec<((String, String, Option<f64>), Vec<f64>)> = Vec::new();
    for r in records {
        let key = (r.variant.clone(), r.estimand.clone(), r.tau);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.value),
            None => groups.push((key, vec![r.value])),
        }
    }
    groups
        .into_iter()
        .map(|((variant, estimand, tau), v)| {
            let (mean, sd) = mean_sd(&v);
            let truth = truth_for(truths, &estimand, tau);
            SummaryRow {
                mc_se: sd / (v.len() as f64).sqrt(),
                count: v.len(),
                bias: truth.map(|t| mean - t),
                variant,
                estimand,
                tau,
                mean,
                sd,
                truth,
            }
        })
        .collect()
}

fn curve_truth(pop: &Population, truths: &Truths, grid: &Grid, estimand: &str, tau: f64) -> Vec<f64> {
    match estimand {
        "lp_cqte" => {
            let q = truths.quantiles.iter().find(|q| q.tau == tau).expect("truth for every level");
            grid.x1
                .iter()
                .map(|&x1| {
                    let at = |c: &[f64]| c[0] + c[1] * x1 + c[2] * grid.x2;
                    at(&q.lp_treated) - at(&q.lp_control)
                })
                .collect()
        }
        _ => grid
            .x1
            .iter()
            .map(|&x1| {
                pop.conditional_quantile(Arm::TREATED, tau, x1, grid.x2) - pop.conditional_quantile(Arm::CONTROL, tau, x1, grid.x2)
            })
            .collect(),
    }
}

fn summarize_curves(pop: &Population, truths: &Truths, grid: &Grid, outs: &[RepOutput]) -> Vec<CurveSummary> {
    let mut acc: Vec<((String, u64), BTreeMap<String, Vec<Vec<f64>>>)> = Vec::new();
    for o in outs {
        for (estimand, tau, label, values) in &o.curves {
            let key = (estimand.clone(), tau.to_bits());
            let idx = match acc.iter().position(|(k, _)| *k == key) {
                Some(i) => i,
                None => {
                    acc.push((key, BTreeMap::new()));
                    acc.len() - 1
                }
            };
            acc[idx].1.entry(label.clone()).or_default().push(values.clone());
        }
    }
    acc.into_iter()
        .map(|((estimand, tau_bits), by_variant)| {
            let tau = f64::from_bits(tau_bits);
            let mut mean = BTreeMap::new();
            let mut sd = BTreeMap::new();
            for (label, draws) in by_variant {
                let points = draws[0].len();
                let stats: Vec<(f64, f64)> =
                    (0..points).map(|k| mean_sd(&draws.iter().map(|d| d[k]).collect::<Vec<_>>())).collect();
                mean.insert(label.clone(), stats.iter().map(|s| s.0).collect());
                sd.insert(label, stats.iter().map(|s| s.1).collect());
            }
            CurveSummary {
                truth: curve_truth(pop, truths, grid, &estimand, tau),
                x1: grid.x1.clone(),
                estimand,
                tau,
                mean,
                sd,
            }
        })
        .collect()
}

/// Runs every replicate of a scenario. Replicates run in parallel; results
/// are reduced in replicate order, so output does not depend on thread count.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<McResult> {
    cfg.validate()?;
    let cell = cfg.cell()?;
    let spec = cfg.pipeline_spec()?;
    let pop = population(cfg.design, cfg.seed, cfg.population_size);
    let truths = truths(&pop, &cfg.taus)?;
    let grid = (cfg.design == Design::QteLognormal).then(|| Grid::from_population(&pop, cfg.grid_points));
    let grid_design = grid.as_ref().map(Grid::design);
    let outs: Vec<Result<RepOutput>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_replicate(&pop, cfg, &spec, grid_design.as_ref(), rep))
        .collect();
    let failures = outs.iter().filter(|o| o.is_err()).count();
    if failures as f64 > MAX_FAILURE_SHARE * cfg.reps as f64 {
        return Err(Error::Reliability { failed: failures, total: cfg.reps });
    }
    let outs: Vec<RepOutput> = outs.into_iter().filter_map(|o| o.ok()).collect();
    let records: Vec<Record> = outs.iter().flat_map(|o| o.records.iter().cloned()).collect();
    let curves = grid.as_ref().map(|g| summarize_curves(&pop, &truths, g, &outs)).unwrap_or_default();
    Ok(McResult {
        summary: summarize(&records, &truths),
        completed: outs.len(),
        config: cfg.clone(),
        cell,
        truths,
        failures,
        records,
        grid,
        curves,
    })
}

/// Efficiency-ordering checks on one paired run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub key: RunKey,
    pub report: EfficiencyReport,
    /// Estimated- versus known-weight variance of every second-step coefficient.
    pub coefficient_checks: Vec<OrderingCheck>,
    /// Verdict on "estimating the weights does no worse"; informational
    /// unless the weight models are correctly specified.
    pub estimated_beats_known: Verdict,
    /// Verdict on "weighting does not help"; informational unless the
    /// conditional mean is correctly specified.
    pub unweighted_beats_weighted: Verdict,
}

impl McResult {
    pub fn run_key(&self) -> RunKey {
        RunKey { scenario: self.cell.id.clone(), n: self.config.n, reps: self.config.reps, seed: self.config.seed }
    }

    /// A per-replicate series tagged with this run's key.
    pub fn tagged_series(&self, variant: &str, estimand: &str, tau: Option<f64>) -> Series {
        Series {
            key: self.run_key(),
            label: format!("{variant}:{estimand}"),
            values: self.series(variant, estimand, tau),
        }
    }

    /// Coefficient estimand names present for a variant.
    fn coefficient_names(&self, variant: &str) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in self.records.iter().filter(|r| r.variant == variant && r.estimand.starts_with("theta")) {
            if !names.contains(&r.estimand) {
                names.push(r.estimand.clone());
            }
        }
        names
    }
}

fn overall(checks: &[&OrderingCheck]) -> Verdict {
    if checks.iter().all(|c| c.verdict == Verdict::Pass) {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

/// Efficiency-ordering diagnostics for a mean-design run made with known weights.
pub fn diagnose(result: &McResult) -> Result<Diagnosis> {
    let SecondStep::Mean { mean_mode, .. } = result.cell.second else {
        return Err(Error::Config("efficiency diagnostics need a mean design".into()));
    };
    if !result.config.known_weights {
        return Err(Error::Config("efficiency diagnostics need a run with known weights".into()));
    }
    let d = Variant::DWeighted.name();
    let est = result.tagged_series(d, "ate", None);
    let known = result.tagged_series(KNOWN_LABEL, "ate", None);
    let unw = result.tagged_series(Variant::Unweighted.name(), "ate", None);
    let gap = [Variant::PsWeighted, Variant::DWeighted]
        .iter()
        .flat_map(|v| result.series(v.name(), "min_eig_gap", None))
        .fold(f64::INFINITY, f64::min);
    let report = inference::efficiency_report(Some((&est, &known)), Some((&unw, &est)), None, gap.is_finite().then_some(gap))?;
    let mut coefficient_checks = Vec::new();
    for name in result.coefficient_names(d) {
        let e = result.tagged_series(d, &name, None);
        let k = result.tagged_series(KNOWN_LABEL, &name, None);
        coefficient_checks.push(inference::variance_ordering(
            "estimated weights variance <= known weights variance",
            &e,
            &k,
            2.0,
        )?);
    }
    let c1 = report.estimated_vs_known.as_ref().expect("requested");
    let c3 = report.unweighted_vs_weighted.as_ref().expect("requested");
    let mut all1: Vec<&OrderingCheck> = coefficient_checks.iter().collect();
    all1.push(c1);
    let estimated_beats_known = if result.config.case == 1 { overall(&all1) } else { Verdict::Informational };
    let unweighted_beats_weighted = if mean_mode == MeanMode::CorrectMean { overall(&[c3]) } else { Verdict::Informational };
    Ok(Diagnosis { key: result.run_key(), report, coefficient_checks, estimated_beats_known, unweighted_beats_weighted })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_round_trips() {
        let cells = registry();
        assert_eq!(cells.len(), 6);
        let json = serde_json::to_string(&cells).unwrap();
        let back: Vec<CellSpec> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cells);
        assert_eq!(cell_by_id("qte-case3").unwrap().second, SecondStep::Quantile { log_outcome: true });
    }

    #[test]
    fn samples_are_reproducible_and_masked() {
        let pop = generate_population(Design::AteBinary, 5, 2000);
        let a = draw_sample(&pop, 300, 4).unwrap();
        let b = draw_sample(&pop, 300, 4).unwrap();
        let c = draw_sample(&pop, 300, 5).unwrap();
        assert_eq!(a.outcomes(), b.outcomes());
        assert_eq!(a.covariates(), b.covariates());
        assert_ne!(a.covariates(), c.covariates());
        let rows = pop.draw_rows(300, 4);
        let mut sorted = rows.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 300);
        for (k, &i) in rows.iter().enumerate() {
            assert_eq!(a.is_observed(k), pop.s[i] == 1);
        }
    }

    #[test]
    fn masking_leaves_truths_alone() {
        let pop = generate_population(Design::QteLognormal, 1, 5000);
        let before = (pop.ate(), pop.quantile(Arm::TREATED, 0.5));
        let _ = draw_sample(&pop, 1000, 0).unwrap();
        assert_eq!(before, (pop.ate(), pop.quantile(Arm::TREATED, 0.5)));
    }

    #[test]
    fn order_quantile_matches_definition() {
        let v = [5.0, 1.0, 4.0, 2.0, 3.0];
        assert_eq!(order_quantile(&v, 0.2), 1.0);
        assert_eq!(order_quantile(&v, 0.21), 2.0);
        assert_eq!(order_quantile(&v, 0.5), 3.0);
        assert_eq!(order_quantile(&v, 1.0), 5.0);
    }

    #[test]
    fn config_validation() {
        let mut c = ScenarioConfig::new(Design::AteBinary, 4, 100, 2, 1);
        assert!(c.validate().is_err());
        c.case = 1;
        c.population_size = 50;
        assert!(c.validate().is_err());
        c.population_size = 1000;
        assert!(c.validate().is_ok());
        c.reps = 0;
        assert!(c.validate().is_err());
    }
}
