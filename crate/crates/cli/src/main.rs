use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use dwm_core::binary::LinkKind;
use dwm_core::data::{self, ColumnMap, ColumnSubset};
use dwm_core::effects;
use dwm_core::error::{Error, Result};
use dwm_core::inference::{self, MeanMode, Series};
use dwm_core::mest::Family;
use dwm_core::pipeline::{self, MeanModel, PipelineSpec, ProbModel, QuantileSpec};
use dwm_core::simulation::{self, McResult, ScenarioConfig, KNOWN_LABEL};
use dwm_core::weights::Variant;

/// Version of the JSON output layout.
const SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "dwm", version, about = "Doubly weighted treatment-effect estimation")]
struct Cli {
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate treatment effects from a CSV file.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo scenario.
    Simulate(SimulateArgs),
    /// Efficiency-ordering diagnostics on a paired Monte Carlo run or saved series.
    Diagnose(DiagnoseArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Link {
    Logit,
    Probit,
}

impl From<Link> for LinkKind {
    fn from(l: Link) -> Self {
        match l {
            Link::Logit => LinkKind::Logit,
            Link::Probit => LinkKind::Probit,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Mean {
    /// Linear mean by least squares.
    Ls,
    /// Bernoulli quasi-likelihood with logistic mean.
    Logit,
    /// Bernoulli quasi-likelihood with probit mean.
    Probit,
    /// Poisson quasi-likelihood with exponential mean.
    Poisson,
    None,
}

impl Mean {
    fn model(self) -> Option<MeanModel> {
        match self {
            Mean::Ls => Some(MeanModel::LeastSquares),
            Mean::Logit => Some(MeanModel::Glm { family: Family::BernoulliLogit }),
            Mean::Probit => Some(MeanModel::Glm { family: Family::BernoulliProbit }),
            Mean::Poisson => Some(MeanModel::Glm { family: Family::PoissonLog }),
            Mean::None => None,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SeMode {
    /// Analytic, conditional mean correctly specified.
    CorrectMean,
    /// Analytic, robust to a misspecified conditional mean.
    MisspecifiedMean,
    /// Nonparametric pairs bootstrap.
    Bootstrap,
    None,
}

#[derive(Copy, Clone, Debug, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum CurveKind {
    Cqte,
    LpCqte,
}

impl CurveKind {
    fn name(self) -> &'static str {
        match self {
            CurveKind::Cqte => "cqte",
            CurveKind::LpCqte => "lp_cqte",
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct ModelArgs {
    /// Link of the treatment-propensity model.
    #[arg(long, value_enum, default_value = "logit")]
    ps_link: Link,
    /// Columns of the propensity model (default: all covariates).
    #[arg(long, value_delimiter = ',')]
    ps_columns: Vec<String>,
    /// Columns to leave out of the propensity model.
    #[arg(long, value_delimiter = ',', conflicts_with = "ps_columns")]
    ps_exclude: Vec<String>,
    /// Link of the observation (missingness) model.
    #[arg(long, value_enum, default_value = "logit")]
    miss_link: Link,
    /// Columns of the observation model among the covariates and the treatment.
    #[arg(long, value_delimiter = ',')]
    miss_columns: Vec<String>,
    #[arg(long, value_delimiter = ',', conflicts_with = "miss_columns")]
    miss_exclude: Vec<String>,
}

fn subset(only: &[String], without: &[String]) -> ColumnSubset {
    if !only.is_empty() {
        ColumnSubset::Only(only.to_vec())
    } else if !without.is_empty() {
        ColumnSubset::Without(without.to_vec())
    } else {
        ColumnSubset::All
    }
}

#[derive(Args, Debug, Serialize)]
struct EstimateArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    outcome: String,
    #[arg(long)]
    treatment: String,
    /// Observation indicator column; otherwise missing outcomes mark S = 0.
    #[arg(long)]
    observed: Option<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    covariates: Vec<String>,
    /// Number of treatment levels (default 2).
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long, default_value = data::DEFAULT_MISSING_TOKEN)]
    missing_token: String,
    #[command(flatten)]
    models: ModelArgs,
    #[arg(long, value_delimiter = ',', default_values = ["unweighted", "ps_weighted", "d_weighted"])]
    variants: Vec<String>,
    /// Conditional-mean model for the ATE.
    #[arg(long, value_enum, default_value = "ls")]
    mean: Mean,
    /// Also report the pooled-regression ATE.
    #[arg(long)]
    pooled: bool,
    /// Quantile levels for quantile effects.
    #[arg(long, value_delimiter = ',')]
    taus: Vec<f64>,
    /// Model the conditional quantile of log(y).
    #[arg(long)]
    log_outcome: bool,
    /// Covariate spanned by the conditional-effect grid; enables CQTE output.
    #[arg(long)]
    grid_column: Option<String>,
    #[arg(long, default_value_t = 25)]
    grid_points: usize,
    /// Also compute the influence-function route to the UQTE.
    #[arg(long)]
    uqte_rif: bool,
    /// Fixed kernel bandwidth for the influence-function route.
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Trimming bounds LO,HI on the composite probability.
    #[arg(long, value_delimiter = ',')]
    trim: Option<Vec<f64>>,
    /// Standard-error method (required).
    #[arg(long, value_enum)]
    se: SeMode,
    #[arg(long, default_value_t = 200)]
    bootstrap_reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    /// Results JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Grid-curve CSV path (needs --grid-column).
    #[arg(long)]
    curves: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cqte")]
    curve_estimand: CurveKind,
    /// Quantile level of the exported curve (default: the first of --taus).
    #[arg(long)]
    curve_tau: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct ScenarioArgs {
    /// Registered scenario id, e.g. ate-case1.
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = simulation::DEFAULT_POPULATION)]
    population: usize,
    #[arg(long, value_delimiter = ',', default_values = ["0.25", "0.5", "0.75"])]
    taus: Vec<f64>,
    #[arg(long, default_value_t = 25)]
    grid_points: usize,
    /// Skip the influence-function route to the UQTE.
    #[arg(long)]
    no_rif: bool,
}

impl ScenarioArgs {
    fn config(&self, known_weights: bool) -> Result<ScenarioConfig> {
        let cell = simulation::cell_by_id(&self.scenario)?;
        let mut cfg = ScenarioConfig::new(cell.design, cell.case, self.n, self.reps, self.seed);
        cfg.population_size = self.population;
        cfg.taus = self.taus.clone();
        cfg.grid_points = self.grid_points;
        cfg.known_weights = known_weights;
        cfg.uqte_rif = !self.no_rif;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Also run the d-weighted estimator with the true probabilities.
    #[arg(long)]
    known_weights: bool,
    /// Per-replicate CSV (rep, variant, estimand, tau, value).
    #[arg(long)]
    sims: PathBuf,
    #[arg(long)]
    summary: PathBuf,
    /// Mean-curve CSV for quantile designs.
    #[arg(long)]
    curves: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "lp-cqte")]
    curve_estimand: CurveKind,
    #[arg(long)]
    curve_tau: Option<f64>,
    /// Write mean minus truth instead of mean curves.
    #[arg(long)]
    curve_bias: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Statistic {
    Variance,
    Sd,
}

#[derive(Args, Debug, Serialize)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["scenario", "series"])))]
struct DiagnoseArgs {
    /// Registered mean-design scenario id; runs it with known weights.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = simulation::DEFAULT_POPULATION)]
    population: usize,
    /// Two saved series files: LHS then RHS of "LHS <= RHS".
    #[arg(long, num_args = 2)]
    series: Option<Vec<PathBuf>>,
    #[arg(long, value_enum, default_value = "variance")]
    statistic: Statistic,
    #[arg(long, default_value_t = 2.0)]
    slack: f64,
    /// Directory to save the paired ATE series of a scenario run.
    #[arg(long, requires = "scenario")]
    save_series: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            return fail(&Error::Config(format!("thread pool: {e}")));
        }
    }
    let res = match &cli.command {
        Command::Estimate(a) => estimate(a, cli.threads),
        Command::Simulate(a) => simulate(a, cli.threads),
        Command::Diagnose(a) => diagnose(a, cli.threads),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    let cat = e.category();
    let body = json!({ "error": { "category": cat, "message": e.to_string(), "exit_code": cat.exit_code() } });
    eprintln!("{body}");
    ExitCode::from(cat.exit_code() as u8)
}

fn envelope(command: &str, config: Value, body: Value) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": config,
        "results": body,
    })
}

/// Files staged in their target directories and renamed only once every
/// output of the run has been produced.
#[derive(Default)]
struct Outputs {
    staged: Vec<(tempfile::NamedTempFile, PathBuf)>,
}

impl Outputs {
    fn stage(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let mut f = tempfile::NamedTempFile::new_in(dir)?;
        f.write_all(bytes)?;
        f.flush()?;
        self.staged.push((f, path.to_path_buf()));
        Ok(())
    }

    fn stage_json(&mut self, path: &Path, v: &Value) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.stage(path, s.as_bytes())
    }

    fn commit(self) -> Result<()> {
        for (f, path) in self.staged {
            f.persist(&path).map_err(|e| Error::Io(e.error))?;
        }
        Ok(())
    }
}

fn threads_used(t: Option<usize>) -> usize {
    t.unwrap_or_else(rayon::current_num_threads)
}

fn estimate(a: &EstimateArgs, threads: Option<usize>) -> Result<()> {
    let variants = a.variants.iter().map(|v| v.parse::<Variant>()).collect::<Result<Vec<_>>>()?;
    let (mean_mode, bootstrap) = match a.se {
        SeMode::CorrectMean => (Some(MeanMode::CorrectMean), false),
        SeMode::MisspecifiedMean => (Some(MeanMode::MisspecifiedMean), false),
        SeMode::Bootstrap => (None, true),
        SeMode::None => (None, false),
    };
    let mean = a.mean.model();
    let quantiles = (!a.taus.is_empty()).then(|| QuantileSpec {
        taus: a.taus.clone(),
        log_outcome: a.log_outcome,
        conditional: a.grid_column.is_some(),
        uqte_direct: true,
        uqte_rif: a.uqte_rif,
    });
    let trim = match a.trim.as_deref() {
        Some(&[lo, hi]) => Some([lo, hi]),
        Some(_) => return Err(Error::Config("--trim takes exactly two values LO,HI".into())),
        None => None,
    };
    let spec = PipelineSpec {
        propensity: ProbModel::new(a.models.ps_link.into(), subset(&a.models.ps_columns, &a.models.ps_exclude)),
        missingness: ProbModel::new(a.models.miss_link.into(), subset(&a.models.miss_columns, &a.models.miss_exclude)),
        variants,
        mean,
        pooled: a.pooled,
        mean_mode: if mean.is_some() { mean_mode } else { None },
        quantiles,
        rif: effects::RifConfig {
            bandwidth: match a.bandwidth {
                Some(h) if h > 0.0 => effects::Bandwidth::Fixed { h },
                Some(h) => return Err(Error::Config(format!("bandwidth {h} must be positive"))),
                None => effects::Bandwidth::Silverman,
            },
        },
        trim,
        ci_level: a.ci_level,
    };
    spec.validate()?;
    if a.curves.is_some() && a.grid_column.is_none() {
        return Err(Error::Config("--curves needs --grid-column".into()));
    }
    if bootstrap && a.bootstrap_reps < 2 {
        return Err(Error::Config("bootstrap needs at least two replications".into()));
    }
    let curve_tau = a.curve_tau.or_else(|| a.taus.first().copied());
    if a.curves.is_some() && !curve_tau.is_some_and(|t| a.taus.contains(&t)) {
        return Err(Error::Config("--curve-tau must be one of --taus".into()));
    }
    let map = ColumnMap {
        outcome: a.outcome.clone(),
        treatment: a.treatment.clone(),
        observed: a.observed.clone(),
        covariates: a.covariates.clone(),
        levels: a.levels,
    };
    let ds = data::load_csv(&a.data, &map, &a.missing_token)?;
    let grid = match &a.grid_column {
        Some(c) => Some(effects::covariate_grid(&ds, c, a.grid_points, 0.05, 0.95)?),
        None => None,
    };
    let grid_design = grid.as_ref().map(|g| &g.1);
    let mut output = pipeline::run_pipeline(&ds, &spec, grid_design)?;
    let mut boot_meta = Value::Null;
    if bootstrap {
        let rep_spec = PipelineSpec { mean_mode: None, ..spec.clone() };
        let boot = inference::pairs_bootstrap(
            &ds,
            |d| pipeline::run_pipeline(d, &rep_spec, grid_design).map(|o| o.point_values()),
            a.bootstrap_reps,
            a.seed,
        )?;
        if boot.estimates[0].len() != output.point_values().len() {
            return Err(Error::Config("bootstrap replicates do not match the point estimates".into()));
        }
        output.attach_bootstrap(&boot, a.ci_level);
        boot_meta = json!({ "replications": a.bootstrap_reps, "failures": boot.failures, "seed": a.seed });
    }
    let config = json!({ "args": a, "threads": threads_used(threads), "pipeline": spec });
    let body = json!({
        "data": ds.summary(),
        "estimates": output,
        "bootstrap": boot_meta,
        "grid": grid.as_ref().map(|g| json!({ "column": a.grid_column, "values": g.0 })),
    });
    let mut out = Outputs::default();
    out.stage_json(&a.out, &envelope("estimate", config, body))?;
    if let (Some(path), Some((values, _)), Some(tau)) = (&a.curves, &grid, curve_tau) {
        let mut curve = simulation::CurveSummary {
            estimand: a.curve_estimand.name().into(),
            tau,
            x1: values.clone(),
            truth: vec![f64::NAN; values.len()],
            mean: Default::default(),
            sd: Default::default(),
        };
        for v in &output.variants {
            let q = v.quantiles.iter().find(|q| q.tau == tau);
            let e = q.and_then(|q| match a.curve_estimand {
                CurveKind::Cqte => q.cqte.as_ref(),
                CurveKind::LpCqte => q.lp_cqte.as_ref(),
            });
            if let Some(e) = e {
                curve.mean.insert(v.label.clone(), e.point.clone());
            }
        }
        let mut buf = Vec::new();
        simulation::write_curves(&curve, false, &mut buf)?;
        out.stage(path, &buf)?;
    }
    out.commit()
}

fn curve_bytes(res: &McResult, estimand: CurveKind, tau: Option<f64>, bias: bool) -> Result<Vec<u8>> {
    let tau = tau.or_else(|| res.config.taus.first().copied()).ok_or_else(|| Error::Config("no quantile level".into()))?;
    let mut buf = Vec::new();
    res.write_curve_csv(estimand.name(), tau, bias, &mut buf)?;
    Ok(buf)
}

fn simulate(a: &SimulateArgs, threads: Option<usize>) -> Result<()> {
    let cfg = a.scenario.config(a.known_weights)?;
    if a.curves.is_some() && cfg.design != simulation::Design::QteLognormal {
        return Err(Error::Config("--curves needs a quantile scenario".into()));
    }
    let res = simulation::run_scenario(&cfg)?;
    let mut sims = Vec::new();
    res.write_sims_csv(&mut sims)?;
    let config = json!({ "args": a, "threads": threads_used(threads), "scenario": cfg, "cell": res.cell });
    let body = json!({
        "truths": res.truths,
        "completed": res.completed,
        "failures": res.failures,
        "grid": res.grid,
        "summary": res.summary,
    });
    let mut out = Outputs::default();
    out.stage(&a.sims, &sims)?;
    out.stage_json(&a.summary, &envelope("simulate", config, body))?;
    if let Some(path) = &a.curves {
        out.stage(path, &curve_bytes(&res, a.curve_estimand, a.curve_tau, a.curve_bias)?)?;
    }
    out.commit()
}

fn read_series(path: &Path) -> Result<Series> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn diagnose(a: &DiagnoseArgs, threads: Option<usize>) -> Result<()> {
    let mut out = Outputs::default();
    let body = if let Some(paths) = &a.series {
        let lhs = read_series(&paths[0])?;
        let rhs = read_series(&paths[1])?;
        let check = match a.statistic {
            Statistic::Variance => inference::variance_ordering("lhs variance <= rhs variance", &lhs, &rhs, a.slack)?,
            Statistic::Sd => inference::sd_ordering("lhs SD <= rhs SD", &lhs, &rhs, a.slack)?,
        };
        json!({ "check": check })
    } else {
        let scenario = ScenarioArgs {
            scenario: a.scenario.clone().unwrap_or_default(),
            n: a.n,
            reps: a.reps,
            seed: a.seed,
            population: a.population,
            taus: vec![0.5],
            grid_points: 2,
            no_rif: true,
        };
        let cfg = scenario.config(true)?;
        let res = simulation::run_scenario(&cfg)?;
        let diag = simulation::diagnose(&res)?;
        if let Some(dir) = &a.save_series {
            fs::create_dir_all(dir)?;
            for (variant, file) in [
                (Variant::DWeighted.name(), "d_weighted_ate.json"),
                (KNOWN_LABEL, "d_weighted_known_ate.json"),
                (Variant::Unweighted.name(), "unweighted_ate.json"),
            ] {
                let s = res.tagged_series(variant, "ate", None);
                out.stage_json(&dir.join(file), &serde_json::to_value(&s)?)?;
            }
        }
        json!({
            "diagnosis": diag,
            "completed": res.completed,
            "failures": res.failures,
        })
    };
    let config = json!({ "args": a, "threads": threads_used(threads) });
    out.stage_json(&a.out, &envelope("diagnose", config, body))?;
    out.commit()
}
