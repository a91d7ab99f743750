//! One-step estimation of the stacked first- and second-step moments.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::binary::{LinkKind, PROB_FLOOR};
use crate::data::{Arm, ColumnSubset, Dataset};
use crate::error::{Error, Result};
use crate::linalg;

const GMM_TOL: f64 = 1e-10;
const GMM_MAX_ITER: usize = 200;

/// Specification of the exactly identified system: linear means per arm,
/// binary-response models for the propensity and the missingness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub ps_link: LinkKind,
    pub ps_columns: ColumnSubset,
    pub miss_link: LinkKind,
    pub miss_columns: ColumnSubset,
    /// Multiply the arm moments by `N / N_g`.
    pub scale: bool,
    /// Common start value for every parameter.
    pub start: f64,
}

impl Default for GmmSpec {
    fn default() -> Self {
        GmmSpec {
            ps_link: LinkKind::Logit,
            ps_columns: ColumnSubset::All,
            miss_link: LinkKind::Logit,
            miss_columns: ColumnSubset::All,
            scale: true,
            start: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub theta1: DVector<f64>,
    pub theta0: DVector<f64>,
    pub gamma: DVector<f64>,
    pub delta: DVector<f64>,
    pub iterations: usize,
    pub moment_norm: f64,
}

struct System<'a> {
    x: &'a DMatrix<f64>,
    xg: DMatrix<f64>,
    z: DMatrix<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    s: Vec<f64>,
    spec: &'a GmmSpec,
    scale1: f64,
    scale0: f64,
}

impl System<'_> {
    fn sizes(&self) -> (usize, usize, usize) {
        (self.x.ncols(), self.xg.ncols(), self.z.ncols())
    }

    fn moments(&self, par: &DVector<f64>) -> DVector<f64> {
        let (p, kg, kd) = self.sizes();
        let n = self.y.len();
        let t1 = par.rows(0, p);
        let t0 = par.rows(p, p);
        let g = par.rows(2 * p, kg);
        let d = par.rows(2 * p + kg, kd);
        let mut m = DVector::zeros(par.len());
        for i in 0..n {
            let eta_g = (self.xg.row(i) * g)[0];
            let eta_d = (self.z.row(i) * d)[0];
            let (gs, _) = self.spec.ps_link.score_terms(eta_g, self.w[i]);
            let (ds, _) = self.spec.miss_link.score_terms(eta_d, self.s[i]);
            for a in 0..kg {
                m[2 * p + a] += gs * self.xg[(i, a)];
            }
            for a in 0..kd {
                m[2 * p + kg + a] += ds * self.z[(i, a)];
            }
            if self.s[i] == 0.0 {
                continue;
            }
            let gp = self.spec.ps_link.cdf(eta_g).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            let rp = self.spec.miss_link.cdf(eta_d).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            let xi = self.x.row(i);
            if self.w[i] == 1.0 {
                let e = self.scale1 * (self.y[i] - (xi * t1)[0]) / (rp * gp);
                for a in 0..p {
                    m[a] += e * xi[a];
                }
            } else {
                let e = self.scale0 * (self.y[i] - (xi * t0)[0]) / (rp * (1.0 - gp));
                for a in 0..p {
                    m[p + a] += e * xi[a];
                }
            }
        }
        m / n as f64
    }

    fn jacobian(&self, par: &DVector<f64>) -> DMatrix<f64> {
        let k = par.len();
        let mut jac = DMatrix::zeros(k, k);
        for j in 0..k {
            let h = 1e-6 * par[j].abs().max(1.0);
            let mut up = par.clone();
            up[j] += h;
            let mut dn = par.clone();
            dn[j] -= h;
            let col = (self.moments(&up) - self.moments(&dn)) / (2.0 * h);
            jac.set_column(j, &col);
        }
        jac
    }
}

/// Solves the stacked moment system by Newton's method with a numerical Jacobian.
pub fn solve_stacked_gmm(ds: &Dataset, spec: &GmmSpec) -> Result<GmmFit> {
    if ds.levels() != 2 {
        return Err(Error::Config("stacked estimation needs a binary treatment".into()));
    }
    let gcols = spec.ps_columns.resolve(ds.covariate_names())?;
    let znames = ds.augmented_names();
    let zcols = spec.miss_columns.resolve(&znames)?;
    let s = ds.observed_indicator();
    let w = ds.treatment_indicator(Arm::TREATED);
    let y: Vec<f64> = (0..ds.n()).map(|i| ds.outcome_opt(i).unwrap_or(0.0)).collect();
    let n = ds.n() as f64;
    let n1 = (0..ds.n()).filter(|&i| s[i] == 1.0 && w[i] == 1.0).count();
    let n0 = (0..ds.n()).filter(|&i| s[i] == 1.0 && w[i] == 0.0).count();
    if n1 == 0 || n0 == 0 {
        return Err(Error::Infeasible("an arm has no observed rows".into()));
    }
    let (scale1, scale0) = if spec.scale { (n / n1 as f64, n / n0 as f64) } else { (1.0, 1.0) };
    let sys = System {
        x: ds.covariates(),
        xg: linalg::select_columns(ds.covariates(), &gcols),
        z: linalg::select_columns(&ds.augmented_design(), &zcols),
        y,
        w,
        s,
        spec,
        scale1,
        scale0,
    };
    let (p, kg, kd) = sys.sizes();
    let k = 2 * p + kg + kd;
    let mut par = DVector::from_element(k, spec.start);
    let mut m = sys.moments(&par);
    let mut norm = m.norm();
    let mut iterations = 0;
    while linalg::sup_norm(m.as_slice()) > GMM_TOL {
        if iterations == GMM_MAX_ITER {
            return Err(Error::Convergence {
                iterations,
                score_norm: linalg::sup_norm(m.as_slice()),
                last_iterate: par.iter().copied().collect(),
            });
        }
        let jac = sys.jacobian(&par);
        let step = linalg::solve_lu(&jac, &m, "stacked moment Jacobian")?;
        let mut t = 1.0;
        loop {
            let cand = &par - &step * t;
            let cm = sys.moments(&cand);
            let cn = cm.norm();
            if cn.is_finite() && cn < norm {
                par = cand;
                m = cm;
                norm = cn;
                break;
            }
            t *= 0.5;
            if t < 1e-10 {
                return Err(Error::Convergence {
                    iterations,
                    score_norm: linalg::sup_norm(m.as_slice()),
                    last_iterate: par.iter().copied().collect(),
                });
            }
        }
        iterations += 1;
    }
    Ok(GmmFit {
        theta1: par.rows(0, p).into_owned(),
        theta0: par.rows(p, p).into_owned(),
        gamma: par.rows(2 * p, kg).into_owned(),
        delta: par.rows(2 * p + kg, kd).into_owned(),
        iterations,
        moment_norm: linalg::sup_norm(m.as_slice()),
    })
}
