//! Composite inverse-probability weights and trimming.

use serde::{Deserialize, Serialize};

use crate::binary::{BinaryFit, BinaryFitReport, MultinomialFit, PROB_FLOOR};
use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Unweighted,
    PsWeighted,
    DWeighted,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Unweighted, Variant::PsWeighted, Variant::DWeighted];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unweighted => "unweighted",
            Variant::PsWeighted => "ps_weighted",
            Variant::DWeighted => "d_weighted",
        }
    }

    pub fn uses_propensity(self) -> bool {
        self != Variant::Unweighted
    }

    pub fn uses_missingness(self) -> bool {
        self == Variant::DWeighted
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.name().replace('_', "-") == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub propensity: Option<BinaryFitReport>,
    pub missingness: Option<BinaryFitReport>,
}

/// Per-row, per-arm weights plus a keep mask.
///
/// `composite` is each row's probability of being observed in its own arm
/// (`R G` for treated rows, `R (1 - G)` for control rows); trimming acts on it.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub variant: Variant,
    weights: Vec<Vec<f64>>,
    pub keep: Vec<bool>,
    pub composite: Vec<f64>,
    pub clipped: usize,
    pub trim_bounds: Option<(f64, f64)>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrimReport {
    pub lo: f64,
    pub hi: f64,
    pub n_total: usize,
    pub n_kept: usize,
    pub n_dropped: usize,
}

impl WeightSet {
    pub fn arm(&self, arm: Arm) -> &[f64] {
        &self.weights[arm.0]
    }

    pub fn treated(&self) -> &[f64] {
        self.arm(Arm::TREATED)
    }

    pub fn control(&self) -> &[f64] {
        self.arm(Arm::CONTROL)
    }

    pub fn levels(&self) -> usize {
        self.weights.len()
    }

    pub fn n(&self) -> usize {
        self.keep.len()
    }

    pub fn effective_n(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn kept_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.keep[i]).collect()
    }

    /// Multiplies every weight by `c` (the estimators are invariant to this).
    pub fn scaled(&self, c: f64) -> WeightSet {
        let mut out = self.clone();
        for w in &mut out.weights {
            w.iter_mut().for_each(|v| *v *= c);
        }
        out
    }

    pub fn trim_report(&self) -> Option<TrimReport> {
        self.trim_bounds.map(|(lo, hi)| TrimReport {
            lo,
            hi,
            n_total: self.n(),
            n_kept: self.effective_n(),
            n_dropped: self.n() - self.effective_n(),
        })
    }
}

fn floor(p: f64, clipped: &mut usize) -> f64 {
    if p <= PROB_FLOOR {
        *clipped += 1;
        PROB_FLOOR
    } else if p >= 1.0 - PROB_FLOOR {
        *clipped += 1;
        1.0 - PROB_FLOOR
    } else {
        p
    }
}

/// Binary-treatment weights from per-row probabilities `G(X_i)` and
/// `R(X_i, W_i)` (the missingness probability at each row's own treatment).
pub fn from_probabilities(ds: &Dataset, g: &[f64], r: &[f64], variant: Variant) -> Result<WeightSet> {
    let n = ds.n();
    if ds.levels() != 2 {
        return Err(Error::Config("binary weights need a binary treatment".into()));
    }
    if g.len() != n || r.len() != n {
        return Err(Error::Config("probabilities are not aligned with the dataset".into()));
    }
    let mut clipped = 0;
    let mut w1 = vec![0.0; n];
    let mut w0 = vec![0.0; n];
    let mut composite = vec![0.0; n];
    for i in 0..n {
        let gi = floor(g[i], &mut clipped);
        let ri = floor(r[i], &mut clipped);
        let treated = ds.treatment(i) == 1;
        composite[i] = if treated { ri * gi } else { ri * (1.0 - gi) };
        if !ds.is_observed(i) {
            continue;
        }
        let rr = if variant.uses_missingness() { ri } else { 1.0 };
        let (pg1, pg0) = if variant.uses_propensity() { (gi, 1.0 - gi) } else { (1.0, 1.0) };
        if treated {
            w1[i] = 1.0 / (rr * pg1);
        } else {
            w0[i] = 1.0 / (rr * pg0);
        }
    }
    Ok(WeightSet {
        variant,
        weights: vec![w0, w1],
        keep: vec![true; n],
        composite,
        clipped,
        trim_bounds: None,
        provenance: Provenance::default(),
    })
}

/// Composite weights from fitted propensity and missingness models.
pub fn compute_weights(ps: &BinaryFit, miss: &BinaryFit, ds: &Dataset, variant: Variant) -> Result<WeightSet> {
    let mut ws = from_probabilities(ds, &ps.fitted_probs, &miss.fitted_probs, variant)?;
    ws.provenance = Provenance {
        propensity: Some(ps.report()),
        missingness: Some(miss.report()),
    };
    Ok(ws)
}

/// Multivalued weights `S W_g / (R(X, W_g) rho_g(X))`.
pub fn compute_weights_multivalued(
    ps: &MultinomialFit,
    miss: &BinaryFit,
    ds: &Dataset,
    variant: Variant,
) -> Result<WeightSet> {
    let n = ds.n();
    let levels = ds.levels();
    if ps.probs.nrows() != n || ps.probs.ncols() != levels || miss.fitted_probs.len() != n {
        return Err(Error::Config("fits are not aligned with the dataset".into()));
    }
    let mut clipped = 0;
    let mut weights = vec![vec![0.0; n]; levels];
    let mut composite = vec![0.0; n];
    for i in 0..n {
        let g = ds.treatment(i);
        let rho = floor(ps.probs[(i, g)], &mut clipped);
        let r = floor(miss.fitted_probs[i], &mut clipped);
        composite[i] = r * rho;
        if !ds.is_observed(i) {
            continue;
        }
        let rr = if variant.uses_missingness() { r } else { 1.0 };
        let pp = if variant.uses_propensity() { rho } else { 1.0 };
        weights[g][i] = 1.0 / (rr * pp);
    }
    Ok(WeightSet {
        variant,
        weights,
        keep: vec![true; n],
        composite,
        clipped,
        trim_bounds: None,
        provenance: Provenance { propensity: None, missingness: Some(miss.report()) },
    })
}

/// Drops rows whose composite probability lies outside `[lo, hi]`.
pub fn trim(ws: &WeightSet, lo: f64, hi: f64) -> Result<WeightSet> {
    if !(0.0..1.0).contains(&lo) || !(lo < hi && hi <= 1.0) {
        return Err(Error::Config(format!("invalid trimming bounds ({lo}, {hi})")));
    }
    let mut out = ws.clone();
    for i in 0..ws.n() {
        let c = ws.composite[i];
        if c < lo || c > hi {
            out.keep[i] = false;
            for w in &mut out.weights {
                w[i] = 0.0;
            }
        }
    }
    if out.effective_n() == 0 {
        return Err(Error::Infeasible("trimming dropped every row".into()));
    }
    out.trim_bounds = Some((lo, hi));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn fixture() -> Dataset {
        let x = DMatrix::from_row_slice(4, 1, &[0.1, 0.4, -0.3, 1.1]);
        Dataset::new(vec![Some(1.0), Some(2.0), None, Some(0.5)], vec![1, 0, 1, 1], x, vec!["x".into()])
            .unwrap()
    }

    #[test]
    fn direct_formula() {
        let ds = fixture();
        let g = [0.25, 0.5, 0.5, 0.4];
        let r = [0.5, 0.8, 0.3, 0.5];
        let ws = from_probabilities(&ds, &g, &r, Variant::DWeighted).unwrap();
        assert_eq!(ws.treated()[0], 8.0);
        assert_eq!(ws.control()[0], 0.0);
        assert_eq!(ws.treated()[2], 0.0);
        assert_eq!(ws.control()[2], 0.0);
        assert_eq!(ws.control()[1], 1.0 / (0.8 * 0.5));
        let ps = from_probabilities(&ds, &g, &r, Variant::PsWeighted).unwrap();
        assert_eq!(ps.treated()[0], 4.0);
        let un = from_probabilities(&ds, &g, &r, Variant::Unweighted).unwrap();
        assert_eq!(un.treated(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(un.control(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn trim_identity_and_single_drop() {
        let ds = fixture();
        let g = [0.25, 0.5, 0.5, 0.02];
        let r = [0.5, 0.8, 0.3, 0.5];
        let ws = from_probabilities(&ds, &g, &r, Variant::DWeighted).unwrap();
        let same = trim(&ws, 0.0, 1.0).unwrap();
        assert_eq!(same.effective_n(), 4);
        assert_eq!(same.treated(), ws.treated());
        let t = trim(&ws, 0.03, 0.8).unwrap();
        assert_eq!(t.keep, vec![true, true, true, false]);
        assert_eq!(t.treated()[3], 0.0);
        assert_eq!(t.trim_report().unwrap().n_dropped, 1);
        assert!(matches!(trim(&ws, 0.9, 1.0), Err(Error::Infeasible(_))));
        assert!(matches!(trim(&ws, 0.5, 0.2), Err(Error::Config(_))));
    }

    #[test]
    fn floor_is_counted() {
        let ds = fixture();
        let ws = from_probabilities(&ds, &[0.0, 0.5, 0.5, 0.5], &[0.5; 4], Variant::DWeighted).unwrap();
        assert_eq!(ws.clipped, 1);
        assert!(ws.treated().iter().all(|w| w.is_finite()));
    }
}
