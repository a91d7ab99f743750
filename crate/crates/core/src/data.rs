//! Sample container with an explicit outcome-presence mask, plus CSV I/O.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub const INTERCEPT: &str = "intercept";
pub const DEFAULT_MISSING_TOKEN: &str = "NA";

/// Treatment arm (level index). Binary designs use [`Arm::CONTROL`] and [`Arm::TREATED`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Arm(pub usize);

impl Arm {
    pub const CONTROL: Arm = Arm(0);
    pub const TREATED: Arm = Arm(1);

    pub fn index(self) -> usize {
        self.0
    }
}

/// Which columns of a design enter a model. Names are matched exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ColumnSubset {
    #[default]
    All,
    Only(Vec<String>),
    Without(Vec<String>),
}

impl ColumnSubset {
    pub fn without(names: &[&str]) -> Self {
        ColumnSubset::Without(names.iter().map(|s| s.to_string()).collect())
    }

    pub fn resolve(&self, available: &[String]) -> Result<Vec<usize>> {
        let lookup = |name: &String| {
            available
                .iter()
                .position(|a| a == name)
                .ok_or_else(|| Error::Config(format!("unknown column `{name}`")))
        };
        match self {
            ColumnSubset::All => Ok((0..available.len()).collect()),
            ColumnSubset::Only(names) => {
                let mut idx = names.iter().map(lookup).collect::<Result<Vec<_>>>()?;
                idx.sort_unstable();
                idx.dedup();
                Ok(idx)
            }
            ColumnSubset::Without(names) => {
                let drop = names.iter().map(lookup).collect::<Result<Vec<_>>>()?;
                Ok((0..available.len()).filter(|j| !drop.contains(j)).collect())
            }
        }
    }
}

/// Observed sample: outcome (masked where unobserved), treatment level,
/// and a full-rank covariate matrix whose first column is the intercept.
///
/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    outcome: Vec<Option<f64>>,
    treatment: Vec<usize>,
    levels: usize,
    covariates: DMatrix<f64>,
    covariate_names: Vec<String>,
    outcome_name: String,
    treatment_name: String,
}

impl Dataset {
    /// Builds a binary-treatment dataset. Prepends an intercept when the
    /// first covariate column is not identically one.
    pub fn new(
        outcome: Vec<Option<f64>>,
        treatment: Vec<usize>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        Self::with_levels(outcome, treatment, 2, covariates, covariate_names)
    }

    pub fn with_levels(
        outcome: Vec<Option<f64>>,
        treatment: Vec<usize>,
        levels: usize,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = outcome.len();
        if n == 0 {
            return Err(Error::Infeasible("dataset has no rows".into()));
        }
        if levels < 2 {
            return Err(Error::Config("need at least two treatment levels".into()));
        }
        if treatment.len() != n || covariates.nrows() != n {
            return Err(Error::Header(format!(
                "length mismatch: outcome {n}, treatment {}, covariates {}",
                treatment.len(),
                covariates.nrows()
            )));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::Header("covariate names do not match columns".into()));
        }
        for (row, &t) in treatment.iter().enumerate() {
            if t >= levels {
                return Err(Error::Schema {
                    row,
                    message: format!("treatment level {t} outside 0..{levels}"),
                });
            }
        }
        for (row, y) in outcome.iter().enumerate() {
            if let Some(v) = y {
                if !v.is_finite() {
                    return Err(Error::Schema { row, message: "non-finite outcome".into() });
                }
            }
        }
        for i in 0..n {
            for j in 0..covariates.ncols() {
                if !covariates[(i, j)].is_finite() {
                    return Err(Error::Schema {
                        row: i,
                        message: format!("non-finite covariate `{}`", covariate_names[j]),
                    });
                }
            }
        }
        let has_intercept =
            covariates.ncols() > 0 && covariates.column(0).iter().all(|&v| v == 1.0);
        let (covariates, covariate_names) = if has_intercept {
            (covariates, covariate_names)
        } else {
            let mut names = Vec::with_capacity(covariate_names.len() + 1);
            names.push(INTERCEPT.to_string());
            names.extend(covariate_names);
            (covariates.insert_column(0, 1.0), names)
        };
        let dependent = linalg::dependent_columns(&covariates);
        if !dependent.is_empty() {
            return Err(Error::Rank {
                what: "covariate matrix".into(),
                dependent: dependent.iter().map(|&j| covariate_names[j].clone()).collect(),
            });
        }
        Ok(Dataset {
            outcome,
            treatment,
            levels,
            covariates,
            covariate_names,
            outcome_name: "y".into(),
            treatment_name: "w".into(),
        })
    }

    pub fn with_names(mut self, outcome: &str, treatment: &str) -> Self {
        self.outcome_name = outcome.to_string();
        self.treatment_name = treatment.to_string();
        self
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn treatment_name(&self) -> &str {
        &self.treatment_name
    }

    pub fn is_observed(&self, row: usize) -> bool {
        self.outcome[row].is_some()
    }

    /// The S indicator as 0/1 reals.
    pub fn observed_indicator(&self) -> Vec<f64> {
        self.outcome.iter().map(|y| if y.is_some() { 1.0 } else { 0.0 }).collect()
    }

    pub fn treatment(&self, row: usize) -> usize {
        self.treatment[row]
    }

    pub fn treatment_levels(&self) -> &[usize] {
        &self.treatment
    }

    /// `1{W = level}` as 0/1 reals.
    pub fn treatment_indicator(&self, arm: Arm) -> Vec<f64> {
        self.treatment.iter().map(|&t| if t == arm.0 { 1.0 } else { 0.0 }).collect()
    }

    /// Observed outcome at `row`; reading a masked entry is an error.
    pub fn outcome(&self, row: usize) -> Result<f64> {
        self.outcome[row].ok_or(Error::MaskedOutcome { row })
    }

    pub fn outcome_opt(&self, row: usize) -> Option<f64> {
        self.outcome[row]
    }

    pub fn outcomes(&self) -> &[Option<f64>] {
        &self.outcome
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Names of the augmented design `Z = (X, W)`; in multivalued mode
    /// `W` is one-hot expanded without the base level.
    pub fn augmented_names(&self) -> Vec<String> {
        let mut names = self.covariate_names.clone();
        if self.levels == 2 {
            names.push(self.treatment_name.clone());
        } else {
            for g in 1..self.levels {
                names.push(format!("{}_{g}", self.treatment_name));
            }
        }
        names
    }

    pub fn augmented_design(&self) -> DMatrix<f64> {
        let n = self.n();
        let p = self.covariates.ncols();
        let extra = self.levels - 1;
        let mut z = DMatrix::zeros(n, p + extra);
        z.view_mut((0, 0), (n, p)).copy_from(&self.covariates);
        for i in 0..n {
            let t = self.treatment[i];
            if t > 0 {
                z[(i, p + t - 1)] = 1.0;
            }
        }
        z
    }

    /// Rows with S=1 and W=g: the rows that enter arm g's objective.
    pub fn split_by_arm(&self, arm: Arm) -> Result<Vec<usize>> {
        if arm.0 >= self.levels {
            return Err(Error::Config(format!("arm {} >= number of levels {}", arm.0, self.levels)));
        }
        let rows: Vec<usize> = (0..self.n())
            .filter(|&i| self.outcome[i].is_some() && self.treatment[i] == arm.0)
            .collect();
        if rows.is_empty() {
            return Err(Error::Infeasible(format!("no observed rows in arm {}", arm.0)));
        }
        Ok(rows)
    }

    /// New dataset made of the given rows (repeats allowed).
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let outcome = rows.iter().map(|&i| self.outcome[i]).collect();
        let treatment = rows.iter().map(|&i| self.treatment[i]).collect();
        let x = DMatrix::from_fn(rows.len(), self.covariates.ncols(), |r, c| {
            self.covariates[(rows[r], c)]
        });
        let ds = Dataset::with_levels(
            outcome,
            treatment,
            self.levels,
            x,
            self.covariate_names.clone(),
        )?;
        Ok(ds.with_names(&self.outcome_name, &self.treatment_name))
    }

    /// Column map that reproduces this dataset through [`load_csv`] after [`save_csv`].
    pub fn column_map(&self) -> ColumnMap {
        ColumnMap {
            outcome: self.outcome_name.clone(),
            treatment: self.treatment_name.clone(),
            observed: Some(observed_column_name(self)),
            covariates: self.covariate_names.clone(),
            levels: if self.levels == 2 { None } else { Some(self.levels) },
        }
    }

    pub fn summary(&self) -> DatasetSummary {
        let names: Vec<String> = std::iter::once(self.outcome_name.clone())
            .chain(self.covariate_names.iter().skip(1).cloned())
            .collect();
        let arms = (0..self.levels)
            .map(|g| {
                let rows: Vec<usize> =
                    (0..self.n()).filter(|&i| self.treatment[i] == g).collect();
                let observed = rows.iter().filter(|&&i| self.outcome[i].is_some()).count();
                let mut columns = Vec::with_capacity(names.len());
                let ys: Vec<f64> = rows.iter().filter_map(|&i| self.outcome[i]).collect();
                columns.push(ColumnStats::of(&names[0], &ys));
                for (j, name) in self.covariate_names.iter().enumerate().skip(1) {
                    let xs: Vec<f64> = rows.iter().map(|&i| self.covariates[(i, j)]).collect();
                    columns.push(ColumnStats::of(name, &xs));
                }
                ArmSummary { arm: g, n: rows.len(), n_observed: observed, columns }
            })
            .collect();
        DatasetSummary {
            n: self.n(),
            levels: self.levels,
            n_observed: self.outcome.iter().filter(|y| y.is_some()).count(),
            arms,
        }
    }
}

fn observed_column_name(ds: &Dataset) -> String {
    let mut name = "observed".to_string();
    while name == ds.outcome_name
        || name == ds.treatment_name
        || ds.covariate_names.iter().any(|c| *c == name)
    {
        name.push('_');
    }
    name
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ColumnStats {
    pub name: String,
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
}

impl ColumnStats {
    fn of(name: &str, v: &[f64]) -> Self {
        let count = v.len();
        let mean = if count > 0 { v.iter().sum::<f64>() / count as f64 } else { f64::NAN };
        let sd = if count > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
        } else {
            f64::NAN
        };
        ColumnStats { name: name.to_string(), count, mean, sd }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArmSummary {
    pub arm: usize,
    pub n: usize,
    pub n_observed: usize,
    pub columns: Vec<ColumnStats>,
}

/// Means and SDs by arm, in the layout of a descriptive-statistics table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetSummary {
    pub n: usize,
    pub levels: usize,
    pub n_observed: usize,
    pub arms: Vec<ArmSummary>,
}

/// Header names for the roles of each CSV column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub outcome: String,
    pub treatment: String,
    #[serde(default)]
    pub observed: Option<String>,
    pub covariates: Vec<String>,
    /// Number of treatment levels; `None` means binary.
    #[serde(default)]
    pub levels: Option<usize>,
}

fn parse_indicator(cell: &str, row: usize, what: &str, levels: usize) -> Result<usize> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Schema {
        row,
        message: format!("{what} value `{cell}` is not numeric"),
    })?;
    if v.fract() != 0.0 || v < 0.0 || v >= levels as f64 {
        let expected = if levels == 2 { "0/1".to_string() } else { format!("0..{}", levels - 1) };
        return Err(Error::Schema {
            row,
            message: format!("{what} value `{cell}` is not in {expected}"),
        });
    }
    Ok(v as usize)
}

/// Reads a headered CSV. Row numbers in errors are zero-based data rows.
pub fn load_csv(path: impl AsRef<Path>, map: &ColumnMap, missing_token: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let col = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Header(format!("column `{name}` not found in header")))
    };
    let y_col = col(&map.outcome)?;
    let w_col = col(&map.treatment)?;
    let s_col = map.observed.as_deref().map(col).transpose()?;
    let x_cols = map.covariates.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let levels = map.levels.unwrap_or(2);

    let mut outcome = Vec::new();
    let mut treatment = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let cell = |c: usize| record.get(c).unwrap_or("");
        let w = parse_indicator(cell(w_col), row, "treatment", levels)?;
        let raw_y = cell(y_col).trim();
        let y = if raw_y.is_empty() || raw_y == missing_token {
            None
        } else {
            Some(raw_y.parse::<f64>().map_err(|_| Error::Schema {
                row,
                message: format!("outcome value `{raw_y}` is not numeric"),
            })?)
        };
        let y = match s_col {
            Some(c) => match (parse_indicator(cell(c), row, "observed", 2)?, y) {
                (1, None) => return Err(Error::Consistency { row }),
                (1, Some(v)) => Some(v),
                _ => None,
            },
            None => y,
        };
        for (&c, name) in x_cols.iter().zip(&map.covariates) {
            let raw = cell(c).trim();
            if raw.is_empty() || raw == missing_token {
                return Err(Error::Schema { row, message: format!("missing covariate `{name}`") });
            }
            xs.push(raw.parse::<f64>().map_err(|_| Error::Schema {
                row,
                message: format!("covariate `{name}` value `{raw}` is not numeric"),
            })?);
        }
        outcome.push(y);
        treatment.push(w);
    }
    let n = outcome.len();
    let x = DMatrix::from_row_slice(n, map.covariates.len(), &xs);
    let ds = Dataset::with_levels(outcome, treatment, levels, x, map.covariates.clone())?;
    Ok(ds.with_names(&map.outcome, &map.treatment))
}

/// Writes the dataset with an explicit observed column; masked outcomes use `missing_token`.
/// Floats use the shortest representation that parses back to the same value.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>, missing_token: &str) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    write_csv(ds, &mut writer, missing_token)?;
    writer.flush()?;
    Ok(())
}

pub fn write_csv<W: std::io::Write>(
    ds: &Dataset,
    writer: &mut csv::Writer<W>,
    missing_token: &str,
) -> Result<()> {
    let map = ds.column_map();
    let mut header = vec![map.outcome.clone(), map.treatment.clone()];
    header.push(map.observed.clone().unwrap_or_default());
    header.extend(map.covariates.iter().cloned());
    writer.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        record.clear();
        match ds.outcome[i] {
            Some(v) => record.push(format!("{v:?}")),
            None => record.push(missing_token.to_string()),
        }
        record.push(ds.treatment[i].to_string());
        record.push(if ds.is_observed(i) { "1" } else { "0" }.to_string());
        for j in 0..ds.covariates.ncols() {
            record.push(format!("{:?}", ds.covariates[(i, j)]));
        }
        writer.write_record(&record)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn basic_map() -> ColumnMap {
        ColumnMap {
            outcome: "y".into(),
            treatment: "w".into(),
            observed: None,
            covariates: vec!["x".into()],
            levels: None,
        }
    }

    #[test]
    fn missing_token_sets_observed_flag() {
        let f = write("y,w,x\n1.5,1,0.2\nNA,0,0.7\n2.5,1,-1.0\n");
        let ds = load_csv(f.path(), &basic_map(), "NA").unwrap();
        assert_eq!(ds.observed_indicator(), vec![1.0, 0.0, 1.0]);
        assert_eq!(ds.covariate_names(), &["intercept".to_string(), "x".to_string()]);
        assert!(matches!(ds.outcome(1), Err(Error::MaskedOutcome { row: 1 })));
        assert_eq!(ds.outcome(2).unwrap(), 2.5);
    }

    #[test]
    fn explicit_observed_flag_requires_outcome() {
        let f = write("y,w,s,x\n1.5,1,1,0.2\n,0,1,0.7\n2.5,1,1,-1.0\n");
        let map = ColumnMap { observed: Some("s".into()), ..basic_map() };
        let err = load_csv(f.path(), &map, "NA").unwrap_err();
        assert!(matches!(err, Error::Consistency { row: 1 }), "{err}");
    }

    #[test]
    fn non_binary_treatment_names_row() {
        let f = write("y,w,x\n1.5,1,0.2\n2.0,2,0.7\n");
        let err = load_csv(f.path(), &basic_map(), "NA").unwrap_err();
        match err {
            Error::Schema { row, .. } => assert_eq!(row, 1),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_covariate_is_rejected() {
        let f = write("y,w,x\n1.5,1,\n2.0,0,0.7\n");
        assert!(matches!(
            load_csv(f.path(), &basic_map(), "NA"),
            Err(Error::Schema { row: 0, .. })
        ));
    }

    #[test]
    fn rank_error_lists_dependent_columns() {
        let f = write("y,w,a,b\n1,1,1,2\n2,0,2,4\n3,1,3,6\n4,0,5,10\n");
        let map = ColumnMap { covariates: vec!["a".into(), "b".into()], ..basic_map() };
        match load_csv(f.path(), &map, "NA").unwrap_err() {
            Error::Rank { dependent, .. } => assert_eq!(dependent, vec!["b".to_string()]),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn split_by_arm_filters_observed_rows() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 3.0]);
        let ds = Dataset::new(
            vec![Some(1.0), Some(2.0), None],
            vec![1, 0, 1],
            x,
            vec!["intercept".into(), "x".into()],
        )
        .unwrap();
        assert_eq!(ds.split_by_arm(Arm::TREATED).unwrap(), vec![0]);
        assert_eq!(ds.split_by_arm(Arm::CONTROL).unwrap(), vec![1]);
    }

    #[test]
    fn split_by_arm_fails_when_nothing_observed() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 3.0]);
        let ds = Dataset::new(vec![None; 3], vec![1, 0, 1], x, vec!["i".into(), "x".into()])
            .unwrap();
        assert!(matches!(ds.split_by_arm(Arm::TREATED), Err(Error::Infeasible(_))));
    }

    #[test]
    fn column_subset_resolution() {
        let names: Vec<String> = ["intercept", "x1", "x2", "w"].iter().map(|s| s.to_string()).collect();
        assert_eq!(ColumnSubset::without(&["x1"]).resolve(&names).unwrap(), vec![0, 2, 3]);
        assert_eq!(
            ColumnSubset::Only(vec!["w".into(), "intercept".into()]).resolve(&names).unwrap(),
            vec![0, 3]
        );
        assert!(ColumnSubset::without(&["zz"]).resolve(&names).is_err());
    }

    #[test]
    fn multivalued_augmented_design_is_one_hot() {
        let x = DMatrix::from_row_slice(4, 1, &[0.5, 1.5, -0.2, 0.9]);
        let ds = Dataset::with_levels(
            vec![Some(1.0); 4],
            vec![0, 1, 2, 1],
            3,
            x,
            vec!["x".into()],
        )
        .unwrap();
        let z = ds.augmented_design();
        assert_eq!(z.ncols(), 4);
        assert_eq!(z.row(2).iter().copied().collect::<Vec<_>>(), vec![1.0, -0.2, 0.0, 1.0]);
        assert_eq!(ds.augmented_names()[2], "w_1");
    }
}
