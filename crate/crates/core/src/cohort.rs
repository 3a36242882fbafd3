//! Densities from published demographics and rejection subsampling of a
//! pooled cohort.
//!
//! A pooled cohort holds instances simulated under several models, each
//! tagged with the model that generated it. Subsampling keeps an instance
//! only if its generating model is also the one under whose demographics the
//! covariates are most likely.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Matrix};
use crate::density::{fit_factorised, DensityModel, DimSpec};
use crate::error::{check_dim, Result, SmcError};

pub const ORIGIN_COLUMN: &str = "__origin__";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Continuous { mean: f64, std: f64 },
    Binary { p: f64 },
}

impl Cell {
    fn to_dim(self) -> DimSpec {
        match self {
            Cell::Continuous { mean, std } => DimSpec::Continuous { mean, std },
            Cell::Binary { p } => DimSpec::Binary { p },
        }
    }

    fn is_binary(&self) -> bool {
        matches!(self, Cell::Binary { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicsRow {
    pub id: String,
    /// Covariate name to summary; `None` marks a missing cell.
    pub covariates: BTreeMap<String, Option<Cell>>,
}

/// Per-model covariate summaries, covariates in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicsTable {
    pub covariates: Vec<String>,
    pub models: Vec<DemographicsRow>,
}

impl DemographicsTable {
    /// Checks value ranges, that every row names exactly the declared
    /// covariates, and that each covariate is consistently continuous or
    /// binary.
    pub fn validate(&self) -> Result<()> {
        if self.covariates.is_empty() || self.models.is_empty() {
            return Err(SmcError::Empty("demographics table"));
        }
        for row in &self.models {
            if row.covariates.len() != self.covariates.len()
                || self.covariates.iter().any(|c| !row.covariates.contains_key(c))
            {
                return Err(SmcError::invalid(format!(
                    "model {} must list exactly the covariates {:?} (null for missing)",
                    row.id, self.covariates
                )));
            }
            for (name, cell) in &row.covariates {
                match cell {
                    Some(Cell::Continuous { mean, std }) if !(mean.is_finite() && std.is_finite() && *std > 0.0) => {
                        return Err(SmcError::invalid(format!(
                            "model {}: covariate {name} needs finite mean and std > 0",
                            row.id
                        )))
                    }
                    Some(Cell::Binary { p }) if !(0.0..=1.0).contains(p) => {
                        return Err(SmcError::invalid(format!(
                            "model {}: covariate {name} has p = {p} outside [0, 1]",
                            row.id
                        )))
                    }
                    _ => {}
                }
            }
        }
        for name in &self.covariates {
            let kinds: Vec<bool> = self
                .models
                .iter()
                .filter_map(|r| r.covariates[name].map(|c| c.is_binary()))
                .collect();
            if kinds.windows(2).any(|w| w[0] != w[1]) {
                return Err(SmcError::invalid(format!(
                    "covariate {name} mixes continuous and binary cells"
                )));
            }
        }
        Ok(())
    }

    pub fn has_missing(&self) -> bool {
        self.models.iter().any(|r| r.covariates.values().any(Option::is_none))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: DemographicsTable = serde_json::from_str(text)?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SmcError::file(path, e))?;
        Self::from_json(&text).map_err(|e| SmcError::file(path, e))
    }
}

/// Fills each missing cell with the across-model mean of that covariate's
/// observed means and stds (or Bernoulli probabilities).
pub fn impute_missing(table: &DemographicsTable) -> Result<DemographicsTable> {
    table.validate()?;
    let mut out = table.clone();
    for name in &table.covariates {
        let observed: Vec<Cell> = table
            .models
            .iter()
            .filter_map(|r| r.covariates[name])
            .collect();
        if observed.is_empty() {
            return Err(SmcError::invalid(format!(
                "covariate {name} is missing for every model"
            )));
        }
        let n = observed.len() as f64;
        let fill = if observed[0].is_binary() {
            let p = observed
                .iter()
                .map(|c| match c {
                    Cell::Binary { p } => *p,
                    Cell::Continuous { .. } => unreachable!("validated"),
                })
                .sum::<f64>()
                / n;
            Cell::Binary { p }
        } else {
            let (mut m, mut s) = (0.0, 0.0);
            for c in &observed {
                if let Cell::Continuous { mean, std } = c {
                    m += mean;
                    s += std;
                }
            }
            Cell::Continuous { mean: m / n, std: s / n }
        };
        for row in &mut out.models {
            let cell = row.covariates.get_mut(name).expect("validated");
            if cell.is_none() {
                *cell = Some(fill);
            }
        }
    }
    Ok(out)
}

/// One factorised density per model row, dimensions in covariate order.
pub fn build_cohort_densities(table: &DemographicsTable) -> Result<Vec<DensityModel>> {
    table.validate()?;
    table
        .models
        .iter()
        .map(|row| {
            let dims = table
                .covariates
                .iter()
                .map(|c| {
                    row.covariates[c].map(Cell::to_dim).ok_or_else(|| {
                        SmcError::invalid(format!("model {}: covariate {c} is missing; impute first", row.id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            fit_factorised(&dims)
        })
        .collect()
}

/// Instances with the index of the model that generated each one.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledCohort {
    instances: Dataset,
    origin: Vec<usize>,
}

impl PooledCohort {
    pub fn new(instances: Dataset, origin: Vec<usize>) -> Result<Self> {
        if origin.len() != instances.len() {
            return Err(SmcError::LengthMismatch {
                left: origin.len(),
                right: instances.len(),
            });
        }
        Ok(Self { instances, origin })
    }

    pub fn instances(&self) -> &Dataset {
        &self.instances
    }

    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    /// Reads feature columns plus an integer [`ORIGIN_COLUMN`].
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let origin_col = header
            .iter()
            .position(|h| h == ORIGIN_COLUMN)
            .ok_or_else(|| SmcError::invalid(format!("cohort csv needs a {ORIGIN_COLUMN} column")))?;
        let names: Vec<String> = header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != origin_col)
            .map(|(_, h)| h.to_string())
            .collect();
        let mut features = Matrix::with_cols(names.len());
        let mut origin = Vec::new();
        let mut row = Vec::with_capacity(names.len());
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            row.clear();
            for (i, field) in record.iter().enumerate() {
                if i == origin_col {
                    let o: usize = field.parse().map_err(|_| {
                        SmcError::invalid(format!("row {}: origin {field:?} is not a model index", line + 2))
                    })?;
                    origin.push(o);
                } else {
                    row.push(field.parse().map_err(|_| {
                        SmcError::invalid(format!(
                            "row {}: column {} value {field:?} is not a number",
                            line + 2,
                            &header[i]
                        ))
                    })?);
                }
            }
            features.push_row(&row)?;
        }
        Self::new(Dataset::with_names(features, None, names)?, origin)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| SmcError::file(path, e))?;
        Self::from_csv_reader(file).map_err(|e| SmcError::file(path, e))
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.instances.feature_names().iter().map(String::as_str).collect();
        header.push(ORIGIN_COLUMN);
        wtr.write_record(&header)?;
        for (x, o) in self.instances.features().iter_rows().zip(&self.origin) {
            let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            rec.push(o.to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Number of instances per origin index, for `n_models` models.
    pub fn counts(&self, n_models: usize) -> Vec<usize> {
        let mut c = vec![0; n_models];
        for &o in &self.origin {
            if o < n_models {
                c[o] += 1;
            }
        }
        c
    }
}

/// Index of the density with the highest log-likelihood, lowest index on ties.
pub fn most_likely(densities: &[DensityModel], x: &[f64]) -> Result<usize> {
    let mut best = 0;
    let mut best_lp = f64::NEG_INFINITY;
    for (j, d) in densities.iter().enumerate() {
        let lp = d.log_density(x)?;
        if lp > best_lp {
            best = j;
            best_lp = lp;
        }
    }
    Ok(best)
}

/// Keeps instance `i` iff its most likely model is its origin. Order is preserved.
pub fn rejection_subsample(cohort: &PooledCohort, densities: &[DensityModel]) -> Result<PooledCohort> {
    if densities.is_empty() {
        return Err(SmcError::Empty("cohort densities"));
    }
    for d in densities {
        check_dim(cohort.instances.dim(), d.dim())?;
    }
    if let Some(&o) = cohort.origin.iter().find(|&&o| o >= densities.len()) {
        return Err(SmcError::invalid(format!(
            "origin {o} has no density ({} models)",
            densities.len()
        )));
    }
    let mut keep = Vec::new();
    for (i, (x, &o)) in cohort.instances.features().iter_rows().zip(&cohort.origin).enumerate() {
        if most_likely(densities, x)? == o {
            keep.push(i);
        }
    }
    Ok(PooledCohort {
        instances: cohort.instances.subset(&keep),
        origin: keep.iter().map(|&i| cohort.origin[i]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(json: &str) -> DemographicsTable {
        DemographicsTable::from_json(json).unwrap()
    }

    #[test]
    fn no_missing_is_unchanged() {
        let t = table(
            r#"{"covariates":["age"],"models":[
                {"id":"a","covariates":{"age":{"mean":40,"std":5}}},
                {"id":"b","covariates":{"age":{"mean":60,"std":9}}}]}"#,
        );
        assert_eq!(impute_missing(&t).unwrap(), t);
    }

    #[test]
    fn two_model_imputation_copies_other_row() {
        let t = table(
            r#"{"covariates":["bmi"],"models":[
                {"id":"a","covariates":{"bmi":{"mean":28,"std":7}}},
                {"id":"b","covariates":{"bmi":null}}]}"#,
        );
        let filled = impute_missing(&t).unwrap();
        assert_eq!(filled.models[1].covariates["bmi"], filled.models[0].covariates["bmi"]);
    }

    #[test]
    fn covariate_missing_everywhere_fails() {
        let t = table(
            r#"{"covariates":["bmi","age"],"models":[
                {"id":"a","covariates":{"bmi":null,"age":{"mean":1,"std":1}}}]}"#,
        );
        assert!(impute_missing(&t).is_err());
        assert!(build_cohort_densities(&t).is_err());
    }

    #[test]
    fn rows_must_list_declared_covariates() {
        let bad = r#"{"covariates":["age","sex"],"models":[{"id":"a","covariates":{"age":{"mean":1,"std":1}}}]}"#;
        assert!(DemographicsTable::from_json(bad).is_err());
        let mixed = r#"{"covariates":["x"],"models":[
            {"id":"a","covariates":{"x":{"mean":1,"std":1}}},
            {"id":"b","covariates":{"x":{"p":0.5}}}]}"#;
        assert!(DemographicsTable::from_json(mixed).is_err());
        let bad_p = r#"{"covariates":["x"],"models":[{"id":"a","covariates":{"x":{"p":1.5}}}]}"#;
        assert!(DemographicsTable::from_json(bad_p).is_err());
    }

    #[test]
    fn single_model_keeps_everything() {
        let d = vec![fit_factorised(&[DimSpec::Continuous { mean: 0.0, std: 1.0 }]).unwrap()];
        let ds = Dataset::new(Matrix::from_rows(&[[0.0], [50.0], [-3.0]]).unwrap(), None).unwrap();
        let c = PooledCohort::new(ds, vec![0, 0, 0]).unwrap();
        assert_eq!(rejection_subsample(&c, &d).unwrap(), c);
    }

    #[test]
    fn instance_at_model_mean_kept_only_for_that_origin() {
        let d = vec![
            fit_factorised(&[DimSpec::Continuous { mean: 0.0, std: 1.0 }]).unwrap(),
            fit_factorised(&[DimSpec::Continuous { mean: 6.0, std: 1.0 }]).unwrap(),
        ];
        let ds = Dataset::new(Matrix::from_rows(&[[0.0], [0.0], [6.0]]).unwrap(), None).unwrap();
        let c = PooledCohort::new(ds, vec![0, 1, 1]).unwrap();
        let kept = rejection_subsample(&c, &d).unwrap();
        assert_eq!(kept.origin(), &[0, 1]);
        assert_eq!(kept.instances().features().column(0), vec![0.0, 6.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let n = fit_factorised(&[DimSpec::Continuous { mean: 0.0, std: 1.0 }]).unwrap();
        assert_eq!(most_likely(&[n.clone(), n], &[0.3]).unwrap(), 0);
    }

    #[test]
    fn cohort_csv_round_trip() {
        let text = "age,sex,__origin__\n40,1,0\n71.5,0,2\n";
        let c = PooledCohort::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(c.origin(), &[0, 2]);
        assert_eq!(c.counts(3), vec![1, 0, 1]);
        let mut out = Vec::new();
        c.to_csv_writer(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
        assert!(PooledCohort::from_csv_reader("age\n1\n".as_bytes()).is_err());
    }

    #[test]
    fn bundled_vancomycin_table_imputes_missing_bmi() {
        let t = DemographicsTable::from_json(include_str!("../data/vancomycin_demographics.json")).unwrap();
        assert!(t.has_missing());
        let filled = impute_missing(&t).unwrap();
        let bmi = filled.models[5].covariates["bmi"].unwrap();
        match bmi {
            Cell::Continuous { mean, .. } => assert!((mean - 31.42).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
        assert_eq!(build_cohort_densities(&filled).unwrap().len(), 6);
    }
}
