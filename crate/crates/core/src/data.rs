//! Dense row-major matrices and feature datasets.
//!
//! Datasets are read from and written to CSV with a header row. A column named
//! [`TARGET_COLUMN`] holds the target; every other column is a feature, kept in
//! declaration order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, SmcError};

pub const TARGET_COLUMN: &str = "__target__";

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SmcError::LengthMismatch {
                left: data.len(),
                right: rows * cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from rows of equal length. An empty row list yields a
    /// `0 x 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_dim(cols, row.as_ref().len())?;
            data.extend_from_slice(row.as_ref());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Empty matrix with a fixed column count, for incremental row pushes.
    pub fn with_cols(cols: usize) -> Self {
        Self {
            rows: 0,
            cols,
            data: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        check_dim(self.cols, row.len())?;
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.iter_rows().map(|r| r[j]).collect()
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows > 0 && other.rows > 0 {
            check_dim(self.cols, other.cols)?;
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-column mean and sample standard deviation (`n - 1` denominator;
    /// zero for a single row).
    pub fn column_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.rows as f64;
        let mut mean = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1.0));
        let mut var = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| if self.rows > 1 { (s / (n - 1.0)).sqrt() } else { 0.0 })
            .collect();
        (mean, std)
    }
}

/// Feature matrix with optional targets.
///
/// Construction rejects ragged rows, zero-width features and non-finite
/// values, so downstream code never has to re-check them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    targets: Option<Vec<f64>>,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Matrix, targets: Option<Vec<f64>>) -> Result<Self> {
        let names = (0..features.cols()).map(|j| format!("x{j}")).collect();
        Self::with_names(features, targets, names)
    }

    pub fn with_names(
        features: Matrix,
        targets: Option<Vec<f64>>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if features.cols() == 0 {
            return Err(SmcError::invalid("dataset needs at least one feature column"));
        }
        check_dim(features.cols(), feature_names.len())?;
        if !features.is_finite() {
            return Err(SmcError::NonFinite("dataset features".into()));
        }
        if let Some(t) = &targets {
            if t.len() != features.rows() {
                return Err(SmcError::LengthMismatch {
                    left: t.len(),
                    right: features.rows(),
                });
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(SmcError::NonFinite("dataset targets".into()));
            }
        }
        Ok(Self {
            features,
            targets,
            feature_names,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> Option<&[f64]> {
        self.targets.as_deref()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Targets as dense class indices. Fails on missing, negative or
    /// fractional targets.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        let targets = self
            .targets
            .as_ref()
            .ok_or_else(|| SmcError::invalid("dataset has no targets"))?;
        targets
            .iter()
            .map(|&t| {
                if t >= 0.0 && t.fract() == 0.0 {
                    Ok(t as usize)
                } else {
                    Err(SmcError::invalid(format!("{t} is not a class index")))
                }
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            targets: self
                .targets
                .as_ref()
                .map(|t| indices.iter().map(|&i| t[i]).collect()),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Parses CSV with a header row. Only a header is accepted as an empty
    /// dataset; its dimension comes from the header.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let target_col = header.iter().position(|h| h == TARGET_COLUMN);
        let names: Vec<String> = header
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != target_col)
            .map(|(_, h)| h.to_string())
            .collect();
        let mut features = Matrix::with_cols(names.len());
        let mut targets = target_col.map(|_| Vec::new());
        let mut row = Vec::with_capacity(names.len());
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            row.clear();
            for (i, field) in record.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    SmcError::invalid(format!(
                        "row {}: column {} value {field:?} is not a number",
                        line + 2,
                        header.get(i).unwrap_or("?")
                    ))
                })?;
                if Some(i) == target_col {
                    targets.as_mut().unwrap().push(v);
                } else {
                    row.push(v);
                }
            }
            features.push_row(&row)?;
        }
        Dataset::with_names(features, targets, names)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| SmcError::file(path, e))?;
        Self::from_csv_reader(file).map_err(|e| SmcError::file(path, e))
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        if self.targets.is_some() {
            header.push(TARGET_COLUMN);
        }
        wtr.write_record(&header)?;
        for (i, row) in self.features.iter_rows().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            if let Some(t) = &self.targets {
                rec.push(t[i].to_string());
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| SmcError::file(path, e))?;
        self.to_csv_writer(std::io::BufWriter::new(file))
    }
}
