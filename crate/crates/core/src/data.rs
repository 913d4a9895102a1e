//! Numeric CSV ingestion, standardization, k-fold splits and RMSE.

use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Which column holds the regression target.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TargetColumn {
    #[default]
    Last,
    Index(usize),
    Name(String),
}

impl FromStr for TargetColumn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::Domain("empty target column".into()));
        }
        if s.eq_ignore_ascii_case("last") {
            return Ok(Self::Last);
        }
        Ok(s.parse::<usize>()
            .map_or_else(|_| Self::Name(s.to_string()), Self::Index))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub feature_names: Option<Vec<String>>,
    /// Rows dropped because they held a non-finite value.
    pub rejected_rows: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            rejected_rows: 0,
        }
    }
}

/// Parsed numeric table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Option<Vec<String>>,
    pub rows: Vec<Vec<f64>>,
    pub rejected_rows: usize,
}

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains(',') {
        line.split(',').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

/// Parses comma- or whitespace-delimited numeric text. A first line with any
/// non-numeric field is taken as the header.
pub fn parse_table(text: &str) -> Result<Table> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .peekable();
    let header = match lines.peek() {
        Some((_, first)) if split_fields(first).iter().any(|f| f.parse::<f64>().is_err()) => {
            let names = split_fields(first).into_iter().map(String::from).collect();
            lines.next();
            Some(names)
        }
        _ => None,
    };
    let mut width = header.as_ref().map(Vec::len);
    let mut rows = Vec::new();
    let mut rejected_rows = 0;
    for (line_no, line) in lines {
        let fields = split_fields(line);
        if let Some(w) = width {
            if fields.len() != w {
                return Err(Error::Parse {
                    row: line_no + 1,
                    column: fields.len().min(w) + 1,
                    message: format!("expected {w} fields, found {}", fields.len()),
                });
            }
        }
        width = Some(fields.len());
        let row = fields
            .iter()
            .enumerate()
            .map(|(c, f)| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    row: line_no + 1,
                    column: c + 1,
                    message: format!("not a number: {f:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.iter().all(|v| v.is_finite()) {
            rows.push(row);
        } else {
            rejected_rows += 1;
        }
    }
    if rejected_rows > 0 {
        log::warn!("rejected {rejected_rows} row(s) with missing or non-finite values");
    }
    Ok(Table {
        header,
        rows,
        rejected_rows,
    })
}

fn resolve_target(target: &TargetColumn, width: usize, header: Option<&[String]>) -> Result<usize> {
    match target {
        TargetColumn::Last => Ok(width - 1),
        TargetColumn::Index(i) if *i < width => Ok(*i),
        TargetColumn::Index(i) => Err(Error::InvalidDimension(format!(
            "target column {i} out of range for {width} columns"
        ))),
        TargetColumn::Name(name) => header
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| Error::Domain(format!("no column named {name:?}"))),
    }
}

/// Splits a table into inputs and target.
pub fn parse_dataset(text: &str, target: &TargetColumn) -> Result<Dataset> {
    let table = parse_table(text)?;
    let width = match (&table.header, table.rows.first()) {
        (_, Some(r)) => r.len(),
        (Some(h), None) if table.rejected_rows > 0 => h.len(),
        _ => return Err(Error::EmptyInput),
    };
    if table.rows.is_empty() {
        return Err(Error::InsufficientData(format!(
            "all {} data rows were rejected",
            table.rejected_rows
        )));
    }
    if width < 2 {
        return Err(Error::InvalidDimension(
            "need at least one input column and a target".into(),
        ));
    }
    let t = resolve_target(target, width, table.header.as_deref())?;
    let n = table.rows.len();
    let x = DMatrix::from_fn(n, width - 1, |i, j| table.rows[i][if j < t { j } else { j + 1 }]);
    let y = table.rows.iter().map(|r| r[t]).collect();
    let feature_names = table.header.map(|h| {
        h.into_iter()
            .enumerate()
            .filter(|(c, _)| *c != t)
            .map(|(_, s)| s)
            .collect()
    });
    Ok(Dataset {
        x,
        y,
        feature_names,
        rejected_rows: table.rejected_rows,
    })
}

pub fn load_csv(path: impl AsRef<Path>, target: &TargetColumn) -> Result<Dataset> {
    parse_dataset(&std::fs::read_to_string(path)?, target)
}

/// Reads an input-only table; an empty file yields a `0 x 0` matrix.
pub fn load_inputs(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let table = parse_table(&std::fs::read_to_string(path)?)?;
    let width = table.rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(table.rows.len(), width, |i, j| table.rows[i][j]))
}

/// Per-column affine standardization fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 })
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>, y: &[f64]) -> Self {
        let (x_mean, x_std) = (0..x.ncols()).map(|j| mean_std(x.column(j).iter().copied())).unzip();
        let (y_mean, y_std) = mean_std(y.iter().copied());
        Self {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }
    }

    pub fn transform_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.x_mean[j]) / self.x_std[j]
        })
    }

    pub fn transform_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_std).collect()
    }

    pub fn inverse_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.y_std + self.y_mean).collect()
    }

    pub fn inverse_var(&self, var: &[f64]) -> Vec<f64> {
        var.iter().map(|v| v * self.y_std * self.y_std).collect()
    }
}

/// Seeded k-fold split: `k` near-equal disjoint test blocks covering `0..n`.
pub fn kfold_partitions(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Domain(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::InsufficientData(format!("{n} points cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut start = 0;
    Ok((0..k)
        .map(|f| {
            let size = n / k + usize::from(f < n % k);
            let mut test = order[start..start + size].to_vec();
            start += size;
            test.sort_unstable();
            let mut is_test = vec![false; n];
            test.iter().for_each(|&i| is_test[i] = true);
            let train = (0..n).filter(|&i| !is_test[i]).collect();
            (train, test)
        })
        .collect())
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::InvalidDimension(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sse: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sse / targets.len() as f64).sqrt())
}
