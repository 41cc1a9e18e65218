//! Single deterministic chained-equation imputation of missing covariates.
//!
//! Missing cells start at the column mean (continuous) or mode (binary).
//! Each round then regresses every column on all other covariates, using
//! rows where that column is observed, and replaces its missing cells with
//! the predictions. Continuous columns use least squares, binary columns a
//! Newton-fitted logistic regression thresholded at 0.5. Survival times,
//! events and treatments never enter the design matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::diffcore::sigmoid;
use crate::rng::{standard_normal, SurvRng};
use crate::schema::ColumnKind;

pub const DEFAULT_ROUNDS: usize = 5;
const NEWTON_MAX_ITER: usize = 25;
const NEWTON_TOL: f64 = 1e-8;
/// Logistic coefficients beyond this magnitude indicate separation.
const SEPARATION_LIMIT: f64 = 25.0;
/// Largest residual below which a logistic fit counts as separated.
const SEPARATED_RESIDUAL: f64 = 1e-3;
const SVD_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ImputeError {
    #[error("column {0:?} has no observed values")]
    AllMissing(String),
    #[error("rounds must be at least 1")]
    NoRounds,
    #[error("imputation model was fitted on a different schema")]
    SchemaMismatch,
    #[error("row has {actual} covariates, expected {expected}")]
    RowLength { expected: usize, actual: usize },
}

pub type Result<T> = std::result::Result<T, ImputeError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImputeOptions {
    pub rounds: usize,
    /// Adds residual-scale noise to continuous predictions during fitting.
    pub jitter: bool,
}

impl Default for ImputeOptions {
    fn default() -> Self {
        Self {
            rounds: DEFAULT_ROUNDS,
            jitter: false,
        }
    }
}

/// Per-column fill value and, when a regression could be fitted, the
/// coefficients `[intercept, others...]` over the remaining columns in
/// schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnModel {
    pub name: String,
    pub kind: ColumnKind,
    pub fill: f64,
    pub coefficients: Option<Vec<f64>>,
}

impl ColumnModel {
    fn predict(&self, row: &[f64], column: usize) -> f64 {
        let Some(beta) = &self.coefficients else {
            return self.fill;
        };
        let mut eta = beta[0];
        let mut k = 1;
        for (c, v) in row.iter().enumerate() {
            if c != column {
                eta += beta[k] * v;
                k += 1;
            }
        }
        match self.kind {
            ColumnKind::Continuous => eta,
            ColumnKind::Binary => f64::from(u8::from(sigmoid(eta) >= 0.5)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeModel {
    pub columns: Vec<ColumnModel>,
    pub rounds: usize,
}

impl ImputeModel {
    fn check(&self, ds: &Dataset) -> Result<()> {
        let same = ds.schema.covariates.len() == self.columns.len()
            && ds
                .schema
                .covariates
                .iter()
                .zip(&self.columns)
                .all(|(c, m)| c.name == m.name && c.kind == m.kind);
        if same {
            Ok(())
        } else {
            Err(ImputeError::SchemaMismatch)
        }
    }

    /// Completes one covariate row: absent entries start at the stored fill
    /// values, then one regression pass in column order replaces them.
    pub fn complete(&self, values: &[Option<f64>]) -> Result<Vec<f64>> {
        if values.len() != self.columns.len() {
            return Err(ImputeError::RowLength {
                expected: self.columns.len(),
                actual: values.len(),
            });
        }
        let mut row: Vec<f64> = values
            .iter()
            .zip(&self.columns)
            .map(|(v, m)| v.unwrap_or(m.fill))
            .collect();
        for (j, m) in self.columns.iter().enumerate() {
            if values[j].is_none() {
                row[j] = m.predict(&row, j);
            }
        }
        Ok(row)
    }
}

fn fill_value(kind: ColumnKind, observed: &[f64]) -> f64 {
    match kind {
        ColumnKind::Continuous => observed.iter().sum::<f64>() / observed.len() as f64,
        ColumnKind::Binary => {
            let ones = observed.iter().filter(|&&v| v == 1.0).count();
            f64::from(u8::from(2 * ones > observed.len()))
        }
    }
}

fn design(table: &[Vec<f64>], rows: &[usize], column: usize) -> DMatrix<f64> {
    let p = table.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), p, |r, c| match c {
        0 => 1.0,
        c => {
            let src = if c <= column { c - 1 } else { c };
            table[rows[r]][src]
        }
    })
}

/// Minimum-norm least squares via SVD.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<Vec<f64>> {
    let beta = x.clone().svd(true, true).solve(y, SVD_EPS).ok()?;
    beta.iter().all(|b| b.is_finite()).then(|| beta.iter().copied().collect())
}

/// Logistic regression by Newton's method. Returns `None` when the fit does
/// not converge or the data are (quasi-)separable.
pub fn logistic_newton(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<Vec<f64>> {
    let (n, m) = x.shape();
    let mut beta = DVector::zeros(m);
    for _ in 0..NEWTON_MAX_ITER {
        let eta = x * &beta;
        let p = eta.map(sigmoid);
        let grad = x.transpose() * (y - &p);
        if grad.norm() / n as f64 <= NEWTON_TOL {
            // A near-perfect fit on every row means the classes are separable
            // and the maximum-likelihood estimate does not exist.
            let worst = y.iter().zip(p.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let ok = worst > SEPARATED_RESIDUAL
                && beta.iter().all(|b: &f64| b.is_finite() && b.abs() <= SEPARATION_LIMIT);
            return ok.then(|| beta.iter().copied().collect());
        }
        let w = p.map(|v| v * (1.0 - v));
        let mut xw = x.clone();
        for (r, wr) in w.iter().enumerate() {
            xw.row_mut(r).scale_mut(*wr);
        }
        let hessian = x.transpose() * xw;
        let step = hessian.svd(true, true).solve(&grad, SVD_EPS).ok()?;
        beta += step;
        if beta.iter().any(|b| !b.is_finite() || b.abs() > SEPARATION_LIMIT) {
            return None;
        }
    }
    None
}

fn fit_column(table: &[Vec<f64>], rows: &[usize], column: usize, kind: ColumnKind) -> Option<Vec<f64>> {
    let x = design(table, rows, column);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| table[r][column]));
    match kind {
        ColumnKind::Continuous => least_squares(&x, &y),
        ColumnKind::Binary => {
            let ones = y.iter().filter(|&&v| v == 1.0).count();
            if ones == 0 || ones == rows.len() {
                None
            } else {
                logistic_newton(&x, &y)
            }
        }
    }
}

/// Fits the chained-equation model on the covariates of `ds`.
pub fn fit_impute(ds: &Dataset, options: &ImputeOptions, rng: &mut SurvRng) -> Result<ImputeModel> {
    if options.rounds == 0 {
        return Err(ImputeError::NoRounds);
    }
    let kinds = ds.schema.kinds();
    let n = ds.n_rows();
    let observed_rows: Vec<Vec<usize>> = (0..kinds.len())
        .map(|j| (0..n).filter(|&r| ds.observed[r][j]).collect())
        .collect();
    let mut columns = Vec::with_capacity(kinds.len());
    for (j, cov) in ds.schema.covariates.iter().enumerate() {
        if observed_rows[j].is_empty() {
            return Err(ImputeError::AllMissing(cov.name.clone()));
        }
        let vals: Vec<f64> = observed_rows[j].iter().map(|&r| ds.covariates[r][j]).collect();
        columns.push(ColumnModel {
            name: cov.name.clone(),
            kind: cov.kind,
            fill: fill_value(cov.kind, &vals),
            coefficients: None,
        });
    }

    let mut table: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            (0..kinds.len())
                .map(|j| if ds.observed[r][j] { ds.covariates[r][j] } else { columns[j].fill })
                .collect()
        })
        .collect();

    for _ in 0..options.rounds {
        for j in 0..kinds.len() {
            let coefficients = fit_column(&table, &observed_rows[j], j, kinds[j]);
            columns[j].coefficients = coefficients;
            let residual_sd = if options.jitter && kinds[j] == ColumnKind::Continuous {
                residual_sd(&table, &observed_rows[j], j, &columns[j])
            } else {
                0.0
            };
            for r in (0..n).filter(|&r| !ds.observed[r][j]) {
                let mut v = columns[j].predict(&table[r], j);
                if residual_sd > 0.0 {
                    v += residual_sd * standard_normal(rng);
                }
                table[r][j] = v;
            }
        }
    }
    Ok(ImputeModel {
        columns,
        rounds: options.rounds,
    })
}

fn residual_sd(table: &[Vec<f64>], rows: &[usize], column: usize, model: &ColumnModel) -> f64 {
    if rows.len() < 2 {
        return 0.0;
    }
    let ss: f64 = rows
        .iter()
        .map(|&r| (table[r][column] - model.predict(&table[r], column)).powi(2))
        .sum();
    (ss / (rows.len() - 1) as f64).sqrt()
}

/// Returns a completed copy of `ds`: observed cells, treatments, times and
/// events are untouched; every cell is marked observed afterwards.
pub fn apply_impute(ds: &Dataset, model: &ImputeModel) -> Result<Dataset> {
    model.check(ds)?;
    let mut out = ds.clone();
    for r in 0..ds.n_rows() {
        let values: Vec<Option<f64>> = ds.covariates[r]
            .iter()
            .zip(&ds.observed[r])
            .map(|(&v, &o)| o.then_some(v))
            .collect();
        out.covariates[r] = model.complete(&values)?;
        out.observed[r].iter_mut().for_each(|o| *o = true);
    }
    Ok(out)
}
