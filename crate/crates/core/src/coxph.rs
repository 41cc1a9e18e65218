//! Cox proportional-hazards baseline fitted by Newton's method on the
//! Breslow partial likelihood.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coefficients are capped at this magnitude when the likelihood is
/// monotone (separation).
pub const COEF_CAP: f64 = 20.0;
/// Gradient norm below which a fit counts as converged.
pub const CONVERGED_GRAD: f64 = 1e-6;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoxError {
    #[error("no events in the data")]
    NoEvents,
    #[error("row {row} has {actual} features, expected {expected}")]
    Dim { row: usize, expected: usize, actual: usize },
    #[error("{0} must have one entry per row")]
    Length(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, CoxError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoxOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub beta: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Set when a coefficient hit [`COEF_CAP`].
    pub separated: bool,
}

/// Partial log-likelihood with its gradient and Hessian at one `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialLikelihood {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

fn check(x: &[Vec<f64>], times: &[f64], events: &[f64]) -> Result<usize> {
    let n = x.len();
    if times.len() != n {
        return Err(CoxError::Length("times"));
    }
    if events.len() != n {
        return Err(CoxError::Length("events"));
    }
    let p = x.first().map_or(0, Vec::len);
    for (row, r) in x.iter().enumerate() {
        if r.len() != p {
            return Err(CoxError::Dim {
                row,
                expected: p,
                actual: r.len(),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(CoxError::NonFinite("covariates"));
        }
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(CoxError::NonFinite("times"));
    }
    Ok(p)
}

/// Breslow partial log-likelihood: each event contributes
/// `η_i - ln Σ_{j: t_j ≥ t_i} exp(η_j)`, with `η = Xβ`.
pub fn partial_log_likelihood(x: &[Vec<f64>], times: &[f64], events: &[f64], beta: &[f64]) -> Result<PartialLikelihood> {
    let p = check(x, times, events)?;
    if beta.len() != p {
        return Err(CoxError::Dim {
            row: 0,
            expected: p,
            actual: beta.len(),
        });
    }
    let n = x.len();
    let eta: Vec<f64> = x
        .iter()
        .map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum())
        .collect();
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut value = 0.0;
    let mut gradient = DVector::zeros(p);
    let mut hessian = DMatrix::zeros(p, p);
    let mut i = 0;
    while i < n {
        let t = times[order[i]];
        let mut end = i;
        while end < n && times[order[end]] == t {
            let j = order[end];
            let w = (eta[j] - shift).exp();
            let xj = DVector::from_row_slice(&x[j]);
            s0 += w;
            s1 += w * &xj;
            s2 += w * &xj * xj.transpose();
            end += 1;
        }
        let mean = &s1 / s0;
        let cov = &s2 / s0 - &mean * mean.transpose();
        for &j in &order[i..end] {
            if events[j] == 1.0 {
                value += eta[j] - (s0.ln() + shift);
                gradient += DVector::from_row_slice(&x[j]) - &mean;
                hessian -= &cov;
            }
        }
        i = end;
    }
    Ok(PartialLikelihood {
        value,
        gradient,
        hessian,
    })
}

/// Newton ascent with step-halving; the likelihood never decreases between
/// iterations.
pub fn cox_fit(x: &[Vec<f64>], times: &[f64], events: &[f64], options: &CoxOptions) -> Result<CoxModel> {
    let p = check(x, times, events)?;
    if !events.contains(&1.0) {
        return Err(CoxError::NoEvents);
    }
    let mut beta = vec![0.0; p];
    let mut current = partial_log_likelihood(x, times, events, &beta)?;
    let mut iterations = 0;
    let mut separated = false;
    while iterations < options.max_iter {
        if current.gradient.norm() <= options.tol {
            break;
        }
        iterations += 1;
        let neg_h = -&current.hessian;
        let step = match neg_h.clone().cholesky() {
            Some(ch) => ch.solve(&current.gradient),
            None => match neg_h.svd(true, true).solve(&current.gradient, 1e-12) {
                Ok(s) => s,
                Err(_) => break,
            },
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut candidate: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let capped = candidate.iter().any(|b| b.abs() > COEF_CAP);
            if capped {
                candidate.iter_mut().for_each(|b| *b = b.clamp(-COEF_CAP, COEF_CAP));
            }
            let next = partial_log_likelihood(x, times, events, &candidate)?;
            if next.value.is_finite() && next.value >= current.value {
                accepted = Some((candidate, next, capped));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, next, capped)) = accepted else {
            break;
        };
        let gain = next.value - current.value;
        beta = candidate;
        current = next;
        if capped {
            separated = true;
            break;
        }
        if gain <= options.tol * (1.0 + current.value.abs()) && current.gradient.norm() <= CONVERGED_GRAD {
            break;
        }
    }
    let gradient_norm = current.gradient.norm();
    Ok(CoxModel {
        beta,
        log_likelihood: current.value,
        iterations,
        gradient_norm,
        converged: !separated && gradient_norm <= CONVERGED_GRAD,
        separated,
    })
}

/// Linear predictor `βᵀx`; higher means shorter expected survival.
pub fn cox_risk(model: &CoxModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.beta.len() {
        return Err(CoxError::Dim {
            row: 0,
            expected: model.beta.len(),
            actual: x.len(),
        });
    }
    Ok(x.iter().zip(&model.beta).map(|(a, b)| a * b).sum())
}
