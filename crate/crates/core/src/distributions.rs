//! Densities, survival functions, moments and sampling for the model's
//! distribution families.
//!
//! Weibull uses the scale/shape convention: density
//! `(k/λ)(y/λ)^(k-1) exp(-(y/λ)^k)` and survival `exp(-(y/λ)^k)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{standard_normal, SurvRng};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-6;

/// Additive floor applied after softplus for every positive parameter.
pub const POSITIVE_FLOOR: f64 = 1e-6;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("{what} must be 0 or 1, got {value}")]
    NotBinary { what: &'static str, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
}

pub type Result<T> = std::result::Result<T, DistError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullParams {
    pub lambda: f64,
    pub k: f64,
}

impl WeibullParams {
    pub fn new(lambda: f64, k: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(DistError::NonPositive {
                what: "weibull scale",
                value: lambda,
            });
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(DistError::NonPositive {
                what: "weibull shape",
                value: k,
            });
        }
        Ok(Self { lambda, k })
    }

    /// Same shape, time axis stretched by `factor`.
    pub fn rescaled(self, factor: f64) -> Self {
        Self {
            lambda: self.lambda * factor,
            k: self.k,
        }
    }

    pub fn survival(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 1.0;
        }
        (-(y / self.lambda).powf(self.k)).exp()
    }

    pub fn quantile(&self, p: f64) -> f64 {
        self.lambda * (-(1.0 - p).ln()).powf(1.0 / self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagNormalParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DiagNormalParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(DistError::DimMismatch {
                expected: mu.len(),
                actual: sigma.len(),
            });
        }
        if let Some(&s) = sigma.iter().find(|&&s| !(s > 0.0)) {
            return Err(DistError::NonPositive {
                what: "normal standard deviation",
                value: s,
            });
        }
        Ok(Self { mu, sigma })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernoulliParams {
    pub pi: f64,
}

impl BernoulliParams {
    /// Clamps `pi` into `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn new(pi: f64) -> Self {
        Self {
            pi: pi.clamp(PROB_EPS, 1.0 - PROB_EPS),
        }
    }
}

fn check_time(y: f64) -> Result<()> {
    if y > 0.0 && y.is_finite() {
        Ok(())
    } else {
        Err(DistError::NonPositive {
            what: "survival time",
            value: y,
        })
    }
}

fn check_binary(what: &'static str, v: f64) -> Result<()> {
    if v == 0.0 || v == 1.0 {
        Ok(())
    } else {
        Err(DistError::NotBinary { what, value: v })
    }
}

pub fn weibull_log_pdf(y: f64, p: &WeibullParams) -> Result<f64> {
    check_time(y)?;
    let log_ratio = (y / p.lambda).ln();
    Ok(p.k.ln() - p.lambda.ln() + (p.k - 1.0) * log_ratio - (p.k * log_ratio).exp())
}

pub fn weibull_log_survival(y: f64, p: &WeibullParams) -> Result<f64> {
    check_time(y)?;
    Ok(-(y / p.lambda).powf(p.k))
}

/// Right-censored Weibull log-likelihood: density for events (`delta = 1`),
/// survival for censored rows (`delta = 0`).
pub fn censored_log_lik(y: f64, delta: f64, p: &WeibullParams) -> Result<f64> {
    check_binary("event indicator", delta)?;
    if delta == 1.0 {
        weibull_log_pdf(y, p)
    } else {
        weibull_log_survival(y, p)
    }
}

pub fn weibull_mean(p: &WeibullParams) -> f64 {
    p.lambda * gamma(1.0 + 1.0 / p.k)
}

pub fn diag_normal_log_pdf(z: &[f64], p: &DiagNormalParams) -> Result<f64> {
    if z.len() != p.dim() {
        return Err(DistError::DimMismatch {
            expected: p.dim(),
            actual: z.len(),
        });
    }
    Ok(z.iter()
        .zip(&p.mu)
        .zip(&p.sigma)
        .map(|((&zi, &m), &s)| {
            let u = (zi - m) / s;
            -0.5 * LN_2PI - s.ln() - 0.5 * u * u
        })
        .sum())
}

pub fn bernoulli_log_pmf(t: f64, p: &BernoulliParams) -> Result<f64> {
    check_binary("bernoulli outcome", t)?;
    Ok(if t == 1.0 {
        p.pi.ln()
    } else {
        (1.0 - p.pi).ln()
    })
}

/// `KL(N(μ, σ²I) || N(0, I))` in closed form.
pub fn kl_diag_normal_vs_standard(p: &DiagNormalParams) -> f64 {
    0.5 * p
        .mu
        .iter()
        .zip(&p.sigma)
        .map(|(&m, &s)| m * m + s * s - 1.0 - (s * s).ln())
        .sum::<f64>()
}

/// A reparameterized draw: `z = μ + σ ⊙ ε` with the noise kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamSample {
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
}

pub fn sample_diag_normal(p: &DiagNormalParams, rng: &mut SurvRng) -> ReparamSample {
    let eps: Vec<f64> = (0..p.dim()).map(|_| standard_normal(rng)).collect();
    let z = reparameterize(p, &eps);
    ReparamSample { z, eps }
}

pub fn reparameterize(p: &DiagNormalParams, eps: &[f64]) -> Vec<f64> {
    p.mu.iter()
        .zip(&p.sigma)
        .zip(eps)
        .map(|((&m, &s), &e)| m + s * e)
        .collect()
}

// Lanczos approximation, g = 7, n = 9.
const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

pub fn gamma(x: f64) -> f64 {
    if x < 0.5 {
        std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * gamma(1.0 - x))
    } else {
        let x = x - 1.0;
        let mut a = LANCZOS_COEF[0];
        let t = x + LANCZOS_G + 0.5;
        for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        (2.0 * std::f64::consts::PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * a
    }
}
