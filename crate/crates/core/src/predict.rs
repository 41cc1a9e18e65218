//! Predictive survival distributions by self-normalized importance sampling
//! from the prior.
//!
//! Latent draws `z_l ~ N(0, I)` are weighted by `p(x | z_l)`, normalized
//! in log space, and each draw contributes the Weibull component
//! `p(y | t, z_l)`. The weights depend on `x` only, so treatment arms
//! evaluated on the same draws share them exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::distributions::{weibull_log_pdf, weibull_mean, DistError, WeibullParams};
use crate::model::{decode_y_batch, draw_noise, x_log_lik_batch, ModelError, ModelParams};
use crate::rng::SurvRng;

pub const DEFAULT_SAMPLES: usize = 1024;
pub const DEFAULT_THRESHOLD: f64 = 0.07;
pub const DEFAULT_GRID_POINTS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error("need at least one importance sample")]
    NoSamples,
    #[error("all importance weights vanished; increase the number of samples")]
    DegenerateWeights,
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

pub type Result<T> = std::result::Result<T, PredictError>;

/// Normalizes log-weights with max-subtraction. Returns the weights and
/// the effective sample size `1 / Σ w²`.
pub fn normalize_log_weights(log_w: &[f64]) -> Result<(Vec<f64>, f64)> {
    if log_w.is_empty() {
        return Err(PredictError::NoSamples);
    }
    if log_w.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(PredictError::DegenerateWeights);
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(PredictError::DegenerateWeights);
    }
    let raw: Vec<f64> = log_w.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    Ok((weights, ess))
}

/// Prior draws and their normalized importance weights for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDraws {
    pub z: Tensor,
    pub weights: Vec<f64>,
    pub ess: f64,
}

/// Draws `samples` latent vectors from the prior and weights them by
/// `p(x | z)`; `x` is a standardized, complete covariate row.
pub fn weighted_draws(params: &ModelParams, x: &[f64], samples: usize, rng: &mut SurvRng) -> Result<WeightedDraws> {
    if samples == 0 {
        return Err(PredictError::NoSamples);
    }
    let z = draw_noise(samples, 1, params.latent_dim, rng);
    let log_w = x_log_lik_batch(params, &z, x)?;
    let (weights, ess) = normalize_log_weights(&log_w)?;
    Ok(WeightedDraws { z, weights, ess })
}

/// Weibull mixture `Σ w_l Weibull(λ_l, k_l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveMixture {
    pub components: Vec<WeibullParams>,
    pub weights: Vec<f64>,
    pub ess: f64,
}

impl PredictiveMixture {
    pub fn new(components: Vec<WeibullParams>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() || components.len() != weights.len() {
            return Err(PredictError::NoSamples);
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) {
            return Err(PredictError::DegenerateWeights);
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        Ok(Self {
            components,
            weights,
            ess,
        })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Multiplies every component scale by `factor` (time-unit change).
    pub fn rescaled(&self, factor: f64) -> Self {
        Self {
            components: self.components.iter().map(|c| c.rescaled(factor)).collect(),
            weights: self.weights.clone(),
            ess: self.ess,
        }
    }

    fn active(&self) -> impl Iterator<Item = (&WeibullParams, f64)> {
        self.components.iter().zip(self.weights.iter().copied()).filter(|(_, w)| *w > 0.0)
    }
}

/// Mixture for treatment `t` on previously weighted draws.
pub fn mixture_from_draws(params: &ModelParams, draws: &WeightedDraws, t: &[f64]) -> Result<PredictiveMixture> {
    let components = decode_y_batch(params, &draws.z, t)?;
    Ok(PredictiveMixture {
        components,
        weights: draws.weights.clone(),
        ess: draws.ess,
    })
}

/// Predictive distribution of `y | t, x` in model time units.
pub fn predictive_mixture(
    params: &ModelParams,
    x: &[f64],
    t: &[f64],
    samples: usize,
    rng: &mut SurvRng,
) -> Result<PredictiveMixture> {
    let draws = weighted_draws(params, x, samples, rng)?;
    mixture_from_draws(params, &draws, t)
}

fn check_positive(what: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(PredictError::NonPositive { what, value })
    }
}

pub fn mixture_log_pdf(mix: &PredictiveMixture, y: f64) -> Result<f64> {
    check_positive("time", y)?;
    let terms = mix
        .active()
        .map(|(c, w)| Ok(w.ln() + weibull_log_pdf(y, c)?))
        .collect::<Result<Vec<f64>>>()?;
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(max + terms.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
}

/// `P(Y > y)`; defined as 1 at `y = 0`.
pub fn mixture_survival(mix: &PredictiveMixture, y: f64) -> Result<f64> {
    if y == 0.0 {
        return Ok(1.0);
    }
    check_positive("time", y)?;
    let s: f64 = mix.active().map(|(c, w)| w * c.survival(y)).sum();
    Ok(s.clamp(0.0, 1.0))
}

pub fn mixture_mean(mix: &PredictiveMixture) -> f64 {
    mix.active().map(|(c, w)| w * weibull_mean(c)).sum()
}

/// Median by bisection; it lies between the smallest and largest component
/// medians.
pub fn mixture_median(mix: &PredictiveMixture) -> f64 {
    let medians: Vec<f64> = mix.active().map(|(c, _)| c.quantile(0.5)).collect();
    let mut lo = medians.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = medians.iter().copied().fold(0.0, f64::max);
    let surv = |y: f64| mix.active().map(|(c, w)| w * c.survival(y)).sum::<f64>();
    for _ in 0..200 {
        if hi - lo <= 1e-13 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if surv(mid) > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Evenly spaced grid `0, upper/(n-1), ..., upper`.
pub fn survival_grid(upper: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![upper],
        n => (0..n).map(|i| upper * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub y: f64,
    pub s: f64,
}

pub fn survival_curve(mix: &PredictiveMixture, grid: &[f64]) -> Result<Vec<CurvePoint>> {
    grid.iter()
        .map(|&y| Ok(CurvePoint { y, s: mixture_survival(mix, y)? }))
        .collect()
}

/// Survival gain at `horizon` from choosing `t1` over `t0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreatmentContrast {
    pub horizon: f64,
    pub s1: f64,
    pub s0: f64,
    pub delta: f64,
    pub ess: f64,
}

/// Contrast with both arms evaluated on the same weighted draws.
pub fn contrast_from_draws(
    params: &ModelParams,
    draws: &WeightedDraws,
    t0: &[f64],
    t1: &[f64],
    horizon: f64,
    time_scale: f64,
) -> Result<(TreatmentContrast, PredictiveMixture, PredictiveMixture)> {
    check_positive("horizon", horizon)?;
    let m0 = mixture_from_draws(params, draws, t0)?.rescaled(time_scale);
    let m1 = mixture_from_draws(params, draws, t1)?.rescaled(time_scale);
    let s0 = mixture_survival(&m0, horizon)?;
    let s1 = mixture_survival(&m1, horizon)?;
    Ok((
        TreatmentContrast {
            horizon,
            s1,
            s0,
            delta: s1 - s0,
            ess: draws.ess,
        },
        m0,
        m1,
    ))
}

/// Contrast in model time units.
pub fn treatment_contrast(
    params: &ModelParams,
    x: &[f64],
    t0: &[f64],
    t1: &[f64],
    horizon: f64,
    samples: usize,
    rng: &mut SurvRng,
) -> Result<TreatmentContrast> {
    check_positive("horizon", horizon)?;
    let draws = weighted_draws(params, x, samples, rng)?;
    Ok(contrast_from_draws(params, &draws, t0, t1, horizon, 1.0)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Intensify,
    DoNotIntensify,
}

/// Intensify iff the survival gain is at least `threshold`.
pub fn decision(contrast: &TreatmentContrast, threshold: f64) -> Decision {
    if contrast.delta >= threshold {
        Decision::Intensify
    } else {
        Decision::DoNotIntensify
    }
}
