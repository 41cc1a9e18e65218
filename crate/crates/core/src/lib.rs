//! Deep latent-variable survival analysis.
//!
//! A variational autoencoder whose latent health status `z` drives both the
//! observed covariates `x` and a right-censored Weibull survival time `y`,
//! with treatments `t` chosen from the covariates. The crate covers training
//! by Monte-Carlo ELBO maximization, importance-sampled predictive survival
//! curves and treatment contrasts, chained-equation imputation, a Cox
//! proportional-hazards baseline and Harrell's concordance index.

// Negated comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod api;
pub mod coxph;
pub mod data;
pub mod diffcore;
pub mod distributions;
pub mod eval;
pub mod impute;
pub mod model;
pub mod pipeline;
pub mod predict;
pub mod rng;
pub mod schema;
pub mod training;
