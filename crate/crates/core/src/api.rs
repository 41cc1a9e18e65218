//! JSON wire types of the prediction service and the request handlers that
//! both the HTTP server and the local command line use.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pipeline::{ModelArtifact, PipelineError, PreparedRow, TrainingSummary};
use crate::predict::{
    decision, mixture_mean, mixture_median, mixture_survival, survival_curve, CurvePoint, Decision,
    PredictiveMixture, DEFAULT_GRID_POINTS, DEFAULT_SAMPLES, DEFAULT_THRESHOLD,
};
use crate::rng::stream;
use crate::schema::Schema;

/// Horizon preset offered to clients, in the data's time unit.
pub const DEFAULT_HORIZON: f64 = 4.0;
/// Upper bound on importance samples per request.
pub const MAX_SAMPLES: usize = 100_000;
/// RNG stream used for request-level latent draws.
const STREAM_REQUEST: u64 = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    /// Covariate values by name; absent or null entries are imputed.
    #[serde(default)]
    pub covariates: BTreeMap<String, Option<f64>>,
    pub treatment: Vec<f64>,
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub curve: Vec<CurvePoint>,
    pub expected_survival: f64,
    pub median_survival: f64,
    pub horizon: f64,
    pub survival_at_horizon: f64,
    pub ess: f64,
    pub samples: usize,
    pub seed: u64,
    /// Covariates that were filled in by imputation.
    pub imputed: Vec<String>,
    pub model_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRequest {
    #[serde(default)]
    pub covariates: BTreeMap<String, Option<f64>>,
    pub t0: Vec<f64>,
    pub t1: Vec<f64>,
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastResponse {
    pub horizon: f64,
    pub s1: f64,
    pub s0: f64,
    pub delta: f64,
    pub threshold: f64,
    pub decision: Decision,
    pub ess: f64,
    pub samples: usize,
    pub seed: u64,
    pub curve_t0: Vec<CurvePoint>,
    pub curve_t1: Vec<CurvePoint>,
    pub imputed: Vec<String>,
    pub model_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestDefaults {
    pub horizon: f64,
    pub threshold: f64,
    pub samples: usize,
    pub grid_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResponse {
    pub format_version: u32,
    pub model_version: String,
    pub schema: Schema,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Training means (continuous) or modes (binary) by covariate name.
    pub covariate_defaults: BTreeMap<String, f64>,
    pub defaults: RequestDefaults,
    pub training: TrainingSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApiError {
    /// Malformed request: unknown names, wrong vector lengths, bad ranges.
    #[error("{0}")]
    BadRequest(String),
    /// Well-formed but non-finite numeric input.
    #[error("{0}")]
    NonFinite(String),
    #[error("{0}")]
    Internal(String),
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        ApiError::Internal(e.to_string())
    }
}

/// A loaded artifact plus its content fingerprint.
#[derive(Debug, Clone)]
pub struct Service {
    pub artifact: ModelArtifact,
    pub model_version: String,
}

impl Service {
    pub fn new(artifact: ModelArtifact) -> Result<Self, PipelineError> {
        let model_version = artifact.fingerprint()?;
        Ok(Self { artifact, model_version })
    }

    pub fn meta(&self) -> MetaResponse {
        let a = &self.artifact;
        MetaResponse {
            format_version: a.format_version,
            model_version: self.model_version.clone(),
            schema: a.schema.clone(),
            latent_dim: a.params.latent_dim,
            hidden_dim: a.params.hidden_dim,
            covariate_defaults: a
                .schema
                .covariates
                .iter()
                .zip(a.covariate_defaults())
                .map(|(c, v)| (c.name.clone(), v))
                .collect(),
            defaults: RequestDefaults {
                horizon: DEFAULT_HORIZON,
                threshold: DEFAULT_THRESHOLD,
                samples: DEFAULT_SAMPLES,
                grid_points: DEFAULT_GRID_POINTS,
            },
            training: a.training.clone(),
        }
    }

    fn prepare(&self, covariates: &BTreeMap<String, Option<f64>>) -> Result<(PreparedRow, Vec<String>), ApiError> {
        let schema = &self.artifact.schema;
        let mut values = vec![None; schema.n_covariates()];
        for (name, value) in covariates {
            let j = schema
                .covariate_index(name)
                .ok_or_else(|| ApiError::BadRequest(format!("unknown covariate {name:?}")))?;
            if let Some(v) = value {
                if !v.is_finite() {
                    return Err(ApiError::NonFinite(format!("covariate {name:?} is not finite")));
                }
                if schema.covariates[j].kind == crate::schema::ColumnKind::Binary && *v != 0.0 && *v != 1.0 {
                    return Err(ApiError::BadRequest(format!("covariate {name:?} must be 0 or 1")));
                }
            }
            values[j] = *value;
        }
        let row = self.artifact.prepare(&values)?;
        let imputed = row.imputed.iter().map(|&j| schema.covariates[j].name.clone()).collect();
        Ok((row, imputed))
    }

    fn check_treatment(&self, what: &str, t: &[f64]) -> Result<(), ApiError> {
        let q = self.artifact.schema.n_treatments();
        if t.len() != q {
            return Err(ApiError::BadRequest(format!("{what} must have {q} entries, got {}", t.len())));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(ApiError::NonFinite(format!("{what} is not finite")));
        }
        if t.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(ApiError::BadRequest(format!("{what} entries must be 0 or 1")));
        }
        Ok(())
    }

    fn samples(requested: Option<usize>) -> Result<usize, ApiError> {
        match requested.unwrap_or(DEFAULT_SAMPLES) {
            0 => Err(ApiError::BadRequest("samples must be positive".into())),
            s if s > MAX_SAMPLES => Err(ApiError::BadRequest(format!("samples must be at most {MAX_SAMPLES}"))),
            s => Ok(s),
        }
    }

    fn curve(&self, mix: &PredictiveMixture) -> Result<Vec<CurvePoint>, ApiError> {
        let curve = survival_curve(mix, &self.artifact.default_grid()).map_err(|e| ApiError::Internal(e.to_string()))?;
        check_curve(&curve)?;
        Ok(curve)
    }

    /// Predictive survival for one patient. `seed` is used when the request
    /// does not carry one.
    pub fn predict(&self, req: &PredictRequest, seed: u64) -> Result<PredictResponse, ApiError> {
        check_horizon(req.horizon)?;
        self.check_treatment("treatment", &req.treatment)?;
        let samples = Self::samples(req.samples)?;
        let (row, imputed) = self.prepare(&req.covariates)?;
        let seed = req.seed.unwrap_or(seed);
        let draws = self.artifact.draws(&row, samples, &mut stream(seed, STREAM_REQUEST))?;
        let mix = self.artifact.mixture(&draws, &req.treatment)?;
        let survival_at_horizon = mixture_survival(&mix, req.horizon).map_err(|e| ApiError::Internal(e.to_string()))?;
        Ok(PredictResponse {
            curve: self.curve(&mix)?,
            expected_survival: mixture_mean(&mix),
            median_survival: mixture_median(&mix),
            horizon: req.horizon,
            survival_at_horizon,
            ess: mix.ess,
            samples,
            seed,
            imputed,
            model_version: self.model_version.clone(),
        })
    }

    /// Survival gain at the horizon from `t1` over `t0`, both arms on the
    /// same latent draws.
    pub fn contrast(&self, req: &ContrastRequest, seed: u64) -> Result<ContrastResponse, ApiError> {
        check_horizon(req.horizon)?;
        self.check_treatment("t0", &req.t0)?;
        self.check_treatment("t1", &req.t1)?;
        let threshold = req.threshold.unwrap_or(DEFAULT_THRESHOLD);
        if !threshold.is_finite() {
            return Err(ApiError::NonFinite("threshold is not finite".into()));
        }
        let samples = Self::samples(req.samples)?;
        let (row, imputed) = self.prepare(&req.covariates)?;
        let seed = req.seed.unwrap_or(seed);
        let draws = self.artifact.draws(&row, samples, &mut stream(seed, STREAM_REQUEST))?;
        let (c, m0, m1) = self.artifact.contrast(&draws, &req.t0, &req.t1, req.horizon)?;
        Ok(ContrastResponse {
            horizon: c.horizon,
            s1: c.s1,
            s0: c.s0,
            delta: c.delta,
            threshold,
            decision: decision(&c, threshold),
            ess: c.ess,
            samples,
            seed,
            curve_t0: self.curve(&m0)?,
            curve_t1: self.curve(&m1)?,
            imputed,
            model_version: self.model_version.clone(),
        })
    }
}

fn check_horizon(h: f64) -> Result<(), ApiError> {
    if !h.is_finite() {
        Err(ApiError::NonFinite("horizon is not finite".into()))
    } else if h <= 0.0 {
        Err(ApiError::BadRequest(format!("horizon must be positive, got {h}")))
    } else {
        Ok(())
    }
}

/// Curves must be nonincreasing with values in `[0, 1]`.
pub fn check_curve(curve: &[CurvePoint]) -> Result<(), ApiError> {
    let in_range = curve.iter().all(|p| (0.0..=1.0).contains(&p.s));
    let monotone = curve.windows(2).all(|w| w[1].s <= w[0].s);
    if in_range && monotone {
        Ok(())
    } else {
        Err(ApiError::Internal("predicted survival curve violates its invariants".into()))
    }
}

/// Seed for a request without one: the server seed mixed with a hash of the
/// request body, so repeating a request repeats its answer.
pub fn request_seed(server_seed: u64, body: &[u8]) -> u64 {
    let digest = Sha256::digest(body);
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    server_seed ^ u64::from_le_bytes(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_seed_is_stable_and_body_sensitive() {
        assert_eq!(request_seed(7, b"{}"), request_seed(7, b"{}"));
        assert_ne!(request_seed(7, b"{}"), request_seed(7, b"{ }"));
        assert_ne!(request_seed(7, b"{}"), request_seed(8, b"{}"));
    }

    #[test]
    fn curve_checks() {
        let ok = [CurvePoint { y: 0.0, s: 1.0 }, CurvePoint { y: 1.0, s: 0.4 }];
        assert!(check_curve(&ok).is_ok());
        let rising = [CurvePoint { y: 0.0, s: 0.4 }, CurvePoint { y: 1.0, s: 0.5 }];
        assert!(check_curve(&rising).is_err());
    }

    #[test]
    fn horizon_validation() {
        assert!(matches!(check_horizon(0.0), Err(ApiError::BadRequest(_))));
        assert!(matches!(check_horizon(-1.0), Err(ApiError::BadRequest(_))));
        assert!(matches!(check_horizon(f64::INFINITY), Err(ApiError::NonFinite(_))));
        assert!(check_horizon(4.0).is_ok());
    }

    #[test]
    fn optional_fields_default() {
        let req: PredictRequest = serde_json::from_str(r#"{"treatment":[1,0],"horizon":4}"#).unwrap();
        assert!(req.covariates.is_empty());
        assert_eq!(req.samples, None);
        let req: ContrastRequest =
            serde_json::from_str(r#"{"covariates":{"x01":null},"t0":[0,0],"t1":[1,0],"horizon":4}"#).unwrap();
        assert_eq!(req.covariates.get("x01"), Some(&None));
        assert_eq!(req.threshold, None);
    }
}
