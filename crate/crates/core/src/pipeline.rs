//! End-to-end fitting and evaluation, and the model artifact that carries
//! everything prediction needs: schema, imputation model, standardization
//! statistics and network weights.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coxph::{cox_fit, cox_risk, CoxError, CoxModel, CoxOptions};
use crate::data::{split_indices, DataError, Dataset};
use crate::distributions::DiagNormalParams;
use crate::eval::{c_index, mixture_risk, CIndexResult, EvalError, RiskScore};
use crate::impute::{apply_impute, fit_impute, ImputeError, ImputeModel, ImputeOptions};
use crate::model::{encode, ModelError, ModelParams, Preprocessor};
use crate::predict::{
    contrast_from_draws, mixture_from_draws, survival_grid, weighted_draws, PredictError, PredictiveMixture,
    TreatmentContrast, WeightedDraws, DEFAULT_GRID_POINTS, DEFAULT_SAMPLES,
};
use crate::rng::{stream, SurvRng};
use crate::schema::{ColumnKind, Schema};
use crate::training::{train, StopReason, TrainConfig, TrainError, TrainReport};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_VAL_FRACTION: f64 = 0.25;

const STREAM_SPLIT: u64 = 11;
const STREAM_IMPUTE: u64 = 12;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("impute: {0}")]
    Impute(#[from] ImputeError),
    #[error("train: {0}")]
    Train(#[from] TrainError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("predict: {0}")]
    Predict(#[from] PredictError),
    #[error("coxph: {0}")]
    Cox(#[from] CoxError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("artifact: {0}")]
    Artifact(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// Whether the failure is numerical (as opposed to bad input data).
    pub fn is_numerical(&self) -> bool {
        match self {
            PipelineError::Train(TrainError::Config(_)) => false,
            PipelineError::Train(_) | PipelineError::Model(_) | PipelineError::Predict(_) => true,
            PipelineError::Cox(CoxError::NonFinite(_)) => true,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// How the artifact was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub seed: u64,
    pub val_fraction: f64,
    pub n_rows: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub train_events: usize,
    pub val_events: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped: StopReason,
    pub best_train_elbo: f64,
    pub best_val_elbo: f64,
    /// 99th percentile of training times; upper end of the default curve grid.
    pub time_p99: f64,
    pub config: TrainConfig,
    pub impute: ImputeOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub schema: Schema,
    pub preprocessor: Preprocessor,
    pub impute: ImputeModel,
    pub params: ModelParams,
    pub training: TrainingSummary,
}

/// A patient row after imputation and standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRow {
    pub raw: Vec<f64>,
    pub standardized: Vec<f64>,
    pub imputed: Vec<usize>,
}

impl ModelArtifact {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let artifact: ModelArtifact = serde_json::from_str(text)?;
        artifact.check()?;
        Ok(artifact)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Artifact(m));
        if self.format_version != FORMAT_VERSION {
            return bad(format!(
                "format version {} not supported (expected {FORMAT_VERSION})",
                self.format_version
            ));
        }
        self.schema.validate().map_err(DataError::from)?;
        self.params.validate()?;
        if self.params.kinds != self.schema.kinds() || self.params.n_treatments != self.schema.n_treatments() {
            return bad("weights do not match the schema".into());
        }
        if self.preprocessor.kinds != self.schema.kinds() || self.impute.columns.len() != self.schema.n_covariates() {
            return bad("preprocessing statistics do not match the schema".into());
        }
        Ok(())
    }

    /// Short content hash identifying this artifact.
    pub fn fingerprint(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_json()?.as_bytes());
        Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Imputes absent entries and standardizes.
    pub fn prepare(&self, covariates: &[Option<f64>]) -> Result<PreparedRow> {
        let raw = self.impute.complete(covariates)?;
        let standardized = self.preprocessor.standardize(&raw)?;
        let imputed = (0..covariates.len()).filter(|&j| covariates[j].is_none()).collect();
        Ok(PreparedRow {
            raw,
            standardized,
            imputed,
        })
    }

    /// Posterior over the latent state for a complete raw row and time `y > 0`.
    pub fn encode(&self, raw: &[f64], y: f64) -> Result<DiagNormalParams> {
        if !(y > 0.0 && y.is_finite()) {
            return Err(PipelineError::Artifact(format!("time must be positive, got {y}")));
        }
        let x = self.preprocessor.standardize(raw)?;
        Ok(encode(&self.params, &x, self.preprocessor.time_feature(y))?)
    }

    pub fn draws(&self, row: &PreparedRow, samples: usize, rng: &mut SurvRng) -> Result<WeightedDraws> {
        Ok(weighted_draws(&self.params, &row.standardized, samples, rng)?)
    }

    /// Predictive mixture in the data's time units.
    pub fn mixture(&self, draws: &WeightedDraws, t: &[f64]) -> Result<PredictiveMixture> {
        Ok(mixture_from_draws(&self.params, draws, t)?.rescaled(self.preprocessor.time_scale()))
    }

    /// Treatment contrast at `horizon` (data time units), both arms on `draws`.
    pub fn contrast(
        &self,
        draws: &WeightedDraws,
        t0: &[f64],
        t1: &[f64],
        horizon: f64,
    ) -> Result<(TreatmentContrast, PredictiveMixture, PredictiveMixture)> {
        Ok(contrast_from_draws(
            &self.params,
            draws,
            t0,
            t1,
            horizon,
            self.preprocessor.time_scale(),
        )?)
    }

    pub fn default_grid(&self) -> Vec<f64> {
        survival_grid(self.training.time_p99, DEFAULT_GRID_POINTS)
    }

    /// Per-covariate defaults for forms: training means for continuous
    /// columns, the imputation mode for binary ones.
    pub fn covariate_defaults(&self) -> Vec<f64> {
        self.schema
            .kinds()
            .iter()
            .enumerate()
            .map(|(j, k)| match k {
                ColumnKind::Continuous => self.preprocessor.means[j],
                ColumnKind::Binary => self.impute.columns[j].fill,
            })
            .collect()
    }
}

/// Linear-interpolation quantile of `values` at probability `q`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub train: TrainConfig,
    pub val_fraction: f64,
    pub impute: ImputeOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            val_fraction: DEFAULT_VAL_FRACTION,
            impute: ImputeOptions::default(),
        }
    }
}

/// The deterministic train/validation split used by [`fit`] and [`evaluate`].
pub fn split_rows(ds: &Dataset, seed: u64, val_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    Ok(split_indices(&ds.events, val_fraction, &mut stream(seed, STREAM_SPLIT))?)
}

pub struct FitOutput {
    pub artifact: ModelArtifact,
    pub report: TrainReport,
}

/// Split, fit imputation on the training part, impute both parts and train.
pub fn fit(ds: &Dataset, options: &FitOptions) -> Result<FitOutput> {
    ds.validate()?;
    let seed = options.train.seed;
    let (train_rows, val_rows) = split_rows(ds, seed, options.val_fraction)?;
    let train_raw = ds.subset(&train_rows);
    let impute = fit_impute(&train_raw, &options.impute, &mut stream(seed, STREAM_IMPUTE))?;
    let train_set = apply_impute(&train_raw, &impute)?;
    let val_set = apply_impute(&ds.subset(&val_rows), &impute)?;
    let outcome = train(&train_set, &val_set, &options.train)?;
    let best = *outcome.report.best();
    let training = TrainingSummary {
        seed,
        val_fraction: options.val_fraction,
        n_rows: ds.n_rows(),
        n_train: train_set.n_rows(),
        n_val: val_set.n_rows(),
        train_events: train_set.n_events(),
        val_events: val_set.n_events(),
        epochs_run: outcome.report.epochs.len(),
        best_epoch: outcome.report.best_epoch,
        stopped: outcome.report.stopped,
        best_train_elbo: best.train_elbo,
        best_val_elbo: best.val_elbo,
        time_p99: quantile(&train_set.times, 0.99),
        config: options.train.clone(),
        impute: options.impute,
    };
    Ok(FitOutput {
        artifact: ModelArtifact {
            format_version: FORMAT_VERSION,
            schema: ds.schema.clone(),
            preprocessor: outcome.preprocessor,
            impute,
            params: outcome.params,
            training,
        },
        report: outcome.report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub samples: usize,
    pub risk: RiskScore,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            risk: RiskScore::default(),
            seed: 0,
        }
    }
}

/// Train and validation concordance for the VAE and the Cox baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub vae_train_c: Option<f64>,
    pub vae_val_c: Option<f64>,
    pub cox_train_c: Option<f64>,
    pub cox_val_c: Option<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub samples: usize,
    pub risk: RiskScore,
    pub vae_train: CIndexResult,
    pub vae_val: CIndexResult,
    pub cox_train: CIndexResult,
    pub cox_val: CIndexResult,
    pub cox: CoxModel,
}

/// Standardized covariates followed by treatment flags.
pub fn cox_design(preprocessor: &Preprocessor, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    ds.covariates
        .iter()
        .zip(&ds.treatments)
        .map(|(x, t)| {
            let mut row = preprocessor.standardize(x)?;
            row.extend_from_slice(t);
            Ok(row)
        })
        .collect()
}

/// VAE risk scores for every row of a complete dataset. Row `i` draws from
/// its own RNG stream, so scores do not depend on evaluation order.
pub fn vae_risk_scores(
    artifact: &ModelArtifact,
    ds: &Dataset,
    row_ids: &[usize],
    options: &EvalOptions,
) -> Result<Vec<f64>> {
    let score = |r: usize| -> Result<f64> {
        let x = artifact.preprocessor.standardize(&ds.covariates[r])?;
        let mut rng = stream(options.seed, row_ids[r] as u64);
        let draws = weighted_draws(&artifact.params, &x, options.samples, &mut rng)?;
        let mix = artifact.mixture(&draws, &ds.treatments[r])?;
        Ok(mixture_risk(&mix, options.risk)?)
    };
    let n = ds.n_rows();
    let workers = std::thread::available_parallelism().map_or(1, |w| w.get()).min(n.max(1));
    let chunk = n.div_ceil(workers.max(1)).max(1);
    let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let score = &score;
                scope.spawn(move || (start..(start + chunk).min(n)).map(score).collect())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Recreates the artifact's split of `ds`, fits the Cox baseline on the
/// training part and reports concordance for both models on both parts.
pub fn evaluate(artifact: &ModelArtifact, ds: &Dataset, options: &EvalOptions) -> Result<EvalReport> {
    ds.validate()?;
    if ds.n_rows() != artifact.training.n_rows || ds.schema != artifact.schema {
        return Err(PipelineError::Artifact(format!(
            "dataset ({} rows) is not the one the model was trained on ({} rows)",
            ds.n_rows(),
            artifact.training.n_rows
        )));
    }
    let (train_rows, val_rows) = split_rows(ds, artifact.training.seed, artifact.training.val_fraction)?;
    let train_set = apply_impute(&ds.subset(&train_rows), &artifact.impute)?;
    let val_set = apply_impute(&ds.subset(&val_rows), &artifact.impute)?;

    let x_train = cox_design(&artifact.preprocessor, &train_set)?;
    let x_val = cox_design(&artifact.preprocessor, &val_set)?;
    let cox = cox_fit(&x_train, &train_set.times, &train_set.events, &CoxOptions::default())?;
    let cox_scores = |x: &[Vec<f64>]| x.iter().map(|r| cox_risk(&cox, r)).collect::<std::result::Result<Vec<_>, _>>();
    let cox_train = c_index(&train_set.times, &train_set.events, &cox_scores(&x_train)?)?;
    let cox_val = c_index(&val_set.times, &val_set.events, &cox_scores(&x_val)?)?;

    let vae_train_scores = vae_risk_scores(artifact, &train_set, &train_rows, options)?;
    let vae_val_scores = vae_risk_scores(artifact, &val_set, &val_rows, options)?;
    let vae_train = c_index(&train_set.times, &train_set.events, &vae_train_scores)?;
    let vae_val = c_index(&val_set.times, &val_set.events, &vae_val_scores)?;

    Ok(EvalReport {
        vae_train_c: vae_train.value,
        vae_val_c: vae_val.value,
        cox_train_c: cox_train.value,
        cox_val_c: cox_val.value,
        n_train: train_set.n_rows(),
        n_val: val_set.n_rows(),
        samples: options.samples,
        risk: options.risk,
        vae_train,
        vae_val,
        cox_train,
        cox_val,
        cox,
    })
}
