//! Adam on the negative ELBO with L2 weight decay, minibatches and
//! validation-based early stopping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::diffcore::Tensor;
use crate::model::{
    draw_noise, elbo_and_grad, elbo_with_noise, init_params, Batch, ElboOptions, ModelError, ModelParams,
    Preprocessor, DEFAULT_HIDDEN_DIM, DEFAULT_LATENT_DIM,
};
use crate::rng::{stream, SurvRng};

/// RNG streams derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_TRAIN_NOISE: u64 = 3;
const STREAM_EVAL_TRAIN: u64 = 4;
const STREAM_EVAL_VAL: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub mc_samples_train: usize,
    pub mc_samples_eval: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 500,
            patience: 25,
            mc_samples_train: 1,
            mc_samples_eval: 64,
            latent_dim: DEFAULT_LATENT_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay nonnegative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if self.mc_samples_train == 0 || self.mc_samples_eval == 0 {
            return bad("mc sample counts must be positive");
        }
        if self.latent_dim == 0 || self.hidden_dim == 0 {
            return bad("latent_dim and hidden_dim must be positive");
        }
        if self.patience >= self.max_epochs {
            return bad("patience must be smaller than max_epochs");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error("epoch {epoch}: {source}")]
    Numerical {
        epoch: usize,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("adam state does not match parameter shapes")]
    StateMismatch,
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Adds `weight_decay * W` to the gradient of every weight matrix; biases are
/// left alone.
pub fn regularized_gradients(params: &ModelParams, loss_grads: &[Tensor], weight_decay: f64) -> Vec<Tensor> {
    params
        .tensors()
        .into_iter()
        .zip(loss_grads)
        .enumerate()
        .map(|(i, (w, g))| {
            let mut g = g.clone();
            if ModelParams::is_weight(i) && weight_decay != 0.0 {
                for (gi, wi) in g.data_mut().iter_mut().zip(w.data()) {
                    *gi += weight_decay * wi;
                }
            }
            g
        })
        .collect()
}

/// One bias-corrected Adam step on the loss gradients `loss_grads`
/// (gradients of the quantity being minimized).
pub fn adam_step(
    params: &mut ModelParams,
    loss_grads: &[Tensor],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let grads = regularized_gradients(params, loss_grads, config.weight_decay);
    let mut tensors = params.tensors_mut();
    let shapes_ok = grads.len() == tensors.len()
        && state.m.len() == tensors.len()
        && state.v.len() == tensors.len()
        && tensors
            .iter()
            .zip(&grads)
            .zip(&state.m)
            .all(|((p, g), m)| p.shape() == g.shape() && p.shape() == m.shape());
    if !shapes_ok {
        return Err(TrainError::StateMismatch);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (i, p) in tensors.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = config.beta1 * *mj + (1.0 - config.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = config.beta2 * *vj + (1.0 - config.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *pj -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_elbo: f64,
    pub val_elbo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped: StopReason,
}

impl TrainReport {
    pub const TRACE_HEADER: &'static str = "epoch\ttrain_elbo\tval_elbo";

    /// Tab-separated trace, one line per epoch after a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::TRACE_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let _ = writeln!(out, "{}\t{}\t{}", r.epoch, r.train_elbo, r.val_elbo);
        }
        out
    }

    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("report has at least one epoch")
    }
}

/// Fitted parameters together with the preprocessing they expect.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub preprocessor: Preprocessor,
    pub report: TrainReport,
}

/// Fits preprocessing on `train`, initializes parameters from the run seed
/// and trains.
pub fn train(train_set: &Dataset, val_set: &Dataset, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.n_rows() == 0 {
        return Err(TrainError::Empty("training"));
    }
    if val_set.n_rows() == 0 {
        return Err(TrainError::Empty("validation"));
    }
    let preprocessor = Preprocessor::fit(train_set)?;
    let train_batch = preprocessor.batch(train_set)?;
    let val_batch = preprocessor.batch(val_set)?;
    let init = init_params(
        &train_set.schema,
        config.latent_dim,
        config.hidden_dim,
        &mut stream(config.seed, STREAM_INIT),
    );
    let (params, report) = train_batches(init, &train_batch, &val_batch, config)?;
    Ok(TrainOutcome {
        params,
        preprocessor,
        report,
    })
}

/// Rows per evaluation chunk; keeps the expanded `rows × samples` tensors
/// small enough to stay in cache.
const EVAL_CHUNK_ROWS: usize = 32;

/// Mean ELBO over a whole batch under fixed evaluation noise, computed in
/// row chunks that are combined in a fixed order.
pub fn evaluate(params: &ModelParams, batch: &Batch, noise: &Tensor, mc_samples: usize) -> Result<f64, ModelError> {
    let opts = ElboOptions::with_samples(mc_samples);
    let n = batch.len();
    let d = noise.cols();
    let mut total = 0.0;
    for start in (0..n).step_by(EVAL_CHUNK_ROWS) {
        let end = (start + EVAL_CHUNK_ROWS).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let chunk_noise = Tensor::matrix(
            (end - start) * mc_samples,
            d,
            noise.data()[start * mc_samples * d..end * mc_samples * d].to_vec(),
        )
        .expect("noise chunk shape");
        let est = elbo_with_noise(params, &batch.subset(&rows), &chunk_noise, &opts)?;
        total += est.total * (end - start) as f64;
    }
    Ok(total / n as f64)
}

/// Training loop from given initial parameters on preprocessed batches.
/// Returns the parameters of the epoch with the highest validation ELBO.
pub fn train_batches(
    mut params: ModelParams,
    train_batch: &Batch,
    val_batch: &Batch,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport), TrainError> {
    config.validate()?;
    if train_batch.is_empty() {
        return Err(TrainError::Empty("training"));
    }
    let d = params.latent_dim;
    let s_eval = config.mc_samples_eval;
    let eval_train_noise = draw_noise(train_batch.len(), s_eval, d, &mut stream(config.seed, STREAM_EVAL_TRAIN));
    let eval_val_noise = draw_noise(val_batch.len(), s_eval, d, &mut stream(config.seed, STREAM_EVAL_VAL));
    let mut shuffle_rng: SurvRng = stream(config.seed, STREAM_SHUFFLE);
    let mut noise_rng: SurvRng = stream(config.seed, STREAM_TRAIN_NOISE);
    let opts = ElboOptions::with_samples(config.mc_samples_train);

    let mut state = AdamState::new(&params);
    let mut order: Vec<usize> = (0..train_batch.len()).collect();
    let mut records = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut stopped = StopReason::MaxEpochs;

    for epoch in 0..config.max_epochs {
        let numerical = |source| TrainError::Numerical { epoch, source };
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let mut rows = chunk.to_vec();
            rows.sort_unstable();
            let mb = train_batch.subset(&rows);
            let noise = draw_noise(mb.len(), opts.mc_samples, d, &mut noise_rng);
            let (_, grads) = elbo_and_grad(&params, &mb, &noise, &opts).map_err(numerical)?;
            let loss_grads: Vec<Tensor> = grads
                .into_iter()
                .map(|mut g| {
                    g.data_mut().iter_mut().for_each(|v| *v = -*v);
                    g
                })
                .collect();
            adam_step(&mut params, &loss_grads, &mut state, config)?;
        }

        let train_elbo = evaluate(&params, train_batch, &eval_train_noise, s_eval).map_err(numerical)?;
        let val_elbo = evaluate(&params, val_batch, &eval_val_noise, s_eval).map_err(numerical)?;
        records.push(EpochRecord {
            epoch,
            train_elbo,
            val_elbo,
        });

        if best.as_ref().is_none_or(|(_, v, _)| val_elbo > *v) {
            best = Some((epoch, val_elbo, params.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= config.patience && epoch + 1 < config.max_epochs {
            stopped = StopReason::Patience;
            break;
        }
    }

    let (best_epoch, _, best_params) = best.expect("at least one epoch ran");
    Ok((
        best_params,
        TrainReport {
            epochs: records,
            best_epoch,
            stopped,
        },
    ))
}
