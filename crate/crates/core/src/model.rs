//! The latent-variable survival model.
//!
//! Generative side: `z ~ N(0, I)`, covariates `x_j | z` independent
//! (Normal for continuous columns, Bernoulli for binary ones), treatments
//! `t_i | x ~ Bernoulli`, and a right-censored Weibull survival time
//! `y | t, z`. The recognition side is a diagonal Gaussian `q(z | x, y)`.
//! Every conditional is a one-hidden-layer network:
//!
//! | head        | input    | output                                  |
//! |-------------|----------|-----------------------------------------|
//! | `x_decoder` | `z`      | per-covariate mean or logit, then sds   |
//! | `t_head`    | `x`      | one logit per treatment                 |
//! | `y_decoder` | `[z, t]` | Weibull scale and shape                 |
//! | `encoder`   | `[x, y]` | posterior mean and sd                   |
//!
//! Positive outputs go through `softplus + POSITIVE_FLOOR`, probabilities
//! through a sigmoid clamped to `[PROB_EPS, 1 - PROB_EPS]`.
//!
//! All functions here work on preprocessed inputs: standardized continuous
//! covariates, survival times divided by the training time scale, and a
//! standardized log time as the encoder's time feature (see
//! [`Preprocessor`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::distributions::{
    BernoulliParams, DiagNormalParams, DistError, WeibullParams, LN_2PI, POSITIVE_FLOOR, PROB_EPS,
};
use crate::rng::{standard_normal, SurvRng};
use crate::schema::{ColumnKind, Schema};

pub const DEFAULT_LATENT_DIM: usize = 4;
pub const DEFAULT_HIDDEN_DIM: usize = 16;

/// `softplus⁻¹(1)`: output bias that makes an initial softplus output ≈ 1.
pub const UNIT_SOFTPLUS_BIAS: f64 = 0.541_324_854_612_918_1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{what}: expected dimension {expected}, got {actual}")]
    Dim {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("numerical failure in {term}: {source}")]
    Numerical {
        term: &'static str,
        #[source]
        source: DiffError,
    },
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("preprocessing: {0}")]
    Preprocess(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn in_term(term: &'static str) -> impl Fn(DiffError) -> ModelError {
    move |source| ModelError::Numerical { term, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Affine layer `y = W x + b` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DenseRepr", into = "DenseRepr")]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Serialize, Deserialize)]
struct DenseRepr {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl From<Dense> for DenseRepr {
    fn from(d: Dense) -> Self {
        let weight = (0..d.weight.rows()).map(|r| d.weight.row(r).to_vec()).collect();
        DenseRepr {
            weight,
            bias: d.bias.into_data(),
        }
    }
}

impl TryFrom<DenseRepr> for Dense {
    type Error = String;

    fn try_from(r: DenseRepr) -> std::result::Result<Self, String> {
        let out = r.weight.len();
        if r.bias.len() != out {
            return Err(format!("bias length {} != weight rows {out}", r.bias.len()));
        }
        let weight = Tensor::from_rows(&r.weight).map_err(|e| e.to_string())?;
        let weight = if out == 0 {
            Tensor::zeros(&[0, 0])
        } else {
            weight
        };
        Ok(Dense {
            weight,
            bias: Tensor::vector(r.bias),
        })
    }
}

impl Dense {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out, inp]),
            bias: Tensor::zeros(&[out]),
        }
    }

    fn he(out: usize, inp: usize, rng: &mut SurvRng) -> Self {
        let sd = (2.0 / inp as f64).sqrt();
        let data = (0..out * inp).map(|_| sd * standard_normal(rng)).collect();
        Self {
            weight: Tensor::matrix(out, inp, data).expect("shape"),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// One hidden layer followed by an output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub hidden: Dense,
    pub output: Dense,
}

impl Head {
    fn he(inp: usize, hidden: usize, out: usize, rng: &mut SurvRng) -> Self {
        Self {
            hidden: Dense::he(hidden, inp, rng),
            output: Dense::he(out, hidden, rng),
        }
    }
}

/// All trainable weights and biases plus the dimensions they imply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub activation: Activation,
    pub kinds: Vec<ColumnKind>,
    pub n_treatments: usize,
    pub x_decoder: Head,
    pub t_head: Head,
    pub y_decoder: Head,
    pub encoder: Head,
}

/// Number of trainable tensors in [`ModelParams::tensors`].
pub const N_TENSORS: usize = 16;

impl ModelParams {
    pub fn n_covariates(&self) -> usize {
        self.kinds.len()
    }

    pub fn continuous_columns(&self) -> Vec<usize> {
        self.columns_of(ColumnKind::Continuous)
    }

    pub fn binary_columns(&self) -> Vec<usize> {
        self.columns_of(ColumnKind::Binary)
    }

    fn columns_of(&self, kind: ColumnKind) -> Vec<usize> {
        (0..self.kinds.len()).filter(|&j| self.kinds[j] == kind).collect()
    }

    pub fn x_output_dim(&self) -> usize {
        self.n_covariates() + self.continuous_columns().len()
    }

    fn heads(&self) -> [&Head; 4] {
        [&self.x_decoder, &self.t_head, &self.y_decoder, &self.encoder]
    }

    /// Tensors in the fixed order W1, b1, W2, b2, ..., W8, b8.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.heads()
            .into_iter()
            .flat_map(|h| [&h.hidden.weight, &h.hidden.bias, &h.output.weight, &h.output.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        [&mut self.x_decoder, &mut self.t_head, &mut self.y_decoder, &mut self.encoder]
            .into_iter()
            .flat_map(|h| {
                [
                    &mut h.hidden.weight,
                    &mut h.hidden.bias,
                    &mut h.output.weight,
                    &mut h.output.bias,
                ]
            })
            .collect()
    }

    /// Whether tensor `i` of [`Self::tensors`] is a weight matrix (as
    /// opposed to a bias vector).
    pub fn is_weight(i: usize) -> bool {
        i.is_multiple_of(2)
    }

    pub fn tensor_name(i: usize) -> String {
        let layer = i / 2 + 1;
        if Self::is_weight(i) {
            format!("W{layer}")
        } else {
            format!("b{layer}")
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks every tensor shape against the declared dimensions.
    pub fn validate(&self) -> Result<()> {
        let p = self.n_covariates();
        let (d, h, q) = (self.latent_dim, self.hidden_dim, self.n_treatments);
        let expected = [
            (d, self.x_output_dim()),
            (p, q),
            (d + q, 2),
            (p + 1, 2 * d),
        ];
        for (head, (inp, out)) in self.heads().into_iter().zip(expected) {
            let ok = head.hidden.weight.shape() == [h, inp]
                && head.hidden.bias.shape() == [h]
                && head.output.weight.shape() == [out, h]
                && head.output.bias.shape() == [out];
            if !ok {
                return Err(ModelError::Dim {
                    what: "parameter shapes",
                    expected: inp,
                    actual: head.hidden.in_dim(),
                });
            }
        }
        Ok(())
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }
}

/// He-initialized weights, zero biases, and output biases for every
/// softplus-activated output set so those outputs start near 1.
pub fn init_params(schema: &Schema, latent_dim: usize, hidden_dim: usize, rng: &mut SurvRng) -> ModelParams {
    init_params_for(schema.kinds(), schema.n_treatments(), latent_dim, hidden_dim, rng)
}

pub fn init_params_for(
    kinds: Vec<ColumnKind>,
    n_treatments: usize,
    latent_dim: usize,
    hidden_dim: usize,
    rng: &mut SurvRng,
) -> ModelParams {
    let p = kinds.len();
    let n_cont = kinds.iter().filter(|&&k| k == ColumnKind::Continuous).count();
    let d = latent_dim;
    let mut params = ModelParams {
        latent_dim,
        hidden_dim,
        activation: Activation::Tanh,
        kinds,
        n_treatments,
        x_decoder: Head::he(d, hidden_dim, p + n_cont, rng),
        t_head: Head::he(p, hidden_dim, n_treatments, rng),
        y_decoder: Head::he(d + n_treatments, hidden_dim, 2, rng),
        encoder: Head::he(p + 1, hidden_dim, 2 * d, rng),
    };
    for c in 0..n_cont {
        params.x_decoder.output.bias.data_mut()[p + c] = UNIT_SOFTPLUS_BIAS;
    }
    params.y_decoder.output.bias.data_mut().fill(UNIT_SOFTPLUS_BIAS);
    for j in 0..d {
        params.encoder.output.bias.data_mut()[d + j] = UNIT_SOFTPLUS_BIAS;
    }
    params
}

/// Training-set statistics that map raw rows onto the model's scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub kinds: Vec<ColumnKind>,
    /// Per-covariate centering; 0 for binary columns.
    pub means: Vec<f64>,
    /// Per-covariate scaling; 1 for binary columns.
    pub sds: Vec<f64>,
    pub log_time_mean: f64,
    pub log_time_sd: f64,
}

impl Preprocessor {
    /// Fits standardization statistics on a fully observed dataset.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.n_rows() == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if !ds.is_complete() {
            return Err(ModelError::Preprocess("dataset has missing covariates; impute first".into()));
        }
        let n = ds.n_rows() as f64;
        let kinds = ds.schema.kinds();
        let mut means = vec![0.0; kinds.len()];
        let mut sds = vec![1.0; kinds.len()];
        for (j, kind) in kinds.iter().enumerate() {
            if *kind == ColumnKind::Continuous {
                let m = ds.covariates.iter().map(|r| r[j]).sum::<f64>() / n;
                let v = ds.covariates.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
                means[j] = m;
                sds[j] = if v > 0.0 { v.sqrt() } else { 1.0 };
            }
        }
        let logs: Vec<f64> = ds.times.iter().map(|t| t.ln()).collect();
        let lm = logs.iter().sum::<f64>() / n;
        let lv = logs.iter().map(|l| (l - lm).powi(2)).sum::<f64>() / n;
        Ok(Self {
            kinds,
            means,
            sds,
            log_time_mean: lm,
            log_time_sd: if lv > 0.0 { lv.sqrt() } else { 1.0 },
        })
    }

    /// No-op preprocessing for `kinds`, time scale 1.
    pub fn identity(kinds: Vec<ColumnKind>) -> Self {
        let p = kinds.len();
        Self {
            kinds,
            means: vec![0.0; p],
            sds: vec![1.0; p],
            log_time_mean: 0.0,
            log_time_sd: 1.0,
        }
    }

    /// Survival times are divided by this before entering the likelihood.
    pub fn time_scale(&self) -> f64 {
        self.log_time_mean.exp()
    }

    pub fn standardize(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.means.len() {
            return Err(ModelError::Dim {
                what: "covariate vector",
                expected: self.means.len(),
                actual: x.len(),
            });
        }
        Ok(x.iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn time_feature(&self, y: f64) -> f64 {
        (y.ln() - self.log_time_mean) / self.log_time_sd
    }

    /// Builds a model-scale batch from a complete dataset.
    pub fn batch(&self, ds: &Dataset) -> Result<Batch> {
        if !ds.is_complete() {
            return Err(ModelError::Preprocess("dataset has missing covariates; impute first".into()));
        }
        let scale = self.time_scale();
        let x = ds
            .covariates
            .iter()
            .map(|r| self.standardize(r))
            .collect::<Result<Vec<_>>>()?;
        Batch::new(
            x,
            ds.treatments.clone(),
            ds.times.iter().map(|t| t / scale).collect(),
            ds.events.clone(),
            ds.times.iter().map(|&t| self.time_feature(t)).collect(),
        )
    }
}

/// Rows of preprocessed `(x, t, y, δ)` plus the encoder's time feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub t: Tensor,
    pub y: Vec<f64>,
    pub delta: Vec<f64>,
    pub y_feature: Vec<f64>,
}

impl Batch {
    pub fn new(
        x: Vec<Vec<f64>>,
        t: Vec<Vec<f64>>,
        y: Vec<f64>,
        delta: Vec<f64>,
        y_feature: Vec<f64>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(ModelError::EmptyBatch);
        }
        for (what, len) in [
            ("covariate rows", x.len()),
            ("treatment rows", t.len()),
            ("event indicators", delta.len()),
            ("time features", y_feature.len()),
        ] {
            if len != n {
                return Err(ModelError::Dim {
                    what,
                    expected: n,
                    actual: len,
                });
            }
        }
        if let Some(&bad) = y.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(DistError::NonPositive {
                what: "survival time",
                value: bad,
            }
            .into());
        }
        if let Some(&bad) = delta.iter().find(|&&d| d != 0.0 && d != 1.0) {
            return Err(DistError::NotBinary {
                what: "event indicator",
                value: bad,
            }
            .into());
        }
        let to_tensor = |rows: &[Vec<f64>], what| {
            Tensor::from_rows(rows).map_err(|_| ModelError::Dim {
                what,
                expected: rows.first().map_or(0, Vec::len),
                actual: 0,
            })
        };
        Ok(Self {
            x: to_tensor(&x, "covariate width")?,
            t: to_tensor(&t, "treatment width")?,
            y,
            delta,
            y_feature,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Batch {
        let pick = |t: &Tensor| {
            let c = t.cols();
            let data = rows.iter().flat_map(|&r| t.row(r).to_vec()).collect();
            Tensor::matrix(rows.len(), c, data).expect("subset shape")
        };
        Batch {
            x: pick(&self.x),
            t: pick(&self.t),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            delta: rows.iter().map(|&r| self.delta[r]).collect(),
            y_feature: rows.iter().map(|&r| self.y_feature[r]).collect(),
        }
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        if self.x.cols() != params.n_covariates() {
            return Err(ModelError::Dim {
                what: "covariate width",
                expected: params.n_covariates(),
                actual: self.x.cols(),
            });
        }
        if self.t.cols() != params.n_treatments {
            return Err(ModelError::Dim {
                what: "treatment width",
                expected: params.n_treatments,
                actual: self.t.cols(),
            });
        }
        Ok(())
    }
}

/// Graph-building blocks. Each function appends to a tape and returns the
/// resulting node, so callers can compose objectives and differentiate them.
pub mod graph {
    use super::*;

    /// Parameter tensors registered as tape leaves, in [`ModelParams::tensors`] order.
    #[derive(Debug, Clone)]
    pub struct ParamVars(pub Vec<Var>);

    impl ParamVars {
        pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
            ParamVars(params.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect())
        }

        fn head(&self, index: usize) -> &[Var] {
            &self.0[4 * index..4 * index + 4]
        }
    }

    const X_DECODER: usize = 0;
    const T_HEAD: usize = 1;
    const Y_DECODER: usize = 2;
    const ENCODER: usize = 3;

    fn head_forward(tape: &mut Tape, vars: &[Var], input: Var, act: Activation) -> std::result::Result<Var, DiffError> {
        let h = tape.linear(input, vars[0], vars[1])?;
        let h = match act {
            Activation::Tanh => tape.tanh(h)?,
            Activation::Identity => h,
        };
        tape.linear(h, vars[2], vars[3])
    }

    fn positive(tape: &mut Tape, v: Var) -> std::result::Result<Var, DiffError> {
        let s = tape.softplus(v)?;
        tape.add_scalar(s, POSITIVE_FLOOR)
    }

    fn probability(tape: &mut Tape, v: Var) -> std::result::Result<Var, DiffError> {
        let s = tape.sigmoid(v)?;
        tape.clamp(s, PROB_EPS, 1.0 - PROB_EPS)
    }

    /// Per-row Bernoulli log-pmf `t ln π + (1 - t) ln(1 - π)`.
    fn bernoulli_rows(tape: &mut Tape, pi: Var, outcome: Var) -> std::result::Result<Var, DiffError> {
        let ln_pi = tape.log(pi)?;
        let one_minus = tape.neg(pi)?;
        let one_minus = tape.add_scalar(one_minus, 1.0)?;
        let ln_rest = tape.log(one_minus)?;
        let a = tape.mul(ln_pi, outcome)?;
        let out_neg = tape.neg(outcome)?;
        let rest_w = tape.add_scalar(out_neg, 1.0)?;
        let b = tape.mul(ln_rest, rest_w)?;
        let s = tape.add(a, b)?;
        tape.sum_cols(s)
    }

    /// Encoder: `(μ, σ)` each `[n, latent]` from input `[x, y_feature]`.
    pub fn encode(tape: &mut Tape, pv: &ParamVars, params: &ModelParams, input: Var) -> Result<(Var, Var)> {
        let d = params.latent_dim;
        let f = in_term("encoder");
        let out = head_forward(tape, pv.head(ENCODER), input, params.activation).map_err(&f)?;
        let mu_cols: Vec<usize> = (0..d).collect();
        let sd_cols: Vec<usize> = (d..2 * d).collect();
        let mu = tape.select_cols(out, &mu_cols).map_err(&f)?;
        let pre = tape.select_cols(out, &sd_cols).map_err(&f)?;
        let sigma = positive(tape, pre).map_err(&f)?;
        Ok((mu, sigma))
    }

    /// Decoder outputs for x: (means of continuous columns, sds of continuous
    /// columns, probabilities of binary columns), each `[n, ·]`.
    pub fn decode_x(
        tape: &mut Tape,
        pv: &ParamVars,
        params: &ModelParams,
        z: Var,
    ) -> Result<(Option<(Var, Var)>, Option<Var>)> {
        let f = in_term("log p(x|z)");
        let p = params.n_covariates();
        let cont = params.continuous_columns();
        let bin = params.binary_columns();
        let out = head_forward(tape, pv.head(X_DECODER), z, params.activation).map_err(&f)?;
        let normal = if cont.is_empty() {
            None
        } else {
            let mean = tape.select_cols(out, &cont).map_err(&f)?;
            let sd_cols: Vec<usize> = (p..p + cont.len()).collect();
            let pre = tape.select_cols(out, &sd_cols).map_err(&f)?;
            let sd = positive(tape, pre).map_err(&f)?;
            Some((mean, sd))
        };
        let bern = if bin.is_empty() {
            None
        } else {
            let logits = tape.select_cols(out, &bin).map_err(&f)?;
            Some(probability(tape, logits).map_err(&f)?)
        };
        Ok((normal, bern))
    }

    /// Per-row `log p(x | z)`, shape `[n, 1]`; `x` is a constant `[n, p]`.
    pub fn x_log_lik(
        tape: &mut Tape,
        pv: &ParamVars,
        params: &ModelParams,
        z: Var,
        x: &Tensor,
    ) -> Result<Var> {
        let f = in_term("log p(x|z)");
        let (normal, bern) = decode_x(tape, pv, params, z)?;
        let n = x.rows();
        let mut parts = Vec::new();
        if let Some((mean, sd)) = normal {
            let cont = params.continuous_columns();
            let xc = tape.constant(gather_cols(x, &cont));
            let diff = tape.sub(xc, mean).map_err(&f)?;
            let u = tape.div(diff, sd).map_err(&f)?;
            let u2 = tape.mul(u, u).map_err(&f)?;
            let half = tape.scale(u2, -0.5).map_err(&f)?;
            let ln_sd = tape.log(sd).map_err(&f)?;
            let lp = tape.sub(half, ln_sd).map_err(&f)?;
            let lp = tape.add_scalar(lp, -0.5 * LN_2PI).map_err(&f)?;
            parts.push(tape.sum_cols(lp).map_err(&f)?);
        }
        if let Some(pi) = bern {
            let bin = params.binary_columns();
            let xb = tape.constant(gather_cols(x, &bin));
            parts.push(bernoulli_rows(tape, pi, xb).map_err(&f)?);
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = tape.add(acc, p).map_err(&f)?;
        }
        debug_assert_eq!(tape.value(acc).rows(), n);
        Ok(acc)
    }

    /// Treatment probabilities `[n, q]` from covariates.
    pub fn decode_t(tape: &mut Tape, pv: &ParamVars, params: &ModelParams, x: Var) -> Result<Var> {
        let f = in_term("log p(t|x)");
        let out = head_forward(tape, pv.head(T_HEAD), x, params.activation).map_err(&f)?;
        probability(tape, out).map_err(&f)
    }

    /// Per-row `log p(t | x)`, shape `[n, 1]`.
    pub fn t_log_lik(tape: &mut Tape, pv: &ParamVars, params: &ModelParams, x: Var, t: &Tensor) -> Result<Var> {
        let f = in_term("log p(t|x)");
        let pi = decode_t(tape, pv, params, x)?;
        let tc = tape.constant(t.clone());
        bernoulli_rows(tape, pi, tc).map_err(&f)
    }

    /// Weibull `(λ, k)`, each `[n, 1]`, from `[z, t]`.
    pub fn decode_y(tape: &mut Tape, pv: &ParamVars, params: &ModelParams, z: Var, t: Var) -> Result<(Var, Var)> {
        let f = in_term("log p(y|t,z)");
        let zt = tape.concat(&[z, t]).map_err(&f)?;
        let out = head_forward(tape, pv.head(Y_DECODER), zt, params.activation).map_err(&f)?;
        let lam_pre = tape.select_cols(out, &[0]).map_err(&f)?;
        let k_pre = tape.select_cols(out, &[1]).map_err(&f)?;
        let lambda = positive(tape, lam_pre).map_err(&f)?;
        let k = positive(tape, k_pre).map_err(&f)?;
        Ok((lambda, k))
    }

    /// Per-row censored Weibull log-likelihood
    /// `δ (ln k - ln λ + (k-1) ln(y/λ)) - (y/λ)^k`, shape `[n, 1]`.
    pub fn censored_y_log_lik(tape: &mut Tape, lambda: Var, k: Var, y: &[f64], delta: &[f64]) -> Result<Var> {
        let f = in_term("log p(y|t,z)");
        let n = y.len();
        let ln_y = tape.constant(Tensor::matrix(n, 1, y.iter().map(|v| v.ln()).collect()).expect("shape"));
        let d = tape.constant(Tensor::matrix(n, 1, delta.to_vec()).expect("shape"));
        let ln_lam = tape.log(lambda).map_err(&f)?;
        let ln_ratio = tape.sub(ln_y, ln_lam).map_err(&f)?;
        let k_ratio = tape.mul(k, ln_ratio).map_err(&f)?;
        let cum_hazard = tape.exp(k_ratio).map_err(&f)?;
        let ln_k = tape.log(k).map_err(&f)?;
        let a = tape.sub(ln_k, ln_lam).map_err(&f)?;
        let b = tape.sub(k_ratio, ln_ratio).map_err(&f)?;
        let log_hazard = tape.add(a, b).map_err(&f)?;
        let event_part = tape.mul(log_hazard, d).map_err(&f)?;
        tape.sub(event_part, cum_hazard).map_err(&f)
    }

    fn gather_cols(x: &Tensor, cols: &[usize]) -> Tensor {
        let n = x.rows();
        let data = (0..n).flat_map(|r| cols.iter().map(move |&c| x.get(r, c))).collect();
        Tensor::matrix(n, cols.len(), data).expect("shape")
    }

    /// Per-row node handles of the ELBO terms. Rows of the z-dependent terms
    /// are ordered `row * mc_samples + sample`.
    #[derive(Debug, Clone, Copy)]
    pub struct ElboGraph {
        pub total: Var,
        pub log_prior: Var,
        pub log_px: Var,
        pub log_pt: Option<Var>,
        pub log_py: Option<Var>,
        pub log_q: Var,
    }

    /// Builds the Monte-Carlo ELBO on `tape` from fixed standard-normal
    /// `noise` of shape `[n * mc_samples, latent]`.
    pub fn elbo(
        tape: &mut Tape,
        pv: &ParamVars,
        params: &ModelParams,
        batch: &Batch,
        noise: &Tensor,
        opts: &ElboOptions,
    ) -> Result<ElboGraph> {
        let n = batch.len();
        let s = opts.mc_samples;
        let d = params.latent_dim;
        if noise.shape() != [n * s, d] {
            return Err(ModelError::Dim {
                what: "noise rows",
                expected: n * s,
                actual: noise.rows(),
            });
        }

        let fq = in_term("log q(z|x,y)");
        let p = params.n_covariates();
        let enc_data: Vec<f64> = (0..n)
            .flat_map(|r| {
                let mut row = batch.x.row(r).to_vec();
                row.push(batch.y_feature[r]);
                row
            })
            .collect();
        let enc_in = tape.constant(Tensor::matrix(n, p + 1, enc_data).expect("shape"));
        let (mu, sigma) = encode(tape, pv, params, enc_in)?;
        let mu_r = tape.repeat_rows(mu, s).map_err(&fq)?;
        let sigma_r = tape.repeat_rows(sigma, s).map_err(&fq)?;
        let eps = tape.constant(noise.clone());
        let scaled = tape.mul(sigma_r, eps).map_err(&fq)?;
        let z = tape.add(mu_r, scaled).map_err(&fq)?;

        // ln q(z|x,y) at z = μ + σ ε equals Σ_d (-½ ln 2π - ln σ - ½ ε²).
        let ln_sigma = tape.log(sigma_r).map_err(&fq)?;
        let eps_sq: Vec<f64> = noise.data().iter().map(|e| -0.5 * e * e - 0.5 * LN_2PI).collect();
        let eps_term = tape.constant(Tensor::matrix(n * s, d, eps_sq).expect("shape"));
        let lq = tape.sub(eps_term, ln_sigma).map_err(&fq)?;
        let log_q = tape.sum_cols(lq).map_err(&fq)?;

        let fp = in_term("log p(z)");
        let z2 = tape.mul(z, z).map_err(&fp)?;
        let lp = tape.scale(z2, -0.5).map_err(&fp)?;
        let lp = tape.add_scalar(lp, -0.5 * LN_2PI).map_err(&fp)?;
        let log_prior = tape.sum_cols(lp).map_err(&fp)?;

        let x_rep = repeat_tensor_rows(&batch.x, s);
        let log_px = x_log_lik(tape, pv, params, z, &x_rep)?;

        let log_pt = if opts.include_treatment {
            let x_var = tape.constant(batch.x.clone());
            Some(t_log_lik(tape, pv, params, x_var, &batch.t)?)
        } else {
            None
        };

        let log_py = if opts.include_survival {
            let t_rep = tape.constant(repeat_tensor_rows(&batch.t, s));
            let (lambda, k) = decode_y(tape, pv, params, z, t_rep)?;
            let y_rep: Vec<f64> = batch.y.iter().flat_map(|&v| std::iter::repeat_n(v, s)).collect();
            let d_rep: Vec<f64> = batch.delta.iter().flat_map(|&v| std::iter::repeat_n(v, s)).collect();
            Some(censored_y_log_lik(tape, lambda, k, &y_rep, &d_rep)?)
        } else {
            None
        };

        let ft = in_term("elbo total");
        let m_prior = tape.mean(log_prior).map_err(&ft)?;
        let m_px = tape.mean(log_px).map_err(&ft)?;
        let m_q = tape.mean(log_q).map_err(&ft)?;
        let mut total = tape.add(m_prior, m_px).map_err(&ft)?;
        total = tape.sub(total, m_q).map_err(&ft)?;
        for term in [log_pt, log_py].into_iter().flatten() {
            let m = tape.mean(term).map_err(&ft)?;
            total = tape.add(total, m).map_err(&ft)?;
        }
        Ok(ElboGraph {
            total,
            log_prior,
            log_px,
            log_pt,
            log_py,
            log_q,
        })
    }

    pub(crate) fn repeat_tensor_rows(t: &Tensor, times: usize) -> Tensor {
        let (n, c) = (t.rows(), t.cols());
        let data = (0..n)
            .flat_map(|r| std::iter::repeat_n(t.row(r), times).flatten().copied())
            .collect();
        Tensor::matrix(n * times, c, data).expect("shape")
    }
}

/// Which terms enter the ELBO and how many reparameterized draws per row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboOptions {
    pub mc_samples: usize,
    pub include_treatment: bool,
    pub include_survival: bool,
}

impl Default for ElboOptions {
    fn default() -> Self {
        Self {
            mc_samples: 1,
            include_treatment: true,
            include_survival: true,
        }
    }
}

impl ElboOptions {
    pub fn with_samples(mc_samples: usize) -> Self {
        Self {
            mc_samples,
            ..Self::default()
        }
    }
}

/// Batch-mean Monte-Carlo ELBO and its decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub total: f64,
    pub log_prior: f64,
    pub log_px: f64,
    pub log_pt: f64,
    pub log_py: f64,
    /// `-E_q[ln q(z|x,y)]`, the entropy term.
    pub neg_log_q: f64,
    pub mc_samples: usize,
    /// Monte-Carlo standard error of `total` given the batch; needs ≥ 2 samples.
    pub std_error: Option<f64>,
}

impl ElboEstimate {
    pub fn term_sum(&self) -> f64 {
        self.log_prior + self.log_px + self.log_pt + self.log_py + self.neg_log_q
    }
}

/// Standard-normal noise for `n` rows and `mc_samples` draws each, ordered
/// `row * mc_samples + sample`.
pub fn draw_noise(n: usize, mc_samples: usize, latent_dim: usize, rng: &mut SurvRng) -> Tensor {
    let data = (0..n * mc_samples * latent_dim).map(|_| standard_normal(rng)).collect();
    Tensor::matrix(n * mc_samples, latent_dim, data).expect("shape")
}

fn summarize(tape: &Tape, g: &graph::ElboGraph, n: usize, s: usize) -> ElboEstimate {
    let mean = |v: Var| {
        let t = tape.value(v);
        t.data().iter().sum::<f64>() / t.len() as f64
    };
    let log_pt = g.log_pt.map_or(0.0, mean);
    let log_py = g.log_py.map_or(0.0, mean);

    let std_error = (s >= 2).then(|| {
        let prior = tape.value(g.log_prior).data();
        let px = tape.value(g.log_px).data();
        let lq = tape.value(g.log_q).data();
        let py = g.log_py.map(|v| tape.value(v).data());
        let mut var_sum = 0.0;
        for r in 0..n {
            let vals: Vec<f64> = (0..s)
                .map(|k| {
                    let i = r * s + k;
                    prior[i] + px[i] - lq[i] + py.map_or(0.0, |p| p[i])
                })
                .collect();
            let m = vals.iter().sum::<f64>() / s as f64;
            var_sum += vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (s - 1) as f64 / s as f64;
        }
        var_sum.sqrt() / n as f64
    });

    ElboEstimate {
        total: tape.value(g.total).item(),
        log_prior: mean(g.log_prior),
        log_px: mean(g.log_px),
        log_pt,
        log_py,
        neg_log_q: -mean(g.log_q),
        mc_samples: s,
        std_error,
    }
}

/// ELBO under fixed noise (common random numbers).
pub fn elbo_with_noise(params: &ModelParams, batch: &Batch, noise: &Tensor, opts: &ElboOptions) -> Result<ElboEstimate> {
    batch.check(params)?;
    let mut tape = Tape::new();
    let pv = graph::ParamVars::register(&mut tape, params);
    let g = graph::elbo(&mut tape, &pv, params, batch, noise, opts)?;
    Ok(summarize(&tape, &g, batch.len(), opts.mc_samples))
}

/// Monte-Carlo ELBO estimate with fresh noise from `rng`.
pub fn elbo(params: &ModelParams, batch: &Batch, opts: &ElboOptions, rng: &mut SurvRng) -> Result<ElboEstimate> {
    if opts.mc_samples == 0 {
        return Err(ModelError::Dim {
            what: "mc_samples",
            expected: 1,
            actual: 0,
        });
    }
    let noise = draw_noise(batch.len(), opts.mc_samples, params.latent_dim, rng);
    elbo_with_noise(params, batch, &noise, opts)
}

/// ELBO and its gradient with respect to every tensor of
/// [`ModelParams::tensors`], under fixed noise.
pub fn elbo_and_grad(
    params: &ModelParams,
    batch: &Batch,
    noise: &Tensor,
    opts: &ElboOptions,
) -> Result<(ElboEstimate, Vec<Tensor>)> {
    batch.check(params)?;
    let mut tape = Tape::new();
    let pv = graph::ParamVars::register(&mut tape, params);
    let g = graph::elbo(&mut tape, &pv, params, batch, noise, opts)?;
    let est = summarize(&tape, &g, batch.len(), opts.mc_samples);
    let grads = tape.backward(g.total).map_err(in_term("backward"))?;
    Ok((est, pv.0.iter().map(|&v| grads.get(v)).collect()))
}

/// Per-covariate conditional distribution of `x_j | z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovariateDist {
    Normal { mean: f64, sd: f64 },
    Bernoulli(BernoulliParams),
}

fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(ModelError::Dim {
            what,
            expected,
            actual: v.len(),
        })
    }
}

fn row(v: &[f64]) -> Tensor {
    Tensor::matrix(1, v.len(), v.to_vec()).expect("shape")
}

/// Posterior `q(z | x, y)` for one standardized row.
pub fn encode(params: &ModelParams, x: &[f64], y_feature: f64) -> Result<DiagNormalParams> {
    check_len("covariate vector", x, params.n_covariates())?;
    let mut input = x.to_vec();
    input.push(y_feature);
    let mut tape = Tape::new();
    let pv = graph::ParamVars::register(&mut tape, params);
    let inp = tape.constant(row(&input));
    let (mu, sigma) = graph::encode(&mut tape, &pv, params, inp)?;
    Ok(DiagNormalParams::new(
        tape.value(mu).data().to_vec(),
        tape.value(sigma).data().to_vec(),
    )?)
}

/// `p(x_j | z)` for every covariate, in schema order.
pub fn decode_x(params: &ModelParams, z: &[f64]) -> Result<Vec<CovariateDist>> {
    check_len("latent vector", z, params.latent_dim)?;
    let mut tape = Tape::new();
    let pv = graph::ParamVars::register(&mut tape, params);
    let zv = tape.constant(row(z));
    let (normal, bern) = graph::decode_x(&mut tape, &pv, params, zv)?;
    let mut out = vec![CovariateDist::Normal { mean: 0.0, sd: 1.0 }; params.n_covariates()];
    if let Some((mean, sd)) = normal {
        for (i, &j) in params.continuous_columns().iter().enumerate() {
            out[j] = CovariateDist::Normal {
                mean: tape.value(mean).data()[i],
                sd: tape.value(sd).data()[i],
            };
        }
    }
    if let Some(pi) = bern {
        for (i, &j) in params.binary_columns().iter().enumerate() {
            out[j] = CovariateDist::Bernoulli(BernoulliParams::new(tape.value(pi).data()[i]));
        }
    }
    Ok(out)
}

/// `log p(x | z)` for each row of `z` (`[L, latent]`) against one covariate row.
pub fn x_log_lik_batch(params: &ModelParams, z: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    check_len("covariate vector", x, params.n_covariates())?;
    if z.cols() != params.latent_dim {
        return Err(ModelError::Dim {
            what: "latent vector",
            expected: params.latent_dim,
            actual: z.cols(),
        });
    }
    let mut tape = Tape::new();
    let pv = graph::ParamVars::register(&mut tape, params);
    let zv = tape.constant(z.clone());
    let xs = graph::repeat_tensor_rows(&row(x), z.rows());
    let ll = graph::x_log_lik(&mut tape, &pv, params, zv, &xs)?;
    Ok(tape.value(ll).data().to_vec())
}

/// Treatment probabilities `p(t_i | x)` for one standardized row.
pub fn decode_t(params: &ModelParams, x: &[f64]) -> Result<Vec<BernoulliParams>> {
    check_len("covariate vector", x, params.n_covariates())?;
    let mut tape = Tape::new();
    let pv = graph::ParamVars::register(&mut tape, params);
    let xv = tape.constant(row(x));
    let pi = graph::decode_t(&mut tape, &pv, params, xv)?;
    Ok(tape.value(pi).data().iter().map(|&p| BernoulliParams::new(p)).collect())
}

/// Weibull parameters (model time units) for each row of `z` under treatment `t`.
pub fn decode_y_batch(params: &ModelParams, z: &Tensor, t: &[f64]) -> Result<Vec<WeibullParams>> {
    check_len("treatment vector", t, params.n_treatments)?;
    if z.cols() != params.latent_dim {
        return Err(ModelError::Dim {
            what: "latent vector",
            expected: params.latent_dim,
            actual: z.cols(),
        });
    }
    let mut tape = Tape::new();
    let pv = graph::ParamVars::register(&mut tape, params);
    let zv = tape.constant(z.clone());
    let tv = tape.constant(graph::repeat_tensor_rows(&row(t), z.rows()));
    let (lambda, k) = graph::decode_y(&mut tape, &pv, params, zv, tv)?;
    tape.value(lambda)
        .data()
        .iter()
        .zip(tape.value(k).data())
        .map(|(&l, &k)| WeibullParams::new(l, k).map_err(ModelError::from))
        .collect()
}

pub fn decode_y(params: &ModelParams, z: &[f64], t: &[f64]) -> Result<WeibullParams> {
    check_len("latent vector", z, params.latent_dim)?;
    Ok(decode_y_batch(params, &row(z), t)?[0])
}
