use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use survae_core::data::SynthConfig;
use survae_core::eval::RiskScore;
use survae_core::impute::ImputeOptions;
use survae_core::pipeline::{FitOptions, DEFAULT_VAL_FRACTION};
use survae_core::predict::{DEFAULT_SAMPLES, DEFAULT_THRESHOLD};
use survae_core::training::TrainConfig;
use survae_core::api::DEFAULT_HORIZON;

#[derive(Debug, Parser)]
#[command(name = "survae", version, about = "Survival VAE pipeline: synth, impute, train, eval, predict, serve")]
#[command(args_override_self = true)]
pub struct Cli {
    /// TOML file supplying flag values; flags on the command line win.
    /// Top-level keys apply to every subcommand that has the flag, keys
    /// under `[train]`, `[eval]` etc. only to that subcommand [default: none]
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Fill in missing covariates by chained equations.
    Impute(ImputeArgs),
    /// Fit the VAE and write the model artifact and ELBO trace.
    Train(TrainArgs),
    /// Train and validation c-index of the VAE and a Cox baseline.
    Eval(EvalArgs),
    /// Predictive survival and treatment contrast for one patient.
    Predict(PredictArgs),
    /// Serve predictions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DataPaths {
    /// Dataset CSV
    #[arg(long, value_name = "PATH", default_value = "data.csv")]
    pub data: PathBuf,
    /// Schema TOML describing the CSV columns
    #[arg(long, value_name = "PATH", default_value = "schema.toml")]
    pub schema: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = SynthConfig::default().n)]
    pub n: usize,
    /// Dimension of the true latent factors
    #[arg(long, default_value_t = SynthConfig::default().latent_dim)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_continuous)]
    pub n_continuous: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_binary)]
    pub n_binary: usize,
    /// Strength of covariate-driven treatment assignment; 0 randomizes
    #[arg(long, default_value_t = SynthConfig::default().selection_bias)]
    pub selection_bias: f64,
    /// Log-scale survival gain per treatment
    #[arg(long, default_value_t = SynthConfig::default().treatment_effect)]
    pub treatment_effect: f64,
    /// Target fraction of censored rows
    #[arg(long, default_value_t = SynthConfig::default().censoring_rate)]
    pub censoring_rate: f64,
    /// Nonlinear latent-to-covariate map
    #[arg(long, default_value_t = SynthConfig::default().nonlinear, action = clap::ArgAction::Set)]
    pub nonlinear: bool,
    #[arg(long, default_value_t = SynthConfig::default().noise_sd)]
    pub noise_sd: f64,
    /// Fraction of covariate cells masked at random (MAR)
    #[arg(long, default_value_t = 0.0)]
    pub missing_rate: f64,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    pub seed: u64,
    #[arg(long, value_name = "PATH", default_value = "data.csv")]
    pub out: PathBuf,
    #[arg(long, value_name = "PATH", default_value = "schema.toml")]
    pub schema_out: PathBuf,
    /// Ground-truth JSON (latents and generating parameters) [default: none]
    #[arg(long, value_name = "PATH")]
    pub truth_out: Option<PathBuf>,
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            n: self.n,
            latent_dim: self.latent_dim,
            n_continuous: self.n_continuous,
            n_binary: self.n_binary,
            selection_bias: self.selection_bias,
            treatment_effect: self.treatment_effect,
            censoring_rate: self.censoring_rate,
            nonlinear: self.nonlinear,
            noise_sd: self.noise_sd,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub paths: DataPaths,
    /// Completed dataset CSV
    #[arg(long, value_name = "PATH", default_value = "imputed.csv")]
    pub out: PathBuf,
    /// Fitted imputation model JSON [default: none]
    #[arg(long, value_name = "PATH")]
    pub model_out: Option<PathBuf>,
    #[arg(long, default_value_t = ImputeOptions::default().rounds)]
    pub rounds: usize,
    /// Add residual noise to continuous predictions while fitting
    #[arg(long, default_value_t = ImputeOptions::default().jitter, action = clap::ArgAction::Set)]
    pub jitter: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub paths: DataPaths,
    /// Model artifact JSON
    #[arg(long, value_name = "PATH", default_value = "model.json")]
    pub model: PathBuf,
    /// ELBO trace: epoch, train ELBO, validation ELBO (tab separated)
    #[arg(long, value_name = "PATH", default_value = "elbo_trace.tsv")]
    pub trace: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = TrainConfig::default().beta1)]
    pub beta1: f64,
    #[arg(long, default_value_t = TrainConfig::default().beta2)]
    pub beta2: f64,
    #[arg(long, default_value_t = TrainConfig::default().eps)]
    pub eps: f64,
    /// L2 penalty on weight matrices
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().max_epochs)]
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = TrainConfig::default().patience)]
    pub patience: usize,
    /// Monte-Carlo samples per row in gradient steps
    #[arg(long, default_value_t = TrainConfig::default().mc_samples_train)]
    pub mc_samples_train: usize,
    /// Monte-Carlo samples per row when scoring epochs
    #[arg(long, default_value_t = TrainConfig::default().mc_samples_eval)]
    pub mc_samples_eval: usize,
    #[arg(long, default_value_t = TrainConfig::default().latent_dim)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = TrainConfig::default().hidden_dim)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = ImputeOptions::default().rounds)]
    pub impute_rounds: usize,
    #[arg(long, default_value_t = ImputeOptions::default().jitter, action = clap::ArgAction::Set)]
    pub impute_jitter: bool,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    pub seed: u64,
}

impl TrainArgs {
    pub fn options(&self) -> FitOptions {
        FitOptions {
            train: TrainConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
                batch_size: self.batch_size,
                max_epochs: self.max_epochs,
                patience: self.patience,
                mc_samples_train: self.mc_samples_train,
                mc_samples_eval: self.mc_samples_eval,
                latent_dim: self.latent_dim,
                hidden_dim: self.hidden_dim,
                seed: self.seed,
            },
            val_fraction: self.val_fraction,
            impute: ImputeOptions {
                rounds: self.impute_rounds,
                jitter: self.impute_jitter,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RiskKind {
    NegMean,
    NegMedian,
    FailureProb,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub paths: DataPaths,
    #[arg(long, value_name = "PATH", default_value = "model.json")]
    pub model: PathBuf,
    /// Report JSON
    #[arg(long, value_name = "PATH", default_value = "eval_report.json")]
    pub report: PathBuf,
    /// Importance samples per patient
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    /// How a predictive distribution becomes a risk score
    #[arg(long, value_enum, default_value_t = RiskKind::NegMean)]
    pub risk: RiskKind,
    /// Horizon for the failure-prob risk score
    #[arg(long, default_value_t = DEFAULT_HORIZON)]
    pub horizon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl EvalArgs {
    pub fn risk(&self) -> RiskScore {
        match self.risk {
            RiskKind::NegMean => RiskScore::NegMean,
            RiskKind::NegMedian => RiskScore::NegMedian,
            RiskKind::FailureProb => RiskScore::FailureProb { horizon: self.horizon },
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model artifact JSON, used unless --server is given
    #[arg(long, value_name = "PATH", default_value = "model.json")]
    pub model: PathBuf,
    /// Base URL of a running service, e.g. http://127.0.0.1:8080 [default: none]
    #[arg(long, value_name = "URL")]
    pub server: Option<String>,
    /// Covariate value as NAME=VALUE; repeat per covariate, leave the value
    /// empty or omit the covariate to impute it [default: none]
    #[arg(long = "covariate", value_name = "NAME=VALUE")]
    pub covariates: Vec<String>,
    /// Reference treatment: comma-separated treatment names, a 0/1 vector
    /// such as 1,0, or "none"
    #[arg(long, default_value = "none")]
    pub t0: String,
    /// Treatment to predict and compare against --t0, same format
    #[arg(long, default_value = "none")]
    pub t1: String,
    #[arg(long, default_value_t = DEFAULT_HORIZON)]
    pub horizon: f64,
    /// Minimum survival gain at the horizon to intensify treatment
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Importance samples
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report JSON
    #[arg(long, value_name = "PATH", default_value = "predict_report.json")]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Model artifact JSON; without it every endpoint answers 503 [default: none]
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Mixed with a hash of each request body to seed requests without one
    #[arg(long, default_value_t = 0)]
    pub server_seed: u64,
}
