use serde::Serialize;
use survae_client::ClientError;
use survae_core::api::ApiError;
use survae_core::data::DataError;
use survae_core::impute::ImputeError;
use survae_core::pipeline::PipelineError;
use survae_core::training::TrainError;
use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Impute(#[from] ImputeError),
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Pipeline(PipelineError::Train(TrainError::Config(_))) => EXIT_USAGE,
            CliError::Pipeline(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Api(ApiError::Internal(_)) => EXIT_NUMERICAL,
            CliError::Client(e) if e.status().is_some_and(|s| s.is_server_error()) => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        }
    }

    /// Which part of the pipeline failed.
    pub fn module(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Pipeline(e) => match e {
                PipelineError::Data(_) => "data",
                PipelineError::Impute(_) => "impute",
                PipelineError::Train(_) => "training",
                PipelineError::Model(_) => "model",
                PipelineError::Predict(_) => "predict",
                PipelineError::Cox(_) => "coxph",
                PipelineError::Eval(_) => "eval",
                PipelineError::Artifact(_) | PipelineError::Json(_) => "artifact",
                PipelineError::Io(_) => "io",
            },
            CliError::Data(_) => "data",
            CliError::Impute(_) => "impute",
            CliError::Api(_) => "service",
            CliError::Client(_) => "client",
            CliError::Io { .. } => "io",
        }
    }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    module: &'a str,
    exit_code: i32,
}

impl CliError {
    /// One JSON object on one line, for stderr.
    pub fn to_line(&self) -> String {
        let message = self.to_string();
        serde_json::to_string(&ErrorLine {
            error: &message,
            module: self.module(),
            exit_code: self.exit_code(),
        })
        .expect("error line serializes")
    }
}
