//! Typed client for the prediction service.

use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;
use survae_core::api::{ContrastRequest, ContrastResponse, ErrorBody, MetaResponse, PredictRequest, PredictResponse};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    /// The server answered with a non-success status.
    #[error("server returned {status}: {message}")]
    Status { status: StatusCode, message: String },
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_owned(),
            http: reqwest::Client::new(),
        }
    }

    pub async fn meta(&self) -> Result<MetaResponse, ClientError> {
        let resp = self.http.get(format!("{}/v1/model/meta", self.base)).send().await?;
        decode(resp).await
    }

    pub async fn predict(&self, req: &PredictRequest) -> Result<PredictResponse, ClientError> {
        self.post("/v1/predict", req).await
    }

    pub async fn contrast(&self, req: &ContrastRequest) -> Result<ContrastResponse, ClientError> {
        self.post("/v1/contrast", req).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        decode(resp).await
    }
}

async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp.json().await?);
    }
    let text = resp.text().await.unwrap_or_default();
    let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
    Err(ClientError::Status { status, message })
}
