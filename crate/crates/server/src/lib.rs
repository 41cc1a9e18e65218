//! HTTP/JSON prediction service.
//!
//! | method | path              | body                | response            |
//! |--------|-------------------|---------------------|---------------------|
//! | POST   | `/v1/predict`     | `PredictRequest`    | `PredictResponse`   |
//! | POST   | `/v1/contrast`    | `ContrastRequest`   | `ContrastResponse`  |
//! | GET    | `/v1/model/meta`  |                     | `MetaResponse`      |
//!
//! Errors are `{"error": "..."}` with status 400 (unknown covariate, bad
//! treatment vector, nonpositive horizon, malformed JSON), 422 (non-finite
//! or mistyped values) or 503 (no model loaded). A request without a seed
//! gets one derived from the server seed and the request body, so repeating
//! a request repeats its answer.

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::error::Category;
use survae_core::api::{request_seed, ApiError, ContrastRequest, ErrorBody, PredictRequest, Service};

#[derive(Clone, Default)]
pub struct AppState {
    service: Option<Arc<Service>>,
    server_seed: u64,
}

impl AppState {
    pub fn new(service: Service, server_seed: u64) -> Self {
        Self {
            service: Some(Arc::new(service)),
            server_seed,
        }
    }

    /// State with no model; every endpoint answers 503.
    pub fn unloaded() -> Self {
        Self::default()
    }
}

pub struct HttpError(StatusCode, String);

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

impl From<ApiError> for HttpError {
    fn from(e: ApiError) -> Self {
        let status = match e {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NonFinite(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        HttpError(status, e.to_string())
    }
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, HttpError> {
    serde_json::from_slice(body).map_err(|e| {
        let status = match e.classify() {
            Category::Data => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        HttpError(status, format!("invalid request body: {e}"))
    })
}

fn loaded(state: &AppState) -> Result<Arc<Service>, HttpError> {
    state
        .service
        .clone()
        .ok_or_else(|| HttpError(StatusCode::SERVICE_UNAVAILABLE, "no model loaded".into()))
}

/// Runs CPU-bound prediction work off the async executor.
async fn compute<T, F>(f: F) -> Result<T, HttpError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| HttpError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(HttpError::from)
}

async fn predict(State(state): State<AppState>, body: Bytes) -> Result<Response, HttpError> {
    let service = loaded(&state)?;
    let req: PredictRequest = parse(&body)?;
    let seed = request_seed(state.server_seed, &body);
    let resp = compute(move || service.predict(&req, seed)).await?;
    Ok(Json(resp).into_response())
}

async fn contrast(State(state): State<AppState>, body: Bytes) -> Result<Response, HttpError> {
    let service = loaded(&state)?;
    let req: ContrastRequest = parse(&body)?;
    let seed = request_seed(state.server_seed, &body);
    let resp = compute(move || service.contrast(&req, seed)).await?;
    Ok(Json(resp).into_response())
}

async fn meta(State(state): State<AppState>) -> Result<Response, HttpError> {
    Ok(Json(loaded(&state)?.meta()).into_response())
}

async fn access_log(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_owned();
    let start = Instant::now();
    let resp = next.run(req).await;
    tracing::info!(
        target: "access",
        %method,
        path,
        status = resp.status().as_u16(),
        micros = start.elapsed().as_micros() as u64,
    );
    resp
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/predict", post(predict))
        .route("/v1/contrast", post(contrast))
        .route("/v1/model/meta", get(meta))
        .layer(middleware::from_fn(access_log))
        .with_state(state)
}

/// Serves on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
