//! HTTP inference service over one loaded checkpoint.
//!
//! - `POST /api/infer[?pad=N]` takes an [`InferenceRequest`] and returns an
//!   [`InferenceResponse`]; wall time goes in the `x-latency-ms` header so
//!   identical requests get byte-identical bodies.
//! - `GET /healthz` reports the checkpoint and vocabulary hashes.
//!
//! Errors are JSON `{"error": ..}` with status 400 (malformed request or
//! image), 422 (query characters outside the vocabulary) or 500 (with an
//! opaque `id` that is also logged).

use std::net::SocketAddr;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::error::InferError;
use crate::inference::{Engine, InferenceRequest};

pub const LATENCY_HEADER: &str = "x-latency-ms";
const BODY_LIMIT: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint: String,
    pub vocabulary: String,
    pub scheme: String,
    /// Largest accepted image, `[width, height]`.
    pub max_image: [usize; 2],
}

#[derive(Debug, Deserialize)]
struct PadParam {
    pad: Option<f64>,
}

struct ApiError(StatusCode, serde_json::Value);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<InferError> for ApiError {
    fn from(e: InferError) -> Self {
        match e {
            InferError::BadRequest(m) => ApiError(StatusCode::BAD_REQUEST, json!({ "error": m })),
            e @ InferError::UnknownChars { .. } => ApiError(StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": e.to_string() })),
            InferError::Internal(m) => internal(m),
        }
    }
}

fn internal(message: String) -> ApiError {
    let id = uuid::Uuid::new_v4().to_string();
    log::error!("request {id} failed: {message}");
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "internal error", "id": id }))
}

async fn healthz(State(engine): State<Engine>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        checkpoint: engine.checkpoint_hash().to_string(),
        vocabulary: engine.vocab_hash(),
        scheme: engine.model().config().scheme.name().to_string(),
        max_image: engine.max_image().into(),
    })
}

async fn infer(
    State(engine): State<Engine>,
    pad: Result<Query<PadParam>, axum::extract::rejection::QueryRejection>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let start = Instant::now();
    let pad = pad.map_err(|e| ApiError(StatusCode::BAD_REQUEST, json!({ "error": e.body_text() })))?.0.pad;
    let req: InferenceRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, json!({ "error": format!("malformed request: {e}") })))?;
    let resp = tokio::task::spawn_blocking(move || engine.infer(&req, pad))
        .await
        .map_err(|e| internal(e.to_string()))??;
    let mut out = Json(resp).into_response();
    let ms = format!("{:.3}", start.elapsed().as_secs_f64() * 1e3);
    out.headers_mut().insert(LATENCY_HEADER, HeaderValue::from_str(&ms).expect("ascii number"));
    Ok(out)
}

/// CORS for the given UI origins; `*` or an empty list allows any origin.
pub fn cors(origins: &[String]) -> CorsLayer {
    let allow = if origins.is_empty() || origins.iter().any(|o| o == "*") {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([axum::http::header::CONTENT_TYPE])
        .expose_headers([axum::http::HeaderName::from_static(LATENCY_HEADER)])
}

pub fn router(engine: Engine, cors_origins: &[String]) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/infer", post(infer))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .layer(cors(cors_origins))
        .with_state(engine)
}

/// Serves until Ctrl-C.
pub async fn serve(engine: Engine, addr: SocketAddr, cors_origins: &[String]) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(engine, cors_origins))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
