//! JSON API over a shared pipeline, used by the curation UI.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

use contextgpt::context::{ContextSnapshot, ContextValue};
use contextgpt::pipeline::{load_windows, LineError, Pipeline, PipelineError, RunSummary};
use contextgpt::pool::PoolError;
use contextgpt::Example;

#[derive(Clone)]
pub struct AppState {
    pub pipeline: Arc<Pipeline>,
    pub default_k: f64,
    pub max_in_flight: usize,
}

/// Error payload: `{"error": {"kind": ..., "message": ...}}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl ToString) -> Self {
        Self {
            status,
            kind,
            message: message.to_string(),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(err: PipelineError) -> Self {
        use PipelineError as E;
        let (status, kind) = match &err {
            E::Pool(PoolError::DuplicateId(_)) => (StatusCode::CONFLICT, "duplicate_id"),
            E::Pool(PoolError::UnknownId(_)) => (StatusCode::NOT_FOUND, "unknown_id"),
            E::Pool(PoolError::InvalidExample { .. }) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid_example")
            }
            E::Pool(PoolError::Io { .. }) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
            E::Gateway(_) => (StatusCode::BAD_GATEWAY, "backend"),
            E::Embed(_) => (StatusCode::BAD_GATEWAY, "embedder"),
            E::Io { .. } => (StatusCode::BAD_REQUEST, "io"),
            _ => (StatusCode::BAD_REQUEST, "invalid_request"),
        };
        Self::new(status, kind, err)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"kind": self.kind, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs pipeline work off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> ApiResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))?
}

#[derive(Debug, Deserialize)]
pub struct ContextBody {
    pub context: BTreeMap<String, ContextValue>,
    #[serde(default)]
    pub z: Option<u32>,
}

impl ContextBody {
    fn snapshot(self, pipeline: &Pipeline) -> ContextSnapshot {
        let z = self
            .z
            .unwrap_or_else(|| pipeline.domain().schema.window_seconds());
        ContextSnapshot {
            user: None,
            window_seconds: z,
            assignments: self.context,
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct ProbeBody {
    #[serde(flatten)]
    pub context: ContextBody,
    #[serde(default)]
    pub k: Option<f64>,
    #[serde(default)]
    pub dry_run: bool,
}

#[derive(Debug, Deserialize)]
pub struct BatchBody {
    pub windows_ref: PathBuf,
    #[serde(default)]
    pub k: Option<f64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct BatchResponse {
    pub out: PathBuf,
    pub summary: RunSummary,
    pub rejected: Vec<LineError>,
}

async fn schema(State(state): State<AppState>) -> Json<Value> {
    Json(state.pipeline.domain().to_json())
}

async fn activities(State(state): State<AppState>) -> Json<Vec<String>> {
    Json(state.pipeline.domain().activities.names().to_vec())
}

async fn list_pool(State(state): State<AppState>) -> Json<Vec<Example>> {
    Json(state.pipeline.pool().list())
}

async fn add_example(
    State(state): State<AppState>,
    Json(example): Json<Example>,
) -> ApiResult<impl IntoResponse> {
    let stored = example.clone();
    blocking(move || Ok(state.pipeline.add_example(example)?)).await?;
    Ok((StatusCode::CREATED, Json(stored)))
}

async fn remove_example(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<Example>> {
    blocking(move || Ok(Json(state.pipeline.remove_example(&id)?))).await
}

async fn similarity(
    State(state): State<AppState>,
    Json(body): Json<ContextBody>,
) -> ApiResult<Json<Value>> {
    blocking(move || {
        let snap = body.snapshot(&state.pipeline);
        let description = state.pipeline.describe(&snap)?;
        let scores: Vec<Value> = state
            .pipeline
            .similarity(&snap)?
            .into_iter()
            .map(|s| json!({"id": s.example.id, "score": s.score}))
            .collect();
        Ok(Json(json!({"description": description, "scores": scores})))
    })
    .await
}

async fn probe(
    State(state): State<AppState>,
    Json(body): Json<ProbeBody>,
) -> ApiResult<Json<Value>> {
    let k = body.k.unwrap_or(state.default_k);
    blocking(move || {
        let snap = body.context.snapshot(&state.pipeline);
        let value = if body.dry_run {
            serde_json::to_value(state.pipeline.prepare(&snap, k)?)
        } else {
            serde_json::to_value(state.pipeline.probe(&snap, k)?)
        };
        value
            .map(Json)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))
    })
    .await
}

async fn batch(
    State(state): State<AppState>,
    Json(body): Json<BatchBody>,
) -> ApiResult<Json<BatchResponse>> {
    let k = body.k.unwrap_or(state.default_k);
    blocking(move || {
        let pipeline = &state.pipeline;
        let ingest = load_windows(&body.windows_ref, pipeline.domain())?;
        let result = pipeline.run_batch(&ingest.records, k, state.max_in_flight)?;
        let out = body.out.unwrap_or_else(|| {
            let mut p = body.windows_ref.clone().into_os_string();
            p.push(".vectors.jsonl");
            p.into()
        });
        let io = |e: std::io::Error| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", e);
        let file = std::fs::File::create(&out).map_err(io)?;
        result
            .write_jsonl(std::io::BufWriter::new(file))
            .map_err(io)?;
        Ok(Json(BatchResponse {
            out,
            summary: result.summary,
            rejected: ingest.rejected,
        }))
    })
    .await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/schema", get(schema))
        .route("/activities", get(activities))
        .route("/pool", get(list_pool).post(add_example))
        .route("/pool/{id}", delete(remove_example))
        .route("/similarity", post(similarity))
        .route("/probe", post(probe))
        .route("/batch", post(batch))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub async fn serve(
    pipeline: Arc<Pipeline>,
    default_k: f64,
    max_in_flight: usize,
    addr: &str,
) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| anyhow::anyhow!("binding {addr}: {e}"))?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let app = router(AppState {
        pipeline,
        default_k,
        max_in_flight,
    });
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
