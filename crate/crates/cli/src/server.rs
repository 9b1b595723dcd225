//! HTTP wiring for the game service.

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dwd_core::service::{AnswerRequest, CreateRequest, GameService, ServiceError};

struct ApiError(ServiceError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0.body())).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(ServiceError::BadRequest(e.body_text()))
    }
}

type Shared = Arc<GameService>;

async fn blocking<T, F>(svc: Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&GameService) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError(ServiceError::Internal(e.to_string())))?
        .map_err(ApiError)
}

async fn create(State(svc): State<Shared>, body: Result<Json<CreateRequest>, JsonRejection>) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let resp = blocking(svc, move |s| s.create(&req)).await?;
    Ok((StatusCode::CREATED, Json(resp)).into_response())
}

async fn session(State(svc): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(svc.get(&id)?).into_response())
}

async fn answer(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<AnswerRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let resp = blocking(svc, move |s| s.answer(&id, &req)).await?;
    Ok(Json(resp).into_response())
}

async fn stats(State(svc): State<Shared>) -> Json<dwd_core::service::Stats> {
    Json(svc.stats())
}

pub fn router(svc: Shared) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(session))
        .route("/sessions/{id}/answer", post(answer))
        .route("/stats", get(stats))
        .with_state(svc)
}

/// Serves until the process is stopped, dropping idle sessions once a minute.
pub async fn serve(svc: Shared, port: u16) -> anyhow::Result<()> {
    let sweeper = Arc::clone(&svc);
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            sweeper.sweep(Instant::now());
        }
    });
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(svc)).await?;
    Ok(())
}
