//! JSON-over-HTTP front end for the rating workflow.
//!
//! | method | path                    | body / reply                                   |
//! |--------|-------------------------|------------------------------------------------|
//! | POST   | `/sessions`             | `{rater_id, sample_size, seed}` → session      |
//! | GET    | `/sessions/{id}`        | session                                        |
//! | GET    | `/sessions/{id}/next`   | case payload, or `{"done": true, progress}`    |
//! | POST   | `/sessions/{id}/ratings`| one rating, or `{"ratings": [...]}`            |
//! | GET    | `/summary`              | aggregate over all effective ratings           |
//! | GET    | `/cases/{id}/image`     | image bytes with their media type              |
//! | GET    | `/classes`              | diagnosis classes raters may choose from       |
//!
//! Errors are `{"error": code, "detail": text}`. Every state change goes
//! through one mutex-guarded store, so log appends are serialized.

use std::future::Future;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dermlens_core::eval::{EvalError, EvalStore, NextCase, RatingInput};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;

type Shared = Arc<Mutex<EvalStore>>;

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

impl ApiError {
    fn bad_request(detail: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            detail: detail.into(),
        }
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        let status = match &e {
            EvalError::UnknownSession(_) | EvalError::UnknownCase(_) | EvalError::EmptyLog => {
                StatusCode::NOT_FOUND
            }
            EvalError::OutOfOrder { .. } | EvalError::InsufficientCases { .. } => StatusCode::CONFLICT,
            EvalError::LikertOutOfRange { .. }
            | EvalError::UnknownDiagnosis(_)
            | EvalError::InvalidRater(_)
            | EvalError::EmptySample => StatusCode::BAD_REQUEST,
            EvalError::BadLog { .. } | EvalError::Image { .. } | EvalError::Io(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        Self {
            status,
            code: e.code(),
            detail: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}: {}", self.code, self.detail);
        }
        (
            self.status,
            Json(json!({"error": self.code, "detail": self.detail})),
        )
            .into_response()
    }
}

fn lock(store: &Shared) -> MutexGuard<'_, EvalStore> {
    store.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

#[derive(Deserialize)]
struct NewSession {
    rater_id: String,
    sample_size: usize,
    #[serde(default)]
    seed: u64,
}

async fn create_session(State(store): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: NewSession = parse_body(&body)?;
    let session = lock(&store).create_session(&req.rater_id, req.sample_size, req.seed)?;
    log::info!("session {} opened with {} cases", session.session_id, session.assigned_case_ids.len());
    Ok((StatusCode::CREATED, Json(session)).into_response())
}

async fn get_session(State(store): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = lock(&store).session(&id)?.clone();
    Ok(Json(session).into_response())
}

async fn next_case(State(store): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let body = match lock(&store).next_case(&id)? {
        NextCase::Case(payload) => {
            let mut value = serde_json::to_value(*payload).expect("payload serializes");
            value["done"] = Value::Bool(false);
            value
        }
        NextCase::Done(progress) => json!({"done": true, "progress": progress}),
    };
    Ok(Json(body).into_response())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RatingBody {
    Many { ratings: Vec<RatingInput> },
    One(RatingInput),
}

async fn submit_ratings(
    State(store): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let ratings = match parse_body::<RatingBody>(&body)? {
        RatingBody::Many { ratings } => ratings,
        RatingBody::One(r) => vec![r],
    };
    if ratings.is_empty() {
        return Err(ApiError::bad_request("no ratings supplied"));
    }
    let mut store = lock(&store);
    let mut progress = store.session(&id)?.progress();
    for rating in &ratings {
        progress = store.submit_rating(&id, rating)?;
    }
    Ok(Json(json!({"session_id": id, "accepted": ratings.len(), "progress": progress})).into_response())
}

async fn summary(State(store): State<Shared>) -> Result<Response, ApiError> {
    let summary = lock(&store).summary()?;
    Ok(Json(summary).into_response())
}

async fn case_image(State(store): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let image = lock(&store).case_image(&id)?;
    Ok(([(header::CONTENT_TYPE, image.media_type)], image.bytes).into_response())
}

async fn classes(State(store): State<Shared>) -> Response {
    Json(lock(&store).classes().to_vec()).into_response()
}

async fn fallback() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        code: "not_found",
        detail: "no such route".into(),
    }
}

/// Router over a shared store. Keep the `Arc` to inspect the store later.
pub fn router(store: Shared) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(next_case))
        .route("/sessions/{id}/ratings", post(submit_ratings))
        .route("/summary", get(summary))
        .route("/cases/{id}/image", get(case_image))
        .route("/classes", get(classes))
        .fallback(fallback)
        .with_state(store)
}

/// Serves until `shutdown` resolves, then syncs the rating log.
pub async fn serve(
    listener: TcpListener,
    store: Shared,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(store.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    lock(&store)
        .sync()
        .map_err(|e| std::io::Error::other(e.to_string()))
}

/// Resolves on Ctrl-C.
pub async fn ctrl_c() {
    if let Err(e) = tokio::signal::ctrl_c().await {
        log::error!("could not listen for interrupts: {e}");
        std::future::pending::<()>().await;
    }
}
