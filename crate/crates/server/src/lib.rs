//! HTTP service: dataset generation, training, evaluation, sweeps, the
//! pixel baseline, and decoder sessions that keep per-device history across
//! packet uploads.

mod error;
mod jobs;
mod sessions;

use std::collections::HashMap;
use std::sync::atomic::AtomicU64;
use std::sync::{Arc, Mutex};

use axum::extract::DefaultBodyLimit;
use axum::routing::{delete, get, post};
use axum::Router;

pub use error::ApiError;
pub use sessions::Session;

#[derive(Default)]
pub struct AppState {
    sessions: Mutex<HashMap<u64, Session>>,
    next_session: AtomicU64,
}

pub type SharedState = Arc<AppState>;

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/health", get(jobs::health))
        .route("/v1/gen-data", post(jobs::gen_data))
        .route("/v1/train", post(jobs::train))
        .route("/v1/evaluate", post(jobs::evaluate))
        .route("/v1/sweep", post(jobs::sweep))
        .route("/v1/baseline", post(jobs::baseline))
        .route("/v1/encode", post(jobs::encode))
        .route("/v1/sessions", post(sessions::open))
        .route("/v1/sessions/{id}/packets", post(sessions::packets))
        .route("/v1/sessions/{id}/fuse", post(sessions::fuse))
        .route("/v1/sessions/{id}", delete(sessions::close))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(SharedState::default())).await
}
