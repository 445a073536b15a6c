//! axum routes over [`Service`].

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use tokio::net::TcpListener;

use crate::store::{Service, ServiceError};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body())).into_response()
    }
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/PrivAR", post(privar))
        .route("/PrivAR/topup", post(topup))
        .route("/PrivAR/end", post(end))
        .route("/healthz", get(healthz))
        .with_state(svc)
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(e.to_string()))
}

async fn privar(State(svc): State<Arc<Service>>, body: Bytes) -> Response {
    match svc.privar_json(&body) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => {
            tracing::debug!(error = %e, "PrivAR request rejected");
            e.into_response()
        }
    }
}

async fn topup(State(svc): State<Arc<Service>>, body: Bytes) -> Response {
    parse(&body).and_then(|r| svc.top_up(&r)).map(Json).into_response()
}

async fn end(State(svc): State<Arc<Service>>, body: Bytes) -> Response {
    parse(&body).and_then(|r| svc.end(&r)).map(Json).into_response()
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

/// Serves until `shutdown` resolves, reaping idle sessions in the
/// background, then writes the snapshot if one is configured.
pub async fn serve<F>(listener: TcpListener, svc: Arc<Service>, shutdown: F) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    let period = (svc.config().session_ttl / 4).max(Duration::from_secs(1));
    let reaper = {
        let svc = svc.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            loop {
                tick.tick().await;
                let n = svc.purge_expired();
                if n > 0 {
                    tracing::info!(expired = n, "dropped idle sessions");
                }
            }
        })
    };
    if let Ok(addr) = listener.local_addr() {
        tracing::info!(%addr, "listening");
    }
    let result = axum::serve(listener, router(svc.clone())).with_graceful_shutdown(shutdown).await;
    reaper.abort();
    if let Some(path) = &svc.config().snapshot_path {
        svc.save_snapshot(path)?;
        tracing::info!(path = %path.display(), sessions = svc.session_count(), "wrote session snapshot");
    }
    result
}
