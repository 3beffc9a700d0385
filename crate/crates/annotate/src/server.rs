//! HTTP endpoints: `GET /api/queue`, `POST /api/annotations`, `GET /api/status`.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;

use crate::preview::Preview;
use crate::store::{Annotation, AnnotationTask, StoreError, StoreStatus, TaskStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub index: usize,
    pub current_sigma: f64,
    pub ladder: Vec<f64>,
    /// Base64 PNG per rung, or null for non-visual data.
    pub previews: Vec<Option<String>>,
    /// `"image"` or `"numeric"`.
    pub kind: String,
    /// Noisy feature vectors per rung for non-visual data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl From<&AnnotationTask> for TaskView {
    fn from(t: &AnnotationTask) -> Self {
        let image = t.previews.iter().all(|p| matches!(p, Preview::Png(_)));
        let previews = t
            .previews
            .iter()
            .map(|p| p.png().map(|b| STANDARD.encode(b)))
            .collect();
        let values = (!image).then(|| {
            t.previews
                .iter()
                .map(|p| p.values().map(<[f64]>::to_vec).unwrap_or_default())
                .collect()
        });
        TaskView {
            task_id: t.task_id.clone(),
            index: t.index,
            current_sigma: t.current_sigma,
            ladder: t.ladder.clone(),
            previews,
            kind: if image { "image" } else { "numeric" }.to_string(),
            values,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueView {
    pub tasks: Vec<TaskView>,
}

#[derive(Debug, Clone, Deserialize)]
struct SubmitBody {
    task_id: String,
    sigma_star: f64,
    #[serde(default)]
    note: Option<String>,
}

fn error_response(code: StatusCode, message: impl Into<String>) -> Response {
    (code, Json(json!({ "error": message.into() }))).into_response()
}

impl IntoResponse for StoreError {
    fn into_response(self) -> Response {
        let code = StatusCode::from_u16(self.status_code()).unwrap_or(StatusCode::BAD_REQUEST);
        error_response(code, self.to_string())
    }
}

async fn queue(State(store): State<Arc<TaskStore>>) -> Json<QueueView> {
    let tasks = store.pending().iter().map(TaskView::from).collect();
    Json(QueueView { tasks })
}

async fn submit(
    State(store): State<Arc<TaskStore>>,
    body: Result<Json<SubmitBody>, JsonRejection>,
) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(rejection) => return error_response(StatusCode::BAD_REQUEST, rejection.body_text()),
    };
    let annotation = Annotation {
        task_id: body.task_id,
        sigma_star: body.sigma_star,
        note: body.note,
        timestamp: 0,
    };
    match store.submit(annotation) {
        Ok(()) => Json(json!({ "ok": true })).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn status(State(store): State<Arc<TaskStore>>) -> Json<StoreStatus> {
    Json(store.status())
}

pub fn router(store: Arc<TaskStore>) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/annotations", post(submit))
        .route("/api/status", get(status))
        .with_state(store)
}

/// A running service on its own runtime thread.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves until the handle is
/// shut down or dropped. Bind errors are reported before returning.
pub fn serve(addr: SocketAddr, store: Arc<TaskStore>) -> std::io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name("annotate-http".into())
        .spawn(move || {
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()?;
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, router(store))
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
            })
        })?;
    log::info!("annotation service listening on http://{local}");
    Ok(ServerHandle {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
