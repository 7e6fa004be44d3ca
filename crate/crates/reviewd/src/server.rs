use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tower_http::services::ServeDir;
use wood_core::manifest::resolve;
use wood_core::oodpipe::{append_decision, load_ranked, read_decision_log, ReviewDecision};

use crate::queue::{DecisionRequest, Outcome, ReviewState};

pub const DEFAULT_BATCH_SIZE: usize = 10;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Core(#[from] wood_core::Error),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Runtime(std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub candidates: PathBuf,
    pub log: PathBuf,
    /// Served at `/` when set.
    pub static_dir: Option<PathBuf>,
    /// Hard-OoD images wanted; defaults to the number of queued images.
    pub target: Option<usize>,
}

impl ServeConfig {
    pub fn new(candidates: impl Into<PathBuf>, log: impl Into<PathBuf>) -> Self {
        ServeConfig {
            candidates: candidates.into(),
            log: log.into(),
            static_dir: None,
            target: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionAck {
    /// False when the request duplicated an existing line.
    pub appended: bool,
    pub decision: ReviewDecision,
}

enum PostError {
    Unknown,
    Io(String),
}

struct WriteRequest {
    req: DecisionRequest,
    reply: oneshot::Sender<Result<DecisionAck, PostError>>,
}

#[derive(Clone)]
struct AppState {
    queue: Arc<Mutex<ReviewState>>,
    writer: mpsc::Sender<WriteRequest>,
    candidates: PathBuf,
}

impl AppState {
    fn lock(&self) -> MutexGuard<'_, ReviewState> {
        self.queue.lock().unwrap_or_else(|e| e.into_inner())
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// The only code path that touches the log file.
fn run_writer(queue: Arc<Mutex<ReviewState>>, log: PathBuf, mut rx: mpsc::Receiver<WriteRequest>) {
    while let Some(WriteRequest { req, reply }) = rx.blocking_recv() {
        let mut q = queue.lock().unwrap_or_else(|e| e.into_inner());
        let result = match q.prepare(&req, now_ms()) {
            Outcome::UnknownCandidate => Err(PostError::Unknown),
            Outcome::Duplicate(decision) => Ok(DecisionAck {
                appended: false,
                decision,
            }),
            Outcome::Append(decision) => match append_decision(&log, &decision) {
                Ok(()) => {
                    q.record(decision.clone());
                    Ok(DecisionAck {
                        appended: true,
                        decision,
                    })
                }
                Err(e) => Err(PostError::Io(e.to_string())),
            },
        };
        drop(q);
        let _ = reply.send(result);
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

#[derive(Deserialize)]
struct BatchQuery {
    annotator: Option<String>,
    size: Option<usize>,
}

async fn get_batch(State(app): State<AppState>, Query(q): Query<BatchQuery>) -> Response {
    let Some(annotator) = q.annotator.filter(|a| !a.is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "missing `annotator` query parameter");
    };
    let batch = app.lock().batch(&annotator, q.size.unwrap_or(DEFAULT_BATCH_SIZE));
    Json(batch).into_response()
}

async fn post_decision(State(app): State<AppState>, body: Bytes) -> Response {
    let req: DecisionRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed decision: {e}")),
    };
    if req.annotator_id.is_empty() {
        return error(StatusCode::BAD_REQUEST, "empty annotator_id");
    }
    let (reply, rx) = oneshot::channel();
    let unknown = format!("unknown candidate `{}` / `{}`", req.sample_id, req.class_name);
    if app.writer.send(WriteRequest { req, reply }).await.is_err() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "log writer stopped");
    }
    match rx.await {
        Ok(Ok(ack)) => Json(ack).into_response(),
        Ok(Err(PostError::Unknown)) => error(StatusCode::NOT_FOUND, unknown),
        Ok(Err(PostError::Io(msg))) => error(StatusCode::INTERNAL_SERVER_ERROR, msg),
        Err(_) => error(StatusCode::SERVICE_UNAVAILABLE, "log writer stopped"),
    }
}

async fn get_progress(State(app): State<AppState>) -> Response {
    Json(app.lock().progress()).into_response()
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("pgm") => "image/x-portable-graymap",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    }
}

async fn get_image(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    let path = {
        let q = app.lock();
        if !q.has_sample(&id) {
            return error(StatusCode::NOT_FOUND, format!("unknown sample `{id}`"));
        }
        q.image_path(&id).cloned()
    };
    let Some(path) = path else {
        return error(StatusCode::NOT_FOUND, format!("no image recorded for `{id}`"));
    };
    let path = if path.exists() {
        path
    } else {
        resolve(&app.candidates, &path)
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(e) => error(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())),
    }
}

async fn not_found() -> Response {
    error(StatusCode::NOT_FOUND, "not found")
}

/// Loads the queue and replays the log. The returned receiver must be handed
/// to [`start_writer`].
fn build(cfg: &ServeConfig) -> Result<Parts, ServeError> {
    let ranked = load_ranked(&cfg.candidates)?;
    let log = read_decision_log(&cfg.log)?;
    let queue = Arc::new(Mutex::new(ReviewState::new(ranked, log, cfg.target)?));
    let (tx, rx) = mpsc::channel(256);
    let app = AppState {
        queue: queue.clone(),
        writer: tx,
        candidates: cfg.candidates.clone(),
    };
    let mut router = Router::new()
        .route("/batch", get(get_batch))
        .route("/decision", post(post_decision))
        .route("/progress", get(get_progress))
        .route("/image/{id}", get(get_image));
    router = match &cfg.static_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router.fallback(not_found),
    };
    Ok((router.with_state(app), queue, rx))
}

fn start_writer(queue: Arc<Mutex<ReviewState>>, log: PathBuf, rx: mpsc::Receiver<WriteRequest>) -> thread::JoinHandle<()> {
    thread::Builder::new()
        .name("reviewd-writer".into())
        .spawn(move || run_writer(queue, log, rx))
        .expect("spawn writer thread")
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    cfg: ServeConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let parts = build(&cfg)?;
    serve_built(listener, parts, cfg.log, shutdown).await
}

type Parts = (Router, Arc<Mutex<ReviewState>>, mpsc::Receiver<WriteRequest>);

async fn serve_built(
    listener: tokio::net::TcpListener,
    (router, queue, rx): Parts,
    log: PathBuf,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let writer = start_writer(queue, log, rx);
    if let Ok(addr) = listener.local_addr() {
        log::info!("reviewd listening on http://{addr}");
    }
    let result = axum::serve(listener, router)
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(ServeError::Runtime);
    // Dropping the router closed the last sender; the writer drains and exits.
    let _ = writer.join();
    result
}

/// A server on its own thread and runtime. Dropping it shuts the server down
/// and waits for pending log writes.
pub struct BackgroundServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<Result<(), ServeError>>>,
}

impl BackgroundServer {
    pub fn start(cfg: ServeConfig, addr: SocketAddr) -> Result<Self, ServeError> {
        let std_listener = std::net::TcpListener::bind(addr).map_err(|source| ServeError::Bind {
            addr: addr.to_string(),
            source,
        })?;
        std_listener.set_nonblocking(true).map_err(ServeError::Runtime)?;
        let addr = std_listener.local_addr().map_err(ServeError::Runtime)?;
        let parts = build(&cfg)?;
        let log = cfg.log;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = thread::Builder::new()
            .name("reviewd".into())
            .spawn(move || {
                let rt = tokio::runtime::Builder::new_multi_thread()
                    .worker_threads(2)
                    .enable_all()
                    .build()
                    .map_err(ServeError::Runtime)?;
                rt.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(std_listener).map_err(ServeError::Runtime)?;
                    serve_built(listener, parts, log, async {
                        let _ = rx.await;
                    })
                    .await
                })
            })
            .map_err(ServeError::Runtime)?;
        Ok(BackgroundServer {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    /// Stops the server and reports how it ended.
    pub fn stop(mut self) -> Result<(), ServeError> {
        self.halt()
    }

    fn halt(&mut self) -> Result<(), ServeError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or(Ok(())),
            None => Ok(()),
        }
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        let _ = self.halt();
    }
}
