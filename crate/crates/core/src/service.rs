//! Hard-label prediction service with per-key query budgets.
//!
//! `POST /v1/predict` answers top-1 labels and charges the caller's budget by
//! the batch size; `GET /v1/budget` reports what is left. A request carrying
//! an `X-Request-Id` already seen for that key is answered again without a
//! second charge. Charges can be appended to a usage log that is replayed on
//! the next start.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::error::{Error, Result};
use crate::nn::{Classifier, TeacherNet};
use crate::oracle::wire::{
    BudgetResponse, ErrorBody, ErrorCode, PredictRequest, PredictResponse, API_KEY_HEADER, MAX_BATCH, REQUEST_ID_HEADER,
};
use crate::oracle::QueryLedger;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub teacher_weights: PathBuf,
    /// API key → query budget.
    pub budgets: HashMap<String, usize>,
    pub usage_log: Option<PathBuf>,
}

struct Seen {
    fingerprint: u64,
}

struct KeyState {
    ledger: QueryLedger,
    seen: HashMap<String, Seen>,
}

struct Ledgers {
    keys: HashMap<String, KeyState>,
    log: Option<File>,
}

struct Shared {
    teacher: TeacherNet,
    ledgers: Mutex<Ledgers>,
}

/// One line of the usage log.
#[derive(Serialize, Deserialize)]
struct UsageRecord {
    key_id: String,
    request_id: Option<String>,
    n: usize,
    fingerprint: u64,
}

/// Keys are not written to disk in the clear.
fn key_id(key: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in key.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn replay_usage(path: &Path, keys: &mut HashMap<String, KeyState>) -> Result<usize> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(e.into()),
    };
    let by_id: HashMap<String, String> = keys.keys().map(|k| (key_id(k), k.clone())).collect();
    let mut replayed = 0;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UsageRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let Some(key) = by_id.get(&rec.key_id) else {
            log::warn!("usage log line {} names an unconfigured key; skipped", lineno + 1);
            continue;
        };
        let state = keys.get_mut(key).expect("key from the same map");
        // A budget lowered since the log was written is exhausted, not an error.
        let n = rec.n.min(state.ledger.remaining());
        state.ledger.charge(n).expect("clamped to remaining");
        if let Some(id) = rec.request_id {
            state.seen.insert(id, Seen { fingerprint: rec.fingerprint });
        }
        replayed += 1;
    }
    Ok(replayed)
}

fn error_response(status: StatusCode, code: ErrorCode, detail: impl Into<String>, remaining: Option<usize>) -> Response {
    let body = ErrorBody {
        error: code,
        detail: Some(detail.into()),
        remaining_budget: remaining,
    };
    (status, Json(body)).into_response()
}

fn api_key(headers: &HeaderMap) -> Option<&str> {
    headers.get(API_KEY_HEADER).and_then(|v| v.to_str().ok())
}

async fn budget(State(shared): State<Arc<Shared>>, headers: HeaderMap) -> Response {
    let ledgers = shared.ledgers.lock().expect("ledger lock");
    match api_key(&headers).and_then(|k| ledgers.keys.get(k)) {
        Some(state) => Json(BudgetResponse {
            remaining_budget: state.ledger.remaining(),
        })
        .into_response(),
        None => error_response(StatusCode::UNAUTHORIZED, ErrorCode::Unauthorized, "unknown api key", None),
    }
}

async fn predict(State(shared): State<Arc<Shared>>, headers: HeaderMap, body: Bytes) -> Response {
    let Some(key) = api_key(&headers).map(str::to_owned) else {
        return error_response(StatusCode::UNAUTHORIZED, ErrorCode::Unauthorized, "missing api key", None);
    };
    if !shared.ledgers.lock().expect("ledger lock").keys.contains_key(&key) {
        return error_response(StatusCode::UNAUTHORIZED, ErrorCode::Unauthorized, "unknown api key", None);
    }
    let request: PredictRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, ErrorCode::BadRequest, e.to_string(), None),
    };
    let expected = shared.teacher.input_shape();
    let s = &request.shape;
    if s.len() != 4 || s[0] == 0 || s[1..] != expected {
        return error_response(
            StatusCode::BAD_REQUEST,
            ErrorCode::BadRequest,
            format!("shape must be [B, {}, {}, {}] with B >= 1, got {s:?}", expected[0], expected[1], expected[2]),
            None,
        );
    }
    let n = s[0];
    if n > MAX_BATCH {
        return error_response(
            StatusCode::PAYLOAD_TOO_LARGE,
            ErrorCode::PayloadTooLarge,
            format!("batch {n} exceeds {MAX_BATCH}"),
            None,
        );
    }
    let images = match request.decode() {
        Ok(t) => t,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, ErrorCode::BadRequest, e.to_string(), None),
    };
    let request_id = headers
        .get(REQUEST_ID_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned);
    let fingerprint = request.fingerprint();

    let remaining = {
        let mut guard = shared.ledgers.lock().expect("ledger lock");
        let ledgers = &mut *guard;
        let state = ledgers.keys.get_mut(&key).expect("checked above");
        let replay = match request_id.as_ref().and_then(|id| state.seen.get(id)) {
            Some(seen) if seen.fingerprint != fingerprint => {
                return error_response(
                    StatusCode::BAD_REQUEST,
                    ErrorCode::BadRequest,
                    "request id reused with a different payload",
                    None,
                );
            }
            Some(_) => true,
            None => false,
        };
        if !replay {
            if let Err(Error::BudgetExhausted { remaining, .. }) = state.ledger.charge(n) {
                return error_response(
                    StatusCode::TOO_MANY_REQUESTS,
                    ErrorCode::BudgetExhausted,
                    format!("batch of {n} exceeds the remaining budget"),
                    Some(remaining),
                );
            }
            if let Some(id) = &request_id {
                state.seen.insert(id.clone(), Seen { fingerprint });
            }
            if let Some(log) = ledgers.log.as_mut() {
                let rec = UsageRecord {
                    key_id: key_id(&key),
                    request_id: request_id.clone(),
                    n,
                    fingerprint,
                };
                let line = serde_json::to_string(&rec).expect("plain record");
                if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
                    log::error!("usage log write failed: {e}");
                }
            }
        }
        state.ledger.remaining()
    };

    let worker = Arc::clone(&shared);
    let labels = tokio::task::spawn_blocking(move || worker.teacher.predict_labels(&images)).await;
    match labels {
        Ok(Ok(labels)) => Json(PredictResponse {
            labels,
            remaining_budget: remaining,
        })
        .into_response(),
        Ok(Err(e)) => error_response(StatusCode::BAD_REQUEST, ErrorCode::BadRequest, e.to_string(), None),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::Internal, e.to_string(), None),
    }
}

/// Builds the router with the teacher loaded and the usage log replayed.
pub fn build_router(config: &ServiceConfig) -> Result<Router> {
    let teacher = Classifier::load(&config.teacher_weights)?;
    router_for(teacher, config)
}

fn router_for(teacher: TeacherNet, config: &ServiceConfig) -> Result<Router> {
    let mut keys: HashMap<String, KeyState> = config
        .budgets
        .iter()
        .map(|(k, &q)| {
            (
                k.clone(),
                KeyState {
                    ledger: QueryLedger::new(q),
                    seen: HashMap::new(),
                },
            )
        })
        .collect();
    let log = match &config.usage_log {
        Some(path) => {
            let n = replay_usage(path, &mut keys)?;
            if n > 0 {
                log::info!("replayed {n} usage records from {}", path.display());
            }
            Some(OpenOptions::new().create(true).append(true).open(path)?)
        }
        None => None,
    };
    let [c, h, w] = teacher.input_shape();
    // Room for an oversized batch so that it gets a JSON 413 from the handler.
    let body_limit = 2 * MAX_BATCH * c * h * w * 4 * 4 / 3 + 4096;
    let shared = Arc::new(Shared {
        teacher,
        ledgers: Mutex::new(Ledgers { keys, log }),
    });
    Ok(Router::new()
        .route("/v1/predict", post(predict))
        .route("/v1/budget", get(budget))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(shared))
}

/// Serves until `shutdown` resolves.
pub async fn serve(config: ServiceConfig, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> Result<()> {
    let app = build_router(&config)?;
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    log::info!("serving hard labels on {}", listener.local_addr()?);
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    Ok(())
}

/// A service running on a background thread; stopped on drop.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Loads the teacher, binds, and serves on a new thread.
pub fn spawn(config: ServiceConfig) -> Result<ServiceHandle> {
    let app = build_router(&config)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(config.bind))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = thread::Builder::new().name("oracle-service".into()).spawn(move || {
        runtime.block_on(async move {
            let stop = async move {
                let _ = rx.await;
            };
            if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(stop).await {
                log::error!("service stopped: {e}");
            }
        });
    })?;
    Ok(ServiceHandle {
        addr,
        stop: Some(tx),
        thread: Some(thread),
    })
}
