//! HTTP/JSON generation service with adapter hot-loading.
//!
//! Two acceptor threads read requests. Health, model listing and adapter loads
//! are answered on the acceptor; generation jobs go through a bounded queue to
//! a fixed pool of workers, so a full queue answers 503 and health never waits
//! behind generation.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, TrySendError};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Instant;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::{Adapter, AdapterError};
use crate::model::{Model, ModelError};
use crate::protocol::{
    ErrorReply, GenerateBody, GenerateReply, HealthReply, LoadAdapterBody, LoadAdapterReply, ModelEntry, ModelsReply,
    Usage,
};
use crate::tokenizer::Tokenizer;

pub const DEFAULT_MAX_ADAPTER_BYTES: u64 = 128 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub addr: String,
    pub workers: usize,
    pub max_queue: usize,
    pub max_adapter_bytes: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            addr: "127.0.0.1:8080".into(),
            workers: std::thread::available_parallelism().map_or(2, |n| n.get().min(8)),
            max_queue: 64,
            max_adapter_bytes: DEFAULT_MAX_ADAPTER_BYTES,
        }
    }
}

impl ServerConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }
}

/// Status code plus JSON body.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub status: u16,
    pub body: Value,
}

impl Reply {
    fn ok(body: impl Serialize) -> Self {
        Reply { status: 200, body: serde_json::to_value(body).expect("reply serializes") }
    }

    fn error(status: u16, code: &str, detail: impl Into<String>) -> Self {
        let e = ErrorReply { error: code.into(), detail: detail.into() };
        Reply { status, body: serde_json::to_value(e).expect("reply serializes") }
    }

    pub fn error_code(&self) -> Option<&str> {
        self.body.get("error").and_then(Value::as_str)
    }
}

struct RegisteredAdapter {
    adapter: Arc<Adapter>,
    raw: Vec<u8>,
}

pub struct ServerState {
    model: Model,
    tokenizer: Tokenizer,
    adapters: RwLock<HashMap<String, RegisteredAdapter>>,
    started: Instant,
    requests: AtomicU64,
    queued: AtomicUsize,
    config: ServerConfig,
}

impl ServerState {
    pub fn new(model: Model, tokenizer: Tokenizer, config: ServerConfig) -> Self {
        ServerState {
            model,
            tokenizer,
            adapters: RwLock::new(HashMap::new()),
            started: Instant::now(),
            requests: AtomicU64::new(0),
            queued: AtomicUsize::new(0),
            config,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn adapter_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.adapters.read().unwrap().keys().cloned().collect();
        names.sort();
        names
    }

    pub fn handle_generate(&self, body: &[u8]) -> Reply {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let req: GenerateBody = match serde_json::from_slice(body) {
            Ok(r) => r,
            Err(e) => return Reply::error(400, "malformed", e.to_string()),
        };
        let ids = match (&req.tokens, &req.prompt) {
            (Some(t), _) => t.clone(),
            (None, Some(p)) => self.tokenizer.encode(p),
            (None, None) => return Reply::error(400, "malformed", "body needs `prompt` or `tokens`"),
        };
        let params = req.params();
        if params.temperature < 0.0 || !params.temperature.is_finite() {
            return Reply::error(400, "malformed", "temperature must be finite and >= 0");
        }
        let mut model = self.model.clone();
        if let Some(name) = &req.adapter {
            let adapter = match self.adapters.read().unwrap().get(name) {
                Some(r) => r.adapter.clone(),
                None => return Reply::error(404, "adapter_not_found", format!("no adapter named {name:?}")),
            };
            if let Err(e) = model.attach(adapter) {
                return Reply::error(500, "internal", e.to_string());
            }
        }
        let out = model.generate(&ids, &params);
        drop(model);
        match out {
            Ok(tokens) => {
                let text = self.tokenizer.decode(&tokens).unwrap_or_default();
                Reply::ok(GenerateReply {
                    usage: Usage { prompt_tokens: ids.len(), completion_tokens: tokens.len() },
                    tokens,
                    text,
                    model_id: self.model.model_id().to_string(),
                })
            }
            Err(e @ ModelError::ContextOverflow { .. }) => Reply::error(422, "context_overflow", e.to_string()),
            Err(e) => Reply::error(400, "invalid_input", e.to_string()),
        }
    }

    pub fn handle_load_adapter(&self, body: &[u8]) -> Reply {
        let req: LoadAdapterBody = match serde_json::from_slice(body) {
            Ok(r) => r,
            Err(e) => return Reply::error(400, "malformed", e.to_string()),
        };
        let cap = self.config.max_adapter_bytes;
        let raw = match (&req.payload, &req.path) {
            (Some(b64), None) => {
                if b64.len() as u64 / 4 * 3 > cap {
                    return Reply::error(413, "payload_too_large", format!("adapter exceeds {cap} bytes"));
                }
                match base64::engine::general_purpose::STANDARD.decode(b64) {
                    Ok(raw) => raw,
                    Err(e) => return Reply::error(400, "malformed", format!("payload is not base64: {e}")),
                }
            }
            (None, Some(path)) => {
                match fs::metadata(path) {
                    Ok(m) if m.len() > cap => {
                        return Reply::error(413, "payload_too_large", format!("adapter exceeds {cap} bytes"))
                    }
                    Ok(_) => {}
                    Err(e) => return Reply::error(400, "malformed", format!("{path}: {e}")),
                }
                match fs::read(path) {
                    Ok(raw) => raw,
                    Err(e) => return Reply::error(400, "malformed", format!("{path}: {e}")),
                }
            }
            _ => return Reply::error(400, "malformed", "exactly one of `payload` or `path` is required"),
        };
        if raw.len() as u64 > cap {
            return Reply::error(413, "payload_too_large", format!("adapter exceeds {cap} bytes"));
        }
        let mut adapter = match Adapter::from_bytes(&raw, Some(self.model.config())) {
            Ok(a) => a,
            Err(e @ AdapterError::ConfigMismatch(_)) => return Reply::error(400, "config_mismatch", e.to_string()),
            Err(e) => return Reply::error(400, "malformed", e.to_string()),
        };
        adapter.rename(req.name.clone());
        let size_bytes = raw.len() as u64;

        let mut registry = self.adapters.write().unwrap();
        let status = match registry.get(&req.name) {
            Some(existing) if existing.raw == raw => "unchanged",
            // Requests hold their own clone of the Arc while generating.
            Some(existing) if Arc::strong_count(&existing.adapter) > 1 => {
                return Reply::error(409, "adapter_active", format!("adapter {:?} is serving requests", req.name))
            }
            Some(_) => "replaced",
            None => "loaded",
        };
        if status != "unchanged" {
            registry.insert(req.name.clone(), RegisteredAdapter { adapter: Arc::new(adapter), raw });
        }
        log::info!("adapter {:?} {status} ({size_bytes} bytes)", req.name);
        Reply::ok(LoadAdapterReply { name: req.name, status: status.into(), size_bytes })
    }

    pub fn handle_health(&self) -> Reply {
        Reply::ok(HealthReply {
            status: "ok".into(),
            model_id: self.model.model_id().to_string(),
            uptime_s: self.started.elapsed().as_secs_f64(),
            queue_depth: self.queued.load(Ordering::SeqCst),
        })
    }

    pub fn handle_models(&self) -> Reply {
        let mut models = vec![ModelEntry { id: self.model.model_id().to_string(), kind: "base".into(), rank: None }];
        let registry = self.adapters.read().unwrap();
        let mut names: Vec<_> = registry.keys().collect();
        names.sort();
        for name in names {
            let rank = registry[name].adapter.config().rank;
            models.push(ModelEntry { id: name.clone(), kind: "adapter".into(), rank: Some(rank) });
        }
        Reply::ok(ModelsReply { models })
    }

    /// Dispatch for everything except queued generation.
    pub fn route(&self, method: &str, path: &str, body: &[u8]) -> Reply {
        match (method, path) {
            ("POST", "/v1/generate") => self.handle_generate(body),
            ("POST", "/v1/adapters") => self.handle_load_adapter(body),
            ("GET", "/v1/health") => self.handle_health(),
            ("GET", "/v1/models") => self.handle_models(),
            (_, "/v1/generate" | "/v1/adapters" | "/v1/health" | "/v1/models") => {
                Reply::error(405, "method_not_allowed", format!("{method} {path}"))
            }
            _ => Reply::error(404, "not_found", format!("{method} {path}")),
        }
    }
}

fn respond(req: tiny_http::Request, reply: Reply) {
    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    let resp =
        tiny_http::Response::from_string(reply.body.to_string()).with_status_code(reply.status).with_header(header);
    if let Err(e) = req.respond(resp) {
        log::debug!("client went away: {e}");
    }
}

fn read_body(req: &mut tiny_http::Request, limit: u64) -> Result<Vec<u8>, Reply> {
    if req.body_length().is_some_and(|n| n as u64 > limit) {
        return Err(Reply::error(413, "payload_too_large", format!("body exceeds {limit} bytes")));
    }
    let mut body = Vec::new();
    req.as_reader()
        .take(limit + 1)
        .read_to_end(&mut body)
        .map_err(|e| Reply::error(400, "malformed", e.to_string()))?;
    if body.len() as u64 > limit {
        return Err(Reply::error(413, "payload_too_large", format!("body exceeds {limit} bytes")));
    }
    Ok(body)
}

struct Job {
    req: tiny_http::Request,
    body: Vec<u8>,
}

const ACCEPTORS: usize = 2;

pub struct ServerHandle {
    addr: SocketAddr,
    http: Arc<tiny_http::Server>,
    state: Arc<ServerState>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &Arc<ServerState> {
        &self.state
    }

    /// Block until the server stops (it only stops via `shutdown`).
    pub fn join(self) {
        for t in self.threads {
            let _ = t.join();
        }
    }

    pub fn shutdown(self) {
        for _ in 0..ACCEPTORS {
            self.http.unblock();
        }
        self.join();
    }
}

/// Bind and start serving in background threads.
pub fn serve(state: ServerState) -> Result<ServerHandle, String> {
    let state = Arc::new(state);
    let http = Arc::new(tiny_http::Server::http(&state.config.addr).map_err(|e| e.to_string())?);
    let addr = http.server_addr().to_ip().ok_or_else(|| "server is not bound to an IP address".to_string())?;
    let (tx, rx) = sync_channel::<Job>(state.config.max_queue.max(1));
    let rx = Arc::new(Mutex::new(rx));
    let body_limit = state.config.max_adapter_bytes / 3 * 4 + 64 * 1024;

    let mut threads = Vec::new();
    for i in 0..state.config.workers.max(1) {
        let (state, rx) = (state.clone(), rx.clone());
        threads.push(
            std::thread::Builder::new()
                .name(format!("unilm-worker-{i}"))
                .spawn(move || worker(state, rx))
                .map_err(|e| e.to_string())?,
        );
    }
    for i in 0..ACCEPTORS {
        let (state, http, tx) = (state.clone(), http.clone(), tx.clone());
        let acceptor = move || {
            while let Ok(mut req) = http.recv() {
                let method = req.method().as_str().to_ascii_uppercase();
                let path = req.url().split('?').next().unwrap_or("").to_string();
                let body = match read_body(&mut req, body_limit) {
                    Ok(b) => b,
                    Err(reply) => {
                        respond(req, reply);
                        continue;
                    }
                };
                if method == "POST" && path == "/v1/generate" {
                    state.queued.fetch_add(1, Ordering::SeqCst);
                    match tx.try_send(Job { req, body }) {
                        Ok(()) => {}
                        Err(TrySendError::Full(job)) | Err(TrySendError::Disconnected(job)) => {
                            state.queued.fetch_sub(1, Ordering::SeqCst);
                            respond(job.req, Reply::error(503, "overloaded", "generation queue is full"));
                        }
                    }
                } else {
                    let reply = state.route(&method, &path, &body);
                    respond(req, reply);
                }
            }
        };
        threads.push(
            std::thread::Builder::new().name(format!("unilm-accept-{i}")).spawn(acceptor).map_err(|e| e.to_string())?,
        );
    }
    drop(tx);
    log::info!("serving {} on {addr}", state.model.model_id());
    Ok(ServerHandle { addr, http, state, threads })
}

fn worker(state: Arc<ServerState>, rx: Arc<Mutex<Receiver<Job>>>) {
    loop {
        let job = match rx.lock().unwrap().recv() {
            Ok(j) => j,
            Err(_) => return,
        };
        state.queued.fetch_sub(1, Ordering::SeqCst);
        let reply = state.handle_generate(&job.body);
        respond(job.req, reply);
    }
}
