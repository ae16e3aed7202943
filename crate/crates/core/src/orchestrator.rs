//! Local-versus-remote routing of generation requests.
//!
//! Rules, first match wins:
//! 1. `privacy = strict` runs locally, or fails with `PrivacyConflict` if the prompt does not fit.
//! 2. A prompt longer than the local limit goes remote.
//! 3. A task class in the policy's remote set goes remote.
//! 4. Everything else runs locally.
//!
//! A remote verdict falls back to local (marked `degraded`) when the server is
//! unreachable, fallback is allowed and the prompt fits; otherwise `NoViableRoute`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::Adapter;
use crate::model::{GenerationParams, Model, ModelConfig, ModelError};
use crate::protocol::{ErrorReply, GenerateBody, GenerateReply, HealthReply};
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskClass {
    Chat,
    Translate,
    Summarize,
    Qa,
    Other,
}

impl TaskClass {
    pub const ALL: [TaskClass; 5] =
        [TaskClass::Chat, TaskClass::Translate, TaskClass::Summarize, TaskClass::Qa, TaskClass::Other];
}

impl std::str::FromStr for TaskClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| format!("unknown task class {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Privacy {
    Strict,
    #[default]
    Default,
}

impl std::str::FromStr for Privacy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "strict" => Ok(Privacy::Strict),
            "default" => Ok(Privacy::Default),
            _ => Err(format!("unknown privacy level {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prompt {
    Text(String),
    Tokens(Vec<TokenId>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: Prompt,
    #[serde(default)]
    pub params: GenerationParams,
    pub task_class: TaskClass,
    #[serde(default)]
    pub privacy: Privacy,
    #[serde(default)]
    pub adapter_name: Option<String>,
    #[serde(default)]
    pub deadline_ms: Option<u64>,
}

impl GenerationRequest {
    pub fn text(prompt: impl Into<String>, task_class: TaskClass, params: GenerationParams) -> Self {
        GenerationRequest {
            prompt: Prompt::Text(prompt.into()),
            params,
            task_class,
            privacy: Privacy::Default,
            adapter_name: None,
            deadline_ms: None,
        }
    }

    pub fn tokens(ids: Vec<TokenId>, task_class: TaskClass, params: GenerationParams) -> Self {
        GenerationRequest { prompt: Prompt::Tokens(ids), ..Self::text("", task_class, params) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingPolicy {
    /// `None` means `max_seq_len - max_new_tokens` of the local model.
    pub local_max_prompt_tokens: Option<usize>,
    pub remote_task_classes: BTreeSet<TaskClass>,
    pub allow_fallback: bool,
    pub health_ttl_ms: u64,
}

impl Default for RoutingPolicy {
    fn default() -> Self {
        RoutingPolicy {
            local_max_prompt_tokens: None,
            remote_task_classes: [TaskClass::Translate, TaskClass::Summarize].into_iter().collect(),
            allow_fallback: true,
            health_ttl_ms: 5_000,
        }
    }
}

impl RoutingPolicy {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, OrchestratorError> {
        let text = fs::read_to_string(path).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        let policy: RoutingPolicy =
            serde_json::from_str(&text).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        Ok(policy)
    }

    /// Largest prompt the local engine accepts for a request with `max_new_tokens`.
    pub fn local_limit(&self, local: &ModelConfig, max_new_tokens: usize) -> usize {
        let room = local.max_seq_len.saturating_sub(max_new_tokens);
        self.local_max_prompt_tokens.map_or(room, |l| l.min(room))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub route: Route,
    /// Names of the rules that fired, in order.
    pub reasons: Vec<String>,
    pub degraded: bool,
}

pub mod reason {
    pub const PRIVACY: &str = "privacy";
    pub const PROMPT_LENGTH: &str = "prompt_length";
    pub const TASK_CLASS: &str = "task_class";
    pub const DEFAULT_LOCAL: &str = "default_local";
    pub const FALLBACK: &str = "server_unavailable_fallback";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerHealth {
    pub reachable: bool,
    pub model_id: String,
    /// Milliseconds since the Unix epoch.
    pub probed_at_ms: u64,
    pub queue_depth: usize,
}

impl ServerHealth {
    pub fn unreachable(now_ms: u64) -> Self {
        ServerHealth { reachable: false, model_id: String::new(), probed_at_ms: now_ms, queue_depth: 0 }
    }

    /// Reachable and probed within `ttl_ms` of `now_ms`.
    pub fn is_usable(&self, now_ms: u64, ttl_ms: u64) -> bool {
        self.reachable && now_ms.saturating_sub(self.probed_at_ms) <= ttl_ms
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("no viable route: {0}")]
    NoViableRoute(String),
    #[error("privacy=strict but the prompt needs {prompt_tokens} tokens and the local limit is {limit}")]
    PrivacyConflict { prompt_tokens: usize, limit: usize },
}

/// Pure routing decision; `now_ms` is only used to judge health staleness.
pub fn decide_route(
    req: &GenerationRequest,
    prompt_tokens: usize,
    policy: &RoutingPolicy,
    local_config: &ModelConfig,
    health: &ServerHealth,
    now_ms: u64,
) -> Result<RouteDecision, RouteError> {
    let limit = policy.local_limit(local_config, req.params.max_new_tokens);
    let fits = prompt_tokens <= limit;
    if req.privacy == Privacy::Strict {
        if !fits {
            return Err(RouteError::PrivacyConflict { prompt_tokens, limit });
        }
        return Ok(RouteDecision { route: Route::Local, reasons: vec![reason::PRIVACY.into()], degraded: false });
    }
    let remote_reason = if !fits {
        reason::PROMPT_LENGTH
    } else if policy.remote_task_classes.contains(&req.task_class) {
        reason::TASK_CLASS
    } else {
        return Ok(RouteDecision { route: Route::Local, reasons: vec![reason::DEFAULT_LOCAL.into()], degraded: false });
    };
    if health.is_usable(now_ms, policy.health_ttl_ms) {
        return Ok(RouteDecision { route: Route::Remote, reasons: vec![remote_reason.into()], degraded: false });
    }
    if policy.allow_fallback && fits {
        return Ok(RouteDecision {
            route: Route::Local,
            reasons: vec![remote_reason.into(), reason::FALLBACK.into()],
            degraded: true,
        });
    }
    Err(RouteError::NoViableRoute(if fits {
        "server unavailable and fallback disabled".into()
    } else {
        format!("prompt of {prompt_tokens} tokens exceeds local limit {limit} and the server is unavailable")
    }))
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RemoteError {
    /// Connection failures, timeouts and 503s. Eligible for local fallback.
    #[error("remote unavailable: {0}")]
    Unavailable(String),
    #[error("remote returned {status} {code}: {detail}")]
    Protocol { status: u16, code: String, detail: String },
}

/// Client side of the generation server's HTTP API.
pub trait RemoteEngine: Send + Sync {
    fn endpoint(&self) -> &str;
    fn health(&self) -> Result<HealthReply, RemoteError>;
    fn generate(&self, body: &GenerateBody) -> Result<GenerateReply, RemoteError>;
}

pub struct HttpRemote {
    base: String,
    agent: ureq::Agent,
}

impl HttpRemote {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            // A pooled connection to a server that has since stopped would hang
            // until the timeout instead of failing fast.
            .max_idle_connections(0)
            .build()
            .into();
        HttpRemote { base: endpoint.trim_end_matches('/').to_string(), agent }
    }

    fn decode<T: serde::de::DeserializeOwned>(resp: ureq::http::Response<ureq::Body>) -> Result<T, RemoteError> {
        let status = resp.status().as_u16();
        let mut body = resp.into_body();
        let text = body
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_to_string()
            .map_err(|e| RemoteError::Unavailable(e.to_string()))?;
        if status == 503 {
            return Err(RemoteError::Unavailable(text));
        }
        if !(200..300).contains(&status) {
            let err: ErrorReply =
                serde_json::from_str(&text).unwrap_or(ErrorReply { error: "http_error".into(), detail: text });
            return Err(RemoteError::Protocol { status, code: err.error, detail: err.detail });
        }
        serde_json::from_str(&text).map_err(|e| RemoteError::Protocol {
            status,
            code: "bad_json".into(),
            detail: e.to_string(),
        })
    }

    pub fn post_json<T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: &impl Serialize,
    ) -> Result<T, RemoteError> {
        let resp = self
            .agent
            .post(&format!("{}{path}", self.base))
            .send_json(body)
            .map_err(|e| RemoteError::Unavailable(e.to_string()))?;
        Self::decode(resp)
    }

    pub fn get_json<T: serde::de::DeserializeOwned>(&self, path: &str) -> Result<T, RemoteError> {
        let resp = self
            .agent
            .get(&format!("{}{path}", self.base))
            .call()
            .map_err(|e| RemoteError::Unavailable(e.to_string()))?;
        Self::decode(resp)
    }
}

impl RemoteEngine for HttpRemote {
    fn endpoint(&self) -> &str {
        &self.base
    }

    fn health(&self) -> Result<HealthReply, RemoteError> {
        self.get_json("/v1/health")
    }

    fn generate(&self, body: &GenerateBody) -> Result<GenerateReply, RemoteError> {
        self.post_json("/v1/generate", body)
    }
}

fn health_from(reply: Result<HealthReply, RemoteError>, now: u64) -> ServerHealth {
    match reply {
        Ok(h) if h.status == "ok" => {
            ServerHealth { reachable: true, model_id: h.model_id, probed_at_ms: now, queue_depth: h.queue_depth }
        }
        _ => ServerHealth::unreachable(now),
    }
}

/// `GET /v1/health` with a short timeout. Failures are reported as unreachable.
pub fn probe_server(endpoint: &str) -> ServerHealth {
    let remote = HttpRemote::new(endpoint, Duration::from_secs(2));
    health_from(remote.health(), now_ms())
}

/// Last probe result, reused until it is older than the TTL. Readers always
/// see a whole snapshot.
#[derive(Debug, Default)]
pub struct HealthCache {
    snapshot: Mutex<Option<ServerHealth>>,
}

impl HealthCache {
    pub fn get_or_probe(&self, now: u64, ttl_ms: u64, probe: impl FnOnce() -> ServerHealth) -> ServerHealth {
        let mut slot = self.snapshot.lock().unwrap();
        if let Some(h) = slot.as_ref() {
            if now.saturating_sub(h.probed_at_ms) <= ttl_ms {
                return h.clone();
            }
        }
        let fresh = probe();
        *slot = Some(fresh.clone());
        fresh
    }

    pub fn invalidate(&self) {
        *self.snapshot.lock().unwrap() = None;
    }

    pub fn current(&self) -> Option<ServerHealth> {
        self.snapshot.lock().unwrap().clone()
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error("remote protocol error: {0}")]
    RemoteProtocol(RemoteError),
    #[error("local engine error: {0}")]
    LocalEngine(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("policy config: {0}")]
    Config(String),
}

impl From<ModelError> for OrchestratorError {
    fn from(e: ModelError) -> Self {
        OrchestratorError::LocalEngine(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub model_id: String,
    pub route: Route,
    pub degraded: bool,
    pub reasons: Vec<String>,
    pub prompt_tokens: usize,
    pub timing_ms: f64,
}

/// The on-device side: a model, its tokenizer and any locally available adapters.
pub struct LocalEngine {
    pub model: Model,
    pub tokenizer: Arc<Tokenizer>,
    pub adapters: HashMap<String, Arc<Adapter>>,
}

impl LocalEngine {
    pub fn new(model: Model, tokenizer: Arc<Tokenizer>) -> Self {
        LocalEngine { model, tokenizer, adapters: HashMap::new() }
    }

    fn run(&self, ids: &[TokenId], req: &GenerationRequest) -> Result<Vec<TokenId>, OrchestratorError> {
        let mut model = self.model.clone();
        if let Some(name) = &req.adapter_name {
            let adapter = self
                .adapters
                .get(name)
                .ok_or_else(|| OrchestratorError::LocalEngine(format!("adapter {name:?} not available locally")))?;
            model.attach(adapter.clone()).map_err(|e| OrchestratorError::LocalEngine(e.to_string()))?;
        }
        Ok(model.generate(ids, &req.params)?)
    }
}

pub struct Orchestrator {
    local: LocalEngine,
    remote: Option<Box<dyn RemoteEngine>>,
    policy: RoutingPolicy,
    health: HealthCache,
}

impl Orchestrator {
    pub fn new(local: LocalEngine, remote: Option<Box<dyn RemoteEngine>>, policy: RoutingPolicy) -> Self {
        Orchestrator { local, remote, policy, health: HealthCache::default() }
    }

    pub fn policy(&self) -> &RoutingPolicy {
        &self.policy
    }

    pub fn local(&self) -> &LocalEngine {
        &self.local
    }

    pub fn tokenize(&self, req: &GenerationRequest) -> Result<Vec<TokenId>, OrchestratorError> {
        let ids = match &req.prompt {
            Prompt::Text(t) => self.local.tokenizer.encode(t),
            Prompt::Tokens(ids) => ids.clone(),
        };
        if ids.is_empty() {
            return Err(OrchestratorError::InvalidRequest("prompt is empty".into()));
        }
        Ok(ids)
    }

    /// Cached server health; without a remote endpoint the server is unreachable.
    pub fn server_health(&self, now: u64) -> ServerHealth {
        match &self.remote {
            None => ServerHealth::unreachable(now),
            Some(remote) => {
                self.health.get_or_probe(now, self.policy.health_ttl_ms, || health_from(remote.health(), now))
            }
        }
    }

    /// Routing verdict for `req` without running it.
    pub fn explain(&self, req: &GenerationRequest) -> Result<(RouteDecision, usize), OrchestratorError> {
        let ids = self.tokenize(req)?;
        let now = now_ms();
        let health = self.server_health(now);
        let d = decide_route(req, ids.len(), &self.policy, self.local.model.config(), &health, now)?;
        Ok((d, ids.len()))
    }

    pub fn execute(&self, req: &GenerationRequest) -> Result<GenerationResponse, OrchestratorError> {
        let started = Instant::now();
        let ids = self.tokenize(req)?;
        let now = now_ms();
        let health = self.server_health(now);
        let local_cfg = self.local.model.config();
        let decision = decide_route(req, ids.len(), &self.policy, local_cfg, &health, now)?;

        let respond = |tokens: Vec<TokenId>, model_id: String, route: Route, degraded: bool, reasons: Vec<String>| {
            let text = self.local.tokenizer.decode(&tokens).unwrap_or_default();
            GenerationResponse {
                tokens,
                text,
                model_id,
                route,
                degraded,
                reasons,
                prompt_tokens: ids.len(),
                timing_ms: started.elapsed().as_secs_f64() * 1000.0,
            }
        };

        if decision.route == Route::Local {
            let tokens = self.local.run(&ids, req)?;
            return Ok(respond(
                tokens,
                self.local.model.model_id().to_string(),
                Route::Local,
                decision.degraded,
                decision.reasons,
            ));
        }

        let remote = self.remote.as_ref().expect("remote verdict implies a configured endpoint");
        let body = GenerateBody::from_tokens(ids.clone(), &req.params, req.adapter_name.clone());
        match remote.generate(&body) {
            Ok(reply) => Ok(respond(reply.tokens, reply.model_id, Route::Remote, false, decision.reasons)),
            Err(RemoteError::Unavailable(detail)) => {
                self.health.invalidate();
                let fits = ids.len() <= self.policy.local_limit(local_cfg, req.params.max_new_tokens);
                if !(self.policy.allow_fallback && fits) {
                    return Err(
                        RouteError::NoViableRoute(format!("remote failed ({detail}) and no local fallback")).into()
                    );
                }
                log::warn!("remote generation failed ({detail}); retrying locally");
                let tokens = self.local.run(&ids, req)?;
                let mut reasons = decision.reasons;
                reasons.push(reason::FALLBACK.into());
                Ok(respond(tokens, self.local.model.model_id().to_string(), Route::Local, true, reasons))
            }
            Err(e) => Err(OrchestratorError::RemoteProtocol(e)),
        }
    }
}
