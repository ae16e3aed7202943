use std::sync::Arc;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use unilm::adapter::{init_adapter, AdapterConfig};
use unilm::orchestrator::{
    probe_server, GenerationRequest, HttpRemote, LocalEngine, Orchestrator, RemoteEngine, Route, RoutingPolicy,
    TaskClass,
};
use unilm::protocol::GenerateBody;
use unilm::server::{serve, ServerConfig, ServerHandle, ServerState};
use unilm::{Checkpoint, GenerationParams, Model, ModelConfig, Tokenizer};

fn start(seed: u64, cfg: ServerConfig) -> (ServerHandle, Arc<Checkpoint>) {
    let ckpt = Arc::new(Checkpoint::init_random(ModelConfig::toy(), seed).unwrap());
    let state = ServerState::new(Model::new(ckpt.clone()), Tokenizer::byte_level(&[]), cfg);
    (serve(state).unwrap(), ckpt)
}

fn local_cfg() -> ServerConfig {
    ServerConfig { addr: "127.0.0.1:0".into(), workers: 2, ..ServerConfig::default() }
}

fn client(h: &ServerHandle) -> HttpRemote {
    HttpRemote::new(&h.url(), Duration::from_secs(10))
}

fn post(h: &ServerHandle, path: &str, body: &Value) -> (u16, Value) {
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let mut resp = agent.post(&format!("{}{path}", h.url())).send_json(body).unwrap();
    let status = resp.status().as_u16();
    (status, resp.body_mut().read_json().unwrap())
}

#[test]
fn health_models_and_generate() {
    let (h, ckpt) = start(1, local_cfg());
    let health = probe_server(&h.url());
    assert!(health.reachable);
    assert_eq!(health.model_id, ckpt.model_id());
    assert_eq!(health.queue_depth, 0);

    let c = client(&h);
    let reply = c.generate(&GenerateBody { prompt: Some("abc".into()), max_new_tokens: Some(0), ..Default::default() });
    assert_eq!(reply.unwrap().tokens, Vec::<u32>::new());

    let body = json!({"tokens": [1, 2, 3], "max_new_tokens": 5});
    let (s1, a) = post(&h, "/v1/generate", &body);
    let (s2, b) = post(&h, "/v1/generate", &body);
    assert_eq!((s1, s2), (200, 200));
    assert_eq!(a, b);
    assert_eq!(a["usage"]["completion_tokens"], 5);

    let (s, e) = post(&h, "/v1/generate", &json!({"prompt": "a", "adapter": "missing"}));
    assert_eq!((s, e["error"].as_str()), (404, Some("adapter_not_found")));
    let (s, _) = post(&h, "/v1/generate", &json!({"nonsense": true}));
    assert_eq!(s, 400);
    let (s, e) = post(&h, "/v1/generate", &json!({"tokens": [1], "max_new_tokens": 1000}));
    assert_eq!((s, e["error"].as_str()), (422, Some("context_overflow")));

    let models: Value = c.get_json("/v1/models").unwrap();
    assert_eq!(models["models"][0]["id"], "toy");
    h.shutdown();
}

#[test]
fn adapter_hot_loading() {
    let (h, ckpt) = start(2, local_cfg());
    let cfg = ckpt.config().clone();
    let b64 = |a: &unilm::Adapter| base64::engine::general_purpose::STANDARD.encode(a.to_bytes());

    let zero = init_adapter(&cfg, &AdapterConfig::new("zero", 4), 1).unwrap();
    let (s, r) = post(&h, "/v1/adapters", &json!({"name": "zero", "payload": b64(&zero)}));
    assert_eq!((s, r["status"].as_str()), (200, Some("loaded")));
    let (_, r) = post(&h, "/v1/adapters", &json!({"name": "zero", "payload": b64(&zero)}));
    assert_eq!(r["status"], "unchanged");

    let mut legal = init_adapter(&cfg, &AdapterConfig::new("ms-legal", 4), 2).unwrap();
    legal.randomize_b(1.0, 3);
    let dir = tempfile::TempDir::new().unwrap();
    let path = dir.path().join("legal.unla");
    legal.save(&path).unwrap();
    let (s, _) = post(&h, "/v1/adapters", &json!({"name": "ms-legal", "path": path.to_string_lossy()}));
    assert_eq!(s, 200);

    let models: Value = client(&h).get_json("/v1/models").unwrap();
    let ids: Vec<&str> = models["models"].as_array().unwrap().iter().map(|m| m["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["toy", "ms-legal", "zero"]);

    let mut differs = false;
    for i in 0..20u32 {
        let toks = vec![i, (i * 31) % 256, (i * 17 + 5) % 256];
        let (_, base) = post(&h, "/v1/generate", &json!({"tokens": toks, "max_new_tokens": 6}));
        let (_, z) = post(&h, "/v1/generate", &json!({"tokens": toks, "max_new_tokens": 6, "adapter": "zero"}));
        let (_, l) = post(&h, "/v1/generate", &json!({"tokens": toks, "max_new_tokens": 6, "adapter": "ms-legal"}));
        assert_eq!(base["tokens"], z["tokens"]);
        differs |= base["tokens"] != l["tokens"];
    }
    assert!(differs, "non-zero adapter never changed a decode");

    let other = ModelConfig { hidden_size: 32, intermediate_size: 88, ..ModelConfig::toy() };
    let bad = init_adapter(&other, &AdapterConfig::new("bad", 2), 1).unwrap();
    let (s, e) = post(&h, "/v1/adapters", &json!({"name": "bad", "payload": b64(&bad)}));
    assert_eq!((s, e["error"].as_str()), (400, Some("config_mismatch")));

    // the checkpoint is untouched by serving
    let before = ckpt.fingerprint();
    assert_eq!(h.state().model().checkpoint().fingerprint(), before);
    h.shutdown();
}

#[test]
fn oversized_adapter_is_rejected() {
    let cfg = ServerConfig { max_adapter_bytes: 1024, ..local_cfg() };
    let (h, ckpt) = start(3, cfg);
    let a = init_adapter(ckpt.config(), &AdapterConfig::new("big", 8), 1).unwrap();
    let payload = base64::engine::general_purpose::STANDARD.encode(a.to_bytes());
    let (s, e) = post(&h, "/v1/adapters", &json!({"name": "big", "payload": payload}));
    assert_eq!((s, e["error"].as_str()), (413, Some("payload_too_large")));
    h.shutdown();
}

#[test]
fn concurrent_requests_and_checkpoint_integrity() {
    let (h, ckpt) = start(4, local_cfg());
    let before = ckpt.fingerprint();
    let url = h.url();
    let expected = Model::new(ckpt.clone()).generate(&[9, 8, 7], &GenerationParams::greedy(10)).unwrap();
    let workers: Vec<_> = (0..8)
        .map(|_| {
            let url = url.clone();
            std::thread::spawn(move || {
                let c = HttpRemote::new(&url, Duration::from_secs(30));
                (0..5)
                    .map(|_| {
                        c.generate(&GenerateBody::from_tokens(vec![9, 8, 7], &GenerationParams::greedy(10), None))
                            .unwrap()
                            .tokens
                    })
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    // health answers while generation is in flight
    for _ in 0..5 {
        assert!(probe_server(&url).reachable);
    }
    for w in workers {
        for tokens in w.join().unwrap() {
            assert_eq!(tokens, expected);
        }
    }
    assert_eq!(ckpt.fingerprint(), before);
    assert_eq!(h.state().request_count(), 40);
    h.shutdown();
}

#[test]
fn orchestrator_falls_back_when_server_stops() {
    let (h, ckpt) = start(5, local_cfg());
    let policy = RoutingPolicy { health_ttl_ms: 0, ..RoutingPolicy::default() };
    let orch = Orchestrator::new(
        LocalEngine::new(Model::new(ckpt.clone()), Arc::new(Tokenizer::byte_level(&[]))),
        Some(Box::new(client(&h))),
        policy,
    );
    let req = GenerationRequest::text("terjemah ini", TaskClass::Translate, GenerationParams::greedy(4));
    let remote = orch.execute(&req).unwrap();
    assert_eq!((remote.route, remote.degraded), (Route::Remote, false));
    h.shutdown();
    let local = orch.execute(&req).unwrap();
    assert_eq!((local.route, local.degraded), (Route::Local, true));
    assert_eq!(local.tokens, remote.tokens);
}
