//! Python bindings: tokenizer, checkpoints, inference, palettization, adapters,
//! routing and the HTTP server.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyModule;

use unilm_core::adapter::{self as adapter_mod, AdapterConfig, Projection};
use unilm_core::model::{self as model_mod, EmbeddingInit, ModelConfig, Preset};
use unilm_core::orchestrator::{
    self as orch, GenerationRequest, Privacy, Prompt, RoutingPolicy, ServerHealth, TaskClass,
};
use unilm_core::quant;
use unilm_core::server::{self as server_mod, ServerConfig, ServerState};
use unilm_core::tokenizer::{self as tok_mod, TokenId};
use unilm_core::GenerationParams;

create_exception!(unilm, UnilmError, PyException, "Raised for any failure inside unilm.");

fn err(e: impl std::fmt::Display) -> PyErr {
    UnilmError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    PyModule::import(py, "json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = PyModule::import(obj.py(), "json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

fn config_arg(obj: &Bound<'_, PyAny>) -> PyResult<ModelConfig> {
    if let Ok(name) = obj.extract::<String>() {
        let p: Preset = name.parse().map_err(err)?;
        return Ok(ModelConfig::preset(p));
    }
    from_py(obj)
}

#[pyclass(name = "Tokenizer", module = "unilm")]
struct PyTokenizer {
    inner: tok_mod::Tokenizer,
}

#[pymethods]
impl PyTokenizer {
    /// Plain byte alphabet plus optional special tokens.
    #[staticmethod]
    #[pyo3(signature = (specials=None))]
    fn byte_level(specials: Option<Vec<String>>) -> Self {
        let specials = specials.unwrap_or_default();
        let refs: Vec<&str> = specials.iter().map(String::as_str).collect();
        PyTokenizer { inner: tok_mod::Tokenizer::byte_level(&refs) }
    }

    #[staticmethod]
    #[pyo3(signature = (corpus, vocab_size, specials=None))]
    fn train(py: Python<'_>, corpus: Vec<String>, vocab_size: usize, specials: Option<Vec<String>>) -> PyResult<Self> {
        let specials = specials.unwrap_or_else(|| tok_mod::DEFAULT_SPECIALS.map(String::from).to_vec());
        let inner = py.detach(|| {
            let refs: Vec<&str> = specials.iter().map(String::as_str).collect();
            tok_mod::train_bpe(&corpus, vocab_size, &refs)
        });
        Ok(PyTokenizer { inner: inner.map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyTokenizer { inner: tok_mod::Tokenizer::load(path).map_err(err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyTokenizer { inner: tok_mod::Tokenizer::from_json(text).map_err(err)? })
    }

    /// Merge `extension` into `base`; returns `(merged, report)`.
    #[staticmethod]
    fn merge<'py>(
        py: Python<'py>,
        base: PyRef<'_, PyTokenizer>,
        extension: PyRef<'_, PyTokenizer>,
    ) -> PyResult<(PyTokenizer, Bound<'py, PyAny>)> {
        let (merged, report) = tok_mod::merge_tokenizers(&base.inner, &extension.inner).map_err(err)?;
        Ok((PyTokenizer { inner: merged }, to_py(py, &report)?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<TokenId>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(err)
    }

    fn token_bytes(&self, id: TokenId) -> Option<Vec<u8>> {
        self.inner.token_bytes(id).map(<[u8]>::to_vec)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn num_merges(&self) -> usize {
        self.inner.merges().len()
    }

    fn special_id(&self, name: &str) -> Option<TokenId> {
        self.inner.special_id(name)
    }

    fn __len__(&self) -> usize {
        self.inner.vocab_size()
    }

    fn __repr__(&self) -> String {
        format!("Tokenizer(vocab_size={}, merges={})", self.inner.vocab_size(), self.inner.merges().len())
    }
}

#[pyclass(name = "Checkpoint", module = "unilm")]
struct PyCheckpoint {
    inner: Arc<model_mod::Checkpoint>,
}

#[pymethods]
impl PyCheckpoint {
    /// Seeded random weights for a preset name or a config dict.
    #[staticmethod]
    #[pyo3(signature = (config, seed=0))]
    fn init_random(config: &Bound<'_, PyAny>, seed: u64) -> PyResult<Self> {
        let cfg = config_arg(config)?;
        let ck = model_mod::Checkpoint::init_random(cfg, seed).map_err(err)?;
        Ok(PyCheckpoint { inner: Arc::new(ck) })
    }

    /// Load an f32 (`UNLM`) or quantized (`UNQM`) checkpoint.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bytes = std::fs::read(path).map_err(err)?;
        let ck = if bytes.starts_with(quant::UNQM_MAGIC) {
            quant::QuantizedCheckpoint::from_bytes(&bytes).and_then(|q| q.dequantize()).map_err(err)?
        } else {
            model_mod::Checkpoint::from_bytes(&bytes).map_err(err)?
        };
        Ok(PyCheckpoint { inner: Arc::new(ck) })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn model_id(&self) -> String {
        self.inner.model_id().to_string()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    fn num_parameters(&self) -> u64 {
        self.inner.element_count()
    }

    fn fingerprint(&self) -> u64 {
        self.inner.fingerprint()
    }

    fn tensor_names(&self) -> Vec<String> {
        self.inner.tensors().keys().cloned().collect()
    }

    fn tensor(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = self.inner.tensors().get(name).ok_or_else(|| err(format!("no tensor {name:?}")))?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    /// New checkpoint whose embedding table has `vocab_size` rows.
    #[pyo3(signature = (vocab_size, init="mean", sigma=0.02, seed=0))]
    fn extend_embeddings(&self, vocab_size: usize, init: &str, sigma: f32, seed: u64) -> PyResult<Self> {
        let init = match init {
            "mean" => EmbeddingInit::Mean,
            "gaussian" => EmbeddingInit::Gaussian { sigma, seed },
            other => return Err(err(format!("unknown init {other:?}; expected mean or gaussian"))),
        };
        let ck = model_mod::extend_embeddings(&self.inner, vocab_size, init).map_err(err)?;
        Ok(PyCheckpoint { inner: Arc::new(ck) })
    }

    /// Palettize weight matrices under a mixed 2/4-bit plan.
    #[pyo3(signature = (target_bits=3.5, group_size=quant::DEFAULT_GROUP_SIZE, include_embeddings=false))]
    fn quantize(
        &self,
        py: Python<'_>,
        target_bits: f64,
        group_size: usize,
        include_embeddings: bool,
    ) -> PyResult<PyQuantizedCheckpoint> {
        let opts = quant::QuantizeOptions { target_avg_bits: target_bits, group_size, include_embeddings };
        let ck = self.inner.clone();
        let q = py.detach(move || quant::quantize_checkpoint(&ck, &opts)).map_err(err)?;
        Ok(PyQuantizedCheckpoint { inner: q })
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint(model_id={:?}, parameters={})", self.inner.model_id(), self.inner.element_count())
    }
}

#[pyclass(name = "QuantizedCheckpoint", module = "unilm")]
struct PyQuantizedCheckpoint {
    inner: quant::QuantizedCheckpoint,
}

#[pymethods]
impl PyQuantizedCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyQuantizedCheckpoint { inner: quant::QuantizedCheckpoint::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.summary())
    }

    fn dequantize(&self) -> PyResult<PyCheckpoint> {
        Ok(PyCheckpoint { inner: Arc::new(self.inner.dequantize().map_err(err)?) })
    }
}

#[pyclass(name = "Adapter", module = "unilm")]
struct PyAdapter {
    inner: adapter_mod::Adapter,
}

#[pymethods]
impl PyAdapter {
    /// Fresh adapter for `checkpoint` (A random, B zero).
    #[staticmethod]
    #[pyo3(signature = (checkpoint, name, rank=16, targets=None, alpha=None, seed=0))]
    fn init(
        checkpoint: PyRef<'_, PyCheckpoint>,
        name: &str,
        rank: usize,
        targets: Option<Vec<String>>,
        alpha: Option<f32>,
        seed: u64,
    ) -> PyResult<Self> {
        let mut cfg = AdapterConfig::new(name, rank);
        if let Some(ts) = targets {
            cfg.targets = ts.iter().map(|t| t.parse::<Projection>().map_err(err)).collect::<PyResult<_>>()?;
        }
        if let Some(a) = alpha {
            cfg.alpha = a;
        }
        let inner = adapter_mod::init_adapter(checkpoint.inner.config(), &cfg, seed).map_err(err)?;
        Ok(PyAdapter { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyAdapter { inner: adapter_mod::Adapter::load(path, None).map_err(err)? })
    }

    #[staticmethod]
    fn from_bytes(data: Vec<u8>) -> PyResult<Self> {
        Ok(PyAdapter { inner: adapter_mod::Adapter::from_bytes(&data, None).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    fn randomize_b(&mut self, sigma: f32, seed: u64) {
        self.inner.randomize_b(sigma, seed);
    }

    fn set_alpha(&mut self, alpha: f32) {
        self.inner.set_alpha(alpha);
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.config().rank
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }
}

#[pyclass(name = "Model", module = "unilm")]
struct PyModel {
    inner: model_mod::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(checkpoint: PyRef<'_, PyCheckpoint>) -> Self {
        PyModel { inner: model_mod::Model::new(checkpoint.inner.clone()) }
    }

    #[getter]
    fn model_id(&self) -> String {
        self.inner.model_id().to_string()
    }

    #[getter]
    fn adapter(&self) -> Option<String> {
        self.inner.adapter().map(|a| a.name().to_string())
    }

    fn attach(&mut self, adapter: PyRef<'_, PyAdapter>) -> PyResult<()> {
        self.inner.attach(Arc::new(adapter.inner.clone())).map_err(err)
    }

    fn detach(&mut self, name: &str) -> PyResult<()> {
        self.inner.detach(name).map(|_| ()).map_err(err)
    }

    /// Logits `[T][vocab]` for a full sequence.
    fn logits(&self, py: Python<'_>, ids: Vec<TokenId>) -> PyResult<Vec<Vec<f32>>> {
        let t = py.detach(|| self.inner.logits(&ids)).map_err(err)?;
        Ok(t.data().chunks(t.last_dim().max(1)).map(<[f32]>::to_vec).collect())
    }

    #[pyo3(signature = (prompt, max_new_tokens=32, temperature=0.0, top_k=None, seed=0, stop_ids=None))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        &self,
        py: Python<'_>,
        prompt: Vec<TokenId>,
        max_new_tokens: usize,
        temperature: f32,
        top_k: Option<usize>,
        seed: u64,
        stop_ids: Option<Vec<TokenId>>,
    ) -> PyResult<Vec<TokenId>> {
        let params =
            GenerationParams { max_new_tokens, temperature, top_k, seed, stop_ids: stop_ids.unwrap_or_default() };
        py.detach(|| self.inner.generate(&prompt, &params)).map_err(err)
    }

    fn perplexity(&self, py: Python<'_>, ids: Vec<TokenId>) -> PyResult<f64> {
        py.detach(|| self.inner.perplexity(&ids)).map_err(err)
    }
}

#[pyclass(name = "Server", module = "unilm")]
struct PyServer {
    handle: Mutex<Option<server_mod::ServerHandle>>,
    url: String,
}

#[pymethods]
impl PyServer {
    /// Start serving `checkpoint` in background threads.
    #[new]
    #[pyo3(signature = (checkpoint, tokenizer=None, addr="127.0.0.1:0", workers=2))]
    fn new(
        checkpoint: PyRef<'_, PyCheckpoint>,
        tokenizer: Option<PyRef<'_, PyTokenizer>>,
        addr: &str,
        workers: usize,
    ) -> PyResult<Self> {
        let tok = tokenizer.map_or_else(|| tok_mod::Tokenizer::byte_level(&[]), |t| t.inner.clone());
        let cfg = ServerConfig { addr: addr.to_string(), workers, ..ServerConfig::default() };
        let state = ServerState::new(model_mod::Model::new(checkpoint.inner.clone()), tok, cfg);
        let handle = server_mod::serve(state).map_err(err)?;
        let url = handle.url();
        Ok(PyServer { handle: Mutex::new(Some(handle)), url })
    }

    #[getter]
    fn url(&self) -> String {
        self.url.clone()
    }

    fn shutdown(&self, py: Python<'_>) {
        let handle = self.handle.lock().unwrap().take();
        if let Some(h) = handle {
            py.detach(|| h.shutdown());
        }
    }
}

#[pyclass(name = "Orchestrator", module = "unilm")]
struct PyOrchestrator {
    inner: orch::Orchestrator,
}

#[pymethods]
impl PyOrchestrator {
    #[new]
    #[pyo3(signature = (checkpoint, tokenizer=None, server=None, policy=None, timeout_s=30.0))]
    fn new(
        checkpoint: PyRef<'_, PyCheckpoint>,
        tokenizer: Option<PyRef<'_, PyTokenizer>>,
        server: Option<String>,
        policy: Option<&Bound<'_, PyAny>>,
        timeout_s: f64,
    ) -> PyResult<Self> {
        let tok = tokenizer.map_or_else(|| tok_mod::Tokenizer::byte_level(&[]), |t| t.inner.clone());
        let policy: RoutingPolicy = match policy {
            Some(p) => from_py(p)?,
            None => RoutingPolicy::default(),
        };
        let local = orch::LocalEngine::new(model_mod::Model::new(checkpoint.inner.clone()), Arc::new(tok));
        let remote: Option<Box<dyn orch::RemoteEngine>> = server.map(|s| {
            Box::new(orch::HttpRemote::new(&s, Duration::from_secs_f64(timeout_s))) as Box<dyn orch::RemoteEngine>
        });
        Ok(PyOrchestrator { inner: orch::Orchestrator::new(local, remote, policy) })
    }

    /// Route and run a request. `prompt` is text or a list of token ids.
    #[pyo3(signature = (prompt, task="chat", privacy="default", max_new_tokens=32, temperature=0.0, seed=0, adapter=None))]
    #[allow(clippy::too_many_arguments)]
    fn execute<'py>(
        &self,
        py: Python<'py>,
        prompt: &Bound<'py, PyAny>,
        task: &str,
        privacy: &str,
        max_new_tokens: usize,
        temperature: f32,
        seed: u64,
        adapter: Option<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let req = build_request(prompt, task, privacy, max_new_tokens, temperature, seed, adapter)?;
        let resp = py.detach(|| self.inner.execute(&req)).map_err(err)?;
        to_py(py, &resp)
    }

    /// Routing verdict without executing.
    #[pyo3(signature = (prompt, task="chat", privacy="default", max_new_tokens=32))]
    fn explain<'py>(
        &self,
        py: Python<'py>,
        prompt: &Bound<'py, PyAny>,
        task: &str,
        privacy: &str,
        max_new_tokens: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let req = build_request(prompt, task, privacy, max_new_tokens, 0.0, 0, None)?;
        let (decision, _) = py.detach(|| self.inner.explain(&req)).map_err(err)?;
        to_py(py, &decision)
    }
}

fn build_request(
    prompt: &Bound<'_, PyAny>,
    task: &str,
    privacy: &str,
    max_new_tokens: usize,
    temperature: f32,
    seed: u64,
    adapter: Option<String>,
) -> PyResult<GenerationRequest> {
    let prompt = match prompt.extract::<String>() {
        Ok(s) => Prompt::Text(s),
        Err(_) => Prompt::Tokens(prompt.extract::<Vec<TokenId>>()?),
    };
    Ok(GenerationRequest {
        prompt,
        params: GenerationParams { max_new_tokens, temperature, seed, ..GenerationParams::default() },
        task_class: task.parse::<TaskClass>().map_err(err)?,
        privacy: privacy.parse::<Privacy>().map_err(err)?,
        adapter_name: adapter,
        deadline_ms: None,
    })
}

/// Config dict for a preset name.
#[pyfunction]
fn preset_config<'py>(py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyAny>> {
    let p: Preset = name.parse().map_err(err)?;
    to_py(py, &ModelConfig::preset(p))
}

/// Closed-form parameter count for a preset name or config dict.
#[pyfunction]
fn count_parameters(config: &Bound<'_, PyAny>) -> PyResult<u64> {
    model_mod::count_parameters(&config_arg(config)?).map_err(err)
}

/// Serialized UNLA size for an adapter over `targets` at `rank`.
#[pyfunction]
#[pyo3(signature = (config, rank=16, targets=None))]
fn adapter_size_bytes(config: &Bound<'_, PyAny>, rank: usize, targets: Option<Vec<String>>) -> PyResult<u64> {
    let model = config_arg(config)?;
    let mut cfg = AdapterConfig::new("size", rank);
    if let Some(ts) = targets {
        cfg.targets = ts.iter().map(|t| t.parse::<Projection>().map_err(err)).collect::<PyResult<_>>()?;
    }
    Ok(adapter_mod::adapter_size_bytes(&model, &cfg))
}

/// k-means palettization of one group; returns `(codebook, indices)`.
#[pyfunction]
fn palettize_group(values: Vec<f32>, bits: u8) -> PyResult<(Vec<f32>, Vec<u8>)> {
    quant::palettize_group(&values, bits).map_err(err)
}

/// Per-group bit widths meeting `target_avg_bits`.
#[pyfunction]
fn plan_mixed_precision(sensitivities: Vec<f64>, target_avg_bits: f64) -> PyResult<Vec<u8>> {
    Ok(quant::plan_mixed_precision(&sensitivities, target_avg_bits).map_err(err)?.bits)
}

/// Pure routing decision over explicit inputs.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (prompt_tokens, task="chat", privacy="default", max_new_tokens=32, server_reachable=false, policy=None, config="toy"))]
fn decide_route<'py>(
    py: Python<'py>,
    prompt_tokens: usize,
    task: &str,
    privacy: &str,
    max_new_tokens: usize,
    server_reachable: bool,
    policy: Option<&Bound<'py, PyAny>>,
    config: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let policy: RoutingPolicy = match policy {
        Some(p) => from_py(p)?,
        None => RoutingPolicy::default(),
    };
    let local = ModelConfig::preset(config.parse::<Preset>().map_err(err)?);
    let mut req =
        GenerationRequest::tokens(Vec::new(), task.parse().map_err(err)?, GenerationParams::greedy(max_new_tokens));
    req.privacy = privacy.parse().map_err(err)?;
    let now = orch::now_ms();
    let health = if server_reachable {
        ServerHealth { reachable: true, model_id: String::new(), probed_at_ms: now, queue_depth: 0 }
    } else {
        ServerHealth::unreachable(now)
    };
    let d = orch::decide_route(&req, prompt_tokens, &policy, &local, &health, now).map_err(err)?;
    to_py(py, &d)
}

#[pymodule]
pub fn unilm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("UnilmError", m.py().get_type::<UnilmError>())?;
    m.add_class::<PyTokenizer>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyQuantizedCheckpoint>()?;
    m.add_class::<PyAdapter>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyServer>()?;
    m.add_class::<PyOrchestrator>()?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(count_parameters, m)?)?;
    m.add_function(wrap_pyfunction!(adapter_size_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(palettize_group, m)?)?;
    m.add_function(wrap_pyfunction!(plan_mixed_precision, m)?)?;
    m.add_function(wrap_pyfunction!(decide_route, m)?)?;
    Ok(())
}
