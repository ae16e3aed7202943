//! Rank-r low-rank adapters applied as additive deltas on projection outputs.
//!
//! For an adapted projection `W: [out, in]` the forward pass computes
//! `W x + (alpha / rank) * B (A x)` with `A: [rank, in]` and `B: [out, rank]`.
//! Base weights are never modified, so detaching restores the base model exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{ByteReader, ByteWriter};
use crate::model::ModelConfig;
use crate::nn::matmul_wt;
use crate::tensor::Tensor;

pub const UNLA_MAGIC: &[u8; 4] = b"UNLA";
pub const UNLA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("invalid adapter target {0:?}")]
    InvalidTarget(String),
    #[error("adapter rank must be at least 1")]
    RankZero,
    #[error("adapter {0:?} is already attached")]
    AlreadyAttached(String),
    #[error("adapter {0:?} is not attached")]
    NotAttached(String),
    #[error("adapter shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed adapter file: {0}")]
    MalformedFile(String),
    #[error("adapter does not match model config: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Projections an adapter can target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Wq,
    Wk,
    Wv,
    Wo,
    WGate,
    WUp,
    WDown,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::Wq,
        Projection::Wk,
        Projection::Wv,
        Projection::Wo,
        Projection::WGate,
        Projection::WUp,
        Projection::WDown,
    ];

    pub const ATTENTION: [Projection; 4] = [Projection::Wq, Projection::Wk, Projection::Wv, Projection::Wo];

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Wq => "wq",
            Projection::Wk => "wk",
            Projection::Wv => "wv",
            Projection::Wo => "wo",
            Projection::WGate => "w_gate",
            Projection::WUp => "w_up",
            Projection::WDown => "w_down",
        }
    }

    /// `(out_dim, in_dim)` of the base weight.
    pub fn dims(self, c: &ModelConfig) -> (usize, usize) {
        let (h, f, kv) = (c.hidden_size, c.intermediate_size, c.kv_dim());
        match self {
            Projection::Wq | Projection::Wo => (h, h),
            Projection::Wk | Projection::Wv => (kv, h),
            Projection::WGate | Projection::WUp => (f, h),
            Projection::WDown => (h, f),
        }
    }

    pub fn tensor_name(self, layer: usize) -> String {
        match self {
            Projection::Wq | Projection::Wk | Projection::Wv | Projection::Wo => {
                format!("layers.{layer}.attn.{}", self.as_str())
            }
            _ => format!("layers.{layer}.ffn.{}", self.as_str()),
        }
    }
}

impl std::str::FromStr for Projection {
    type Err = AdapterError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Projection::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| AdapterError::InvalidTarget(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub name: String,
    pub rank: usize,
    pub alpha: f32,
    pub targets: Vec<Projection>,
}

impl AdapterConfig {
    /// Attention-projection adapter with `alpha == rank`.
    pub fn new(name: impl Into<String>, rank: usize) -> Self {
        AdapterConfig { name: name.into(), rank, alpha: rank as f32, targets: Projection::ATTENTION.to_vec() }
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    fn validate(&self) -> Result<(), AdapterError> {
        if self.rank == 0 {
            return Err(AdapterError::RankZero);
        }
        if self.targets.is_empty() {
            return Err(AdapterError::InvalidTarget("(empty target set)".into()));
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            return Err(AdapterError::InvalidTarget("duplicate target".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPair {
    /// `[rank, in_dim]`
    pub a: Tensor,
    /// `[out_dim, rank]`
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    config: AdapterConfig,
    n_layers: usize,
    dims: BTreeMap<Projection, (usize, usize)>,
    /// Indexed by `layer * targets.len() + target_index`.
    pairs: Vec<LowRankPair>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    rank: usize,
    alpha: f32,
    targets: Vec<Projection>,
    n_layers: usize,
    dims: BTreeMap<String, TargetDims>,
}

#[derive(Serialize, Deserialize)]
struct TargetDims {
    a: [usize; 2],
    b: [usize; 2],
}

/// Fresh adapter: `A ~ N(0, 0.02^2)` from `seed`, `B = 0`, so attaching it changes nothing.
pub fn init_adapter(model: &ModelConfig, config: &AdapterConfig, seed: u64) -> Result<Adapter, AdapterError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims: BTreeMap<_, _> = config.targets.iter().map(|&p| (p, p.dims(model))).collect();
    let mut pairs = Vec::with_capacity(model.n_layers * config.targets.len());
    for _ in 0..model.n_layers {
        for p in &config.targets {
            let (out_dim, in_dim) = dims[p];
            pairs.push(LowRankPair {
                a: Tensor::randn_with(&[config.rank, in_dim], 0.02, &mut rng),
                b: Tensor::zeros(&[out_dim, config.rank]),
            });
        }
    }
    Ok(Adapter { config: config.clone(), n_layers: model.n_layers, dims, pairs })
}

fn payload_floats(model: &ModelConfig, config: &AdapterConfig) -> usize {
    let per_layer: usize = config
        .targets
        .iter()
        .map(|p| {
            let (out_dim, in_dim) = p.dims(model);
            config.rank * in_dim + out_dim * config.rank
        })
        .sum();
    model.n_layers * per_layer
}

/// Payload bytes: `n_layers * sum over targets of (rank*in + out*rank) * 4`.
pub fn adapter_payload_bytes(model: &ModelConfig, config: &AdapterConfig) -> u64 {
    4 * payload_floats(model, config) as u64
}

/// Exact size of the serialized adapter file (header plus payload).
pub fn adapter_size_bytes(model: &ModelConfig, config: &AdapterConfig) -> u64 {
    let dims = config.targets.iter().map(|&p| (p, p.dims(model))).collect();
    header_bytes(config, model.n_layers, &dims).len() as u64 + adapter_payload_bytes(model, config)
}

fn header_bytes(config: &AdapterConfig, n_layers: usize, dims: &BTreeMap<Projection, (usize, usize)>) -> Vec<u8> {
    let header = Header {
        name: config.name.clone(),
        rank: config.rank,
        alpha: config.alpha,
        targets: config.targets.clone(),
        n_layers,
        dims: dims
            .iter()
            .map(|(p, &(out_dim, in_dim))| {
                (p.as_str().to_string(), TargetDims { a: [config.rank, in_dim], b: [out_dim, config.rank] })
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut w = ByteWriter::default();
    w.bytes(UNLA_MAGIC);
    w.u32(UNLA_VERSION);
    w.u64(json.len() as u64);
    w.bytes(&json);
    w.finish()
}

impl Adapter {
    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn pairs(&self) -> &[LowRankPair] {
        &self.pairs
    }

    pub fn pair(&self, layer: usize, p: Projection) -> Option<&LowRankPair> {
        let idx = self.config.targets.iter().position(|&t| t == p)?;
        self.pairs.get(layer * self.config.targets.len() + idx)
    }

    pub fn pair_mut(&mut self, layer: usize, p: Projection) -> Option<&mut LowRankPair> {
        let idx = self.config.targets.iter().position(|&t| t == p)?;
        let n = self.config.targets.len();
        self.pairs.get_mut(layer * n + idx)
    }

    pub fn set_alpha(&mut self, alpha: f32) {
        self.config.alpha = alpha;
    }

    pub fn rename(&mut self, name: impl Into<String>) {
        self.config.name = name.into();
    }

    /// Fill every `B` with seeded N(0, sigma^2) values, standing in for trained weights.
    pub fn randomize_b(&mut self, sigma: f32, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for pair in &mut self.pairs {
            pair.b = Tensor::randn_with(pair.b.shape(), sigma, &mut rng);
        }
    }

    /// `(alpha/rank) * B (A x)` for rows of `x`, or `None` when `p` is not adapted.
    pub fn delta(&self, layer: usize, p: Projection, x: &[f32]) -> Option<Vec<f32>> {
        let pair = self.pair(layer, p)?;
        let (out_dim, in_dim) = self.dims[&p];
        let r = self.config.rank;
        let ax = matmul_wt(x, pair.a.data(), in_dim, r);
        let mut d = matmul_wt(&ax, pair.b.data(), r, out_dim);
        let scale = self.config.scale();
        d.iter_mut().for_each(|v| *v *= scale);
        Some(d)
    }

    pub fn check_compatible(&self, model: &ModelConfig) -> Result<(), AdapterError> {
        if self.n_layers != model.n_layers {
            return Err(AdapterError::ShapeMismatch(format!(
                "adapter has {} layers, model has {}",
                self.n_layers, model.n_layers
            )));
        }
        for (&p, &dims) in &self.dims {
            if p.dims(model) != dims {
                return Err(AdapterError::ShapeMismatch(format!(
                    "{} is {:?} in adapter, {:?} in model",
                    p.as_str(),
                    dims,
                    p.dims(model)
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(&header_bytes(&self.config, self.n_layers, &self.dims));
        for pair in &self.pairs {
            w.f32s(pair.a.data());
            w.f32s(pair.b.data());
        }
        w.finish()
    }

    /// Parse a UNLA file; with `model`, also check it fits that config.
    pub fn from_bytes(buf: &[u8], model: Option<&ModelConfig>) -> Result<Self, AdapterError> {
        let bad = AdapterError::MalformedFile;
        let mut r = ByteReader::new(buf);
        if r.take(4).map_err(bad)? != UNLA_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.u32().map_err(bad)?;
        if version != UNLA_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = r.u64().map_err(bad)? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len).map_err(bad)?).map_err(|e| bad(format!("header: {e}")))?;
        let config =
            AdapterConfig { name: header.name, rank: header.rank, alpha: header.alpha, targets: header.targets };
        config.validate().map_err(|e| bad(e.to_string()))?;
        let mut dims = BTreeMap::new();
        for p in &config.targets {
            let d = header.dims.get(p.as_str()).ok_or_else(|| bad(format!("no dims for {}", p.as_str())))?;
            if d.a[0] != config.rank || d.b[1] != config.rank {
                return Err(bad(format!("{}: rank {} but A is {:?} and B is {:?}", p.as_str(), config.rank, d.a, d.b)));
            }
            dims.insert(*p, (d.b[0], d.a[1]));
        }
        if header.dims.len() != dims.len() {
            return Err(bad("dims for a projection that is not targeted".into()));
        }
        if let Some(m) = model {
            if header.n_layers != m.n_layers {
                return Err(AdapterError::ConfigMismatch(format!(
                    "{} layers vs model's {}",
                    header.n_layers, m.n_layers
                )));
            }
            for (&p, &d) in &dims {
                if p.dims(m) != d {
                    return Err(AdapterError::ConfigMismatch(format!(
                        "{} is {:?}, model expects {:?}",
                        p.as_str(),
                        d,
                        p.dims(m)
                    )));
                }
            }
        }
        let per_layer: usize = dims.values().map(|&(o, i)| config.rank * (i + o)).sum();
        let expected = header
            .n_layers
            .checked_mul(per_layer)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("payload size overflows".into()))?;
        if r.remaining() != expected {
            return Err(bad(format!("payload is {} bytes, header implies {expected}", r.remaining())));
        }
        let mut pairs = Vec::with_capacity(header.n_layers * config.targets.len());
        for _ in 0..header.n_layers {
            for p in &config.targets {
                let (out_dim, in_dim) = dims[p];
                let a =
                    Tensor::new(vec![config.rank, in_dim], r.f32s(config.rank * in_dim).map_err(bad)?).expect("sized");
                let b = Tensor::new(vec![out_dim, config.rank], r.f32s(out_dim * config.rank).map_err(bad)?)
                    .expect("sized");
                pairs.push(LowRankPair { a, b });
            }
        }
        Ok(Adapter { config, n_layers: header.n_layers, dims, pairs })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AdapterError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, model: Option<&ModelConfig>) -> Result<Self, AdapterError> {
        Self::from_bytes(&fs::read(path)?, model)
    }

    /// Length of the header portion of [`Adapter::to_bytes`].
    pub fn header_len(&self) -> usize {
        header_bytes(&self.config, self.n_layers, &self.dims).len()
    }
}
