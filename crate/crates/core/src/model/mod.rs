//! Decoder-only transformer: configuration, checkpoints and inference.

mod checkpoint;
mod engine;

pub use checkpoint::{extend_embeddings, Checkpoint, EmbeddingInit, UNLM_MAGIC, UNLM_VERSION};
pub use engine::{argmax, log_softmax_at, perplexity_from_logits, GenerationParams, KVCache, Model};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{AttentionGeometry, NnError};
use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed container: {0}")]
    MalformedContainer(String),
    #[error("tensor {name}: {detail}")]
    ShapeViolation { name: String, detail: String },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("token {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("context overflow: {needed} positions needed, max_seq_len is {max}")]
    ContextOverflow { needed: usize, max: usize },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("perplexity needs at least 2 tokens, got {0}")]
    SequenceTooShort(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("cannot shrink vocabulary from {from} to {to}")]
    ShrinkNotAllowed { from: usize, to: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub intermediate_size: usize,
    pub max_seq_len: usize,
    pub rms_eps: f32,
    pub rope_theta: f32,
    pub tied_embeddings: bool,
    pub model_id: String,
}

/// Named size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Test-sized model over the raw byte alphabet.
    Toy,
    /// 8-layer on-device model, hidden 2048, 32 query heads.
    Slim34m,
    /// 24-layer server model sharing the same recipe.
    Manyak,
}

impl std::str::FromStr for Preset {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "toy" => Ok(Preset::Toy),
            "slim34m" | "slim-34m" => Ok(Preset::Slim34m),
            "manyak" | "manyak-1.3b" => Ok(Preset::Manyak),
            other => Err(ModelError::InvalidConfig(format!("unknown preset {other}"))),
        }
    }
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Toy => ModelConfig {
                vocab_size: 256,
                hidden_size: 64,
                n_layers: 2,
                n_heads: 4,
                n_kv_heads: 2,
                intermediate_size: 176,
                max_seq_len: 256,
                rms_eps: 1e-5,
                rope_theta: 10000.0,
                tied_embeddings: true,
                model_id: "toy".into(),
            },
            Preset::Slim34m => ModelConfig {
                vocab_size: 61788,
                hidden_size: 2048,
                n_layers: 8,
                n_heads: 32,
                n_kv_heads: 8,
                intermediate_size: 5632,
                max_seq_len: 2048,
                rms_eps: 1e-5,
                rope_theta: 10000.0,
                tied_embeddings: true,
                model_id: "slim-34m".into(),
            },
            Preset::Manyak => ModelConfig {
                vocab_size: 61788,
                hidden_size: 2048,
                n_layers: 24,
                n_heads: 16,
                n_kv_heads: 8,
                intermediate_size: 5632,
                max_seq_len: 2048,
                rms_eps: 1e-5,
                rope_theta: 10000.0,
                tied_embeddings: true,
                model_id: "manyak-1.3b".into(),
            },
        }
    }

    pub fn toy() -> Self {
        Self::preset(Preset::Toy)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn geometry(&self) -> AttentionGeometry {
        AttentionGeometry {
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim(),
            rope_theta: self.rope_theta,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("intermediate_size", self.intermediate_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "hidden_size {} not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        if self.rms_eps.is_nan() || self.rms_eps <= 0.0 || self.rope_theta.is_nan() || self.rope_theta <= 0.0 {
            return Err(ModelError::InvalidConfig("rms_eps and rope_theta must be positive".into()));
        }
        if !self.tied_embeddings {
            return Err(ModelError::InvalidConfig("only tied embeddings are supported".into()));
        }
        self.geometry().validate(self.hidden_size).map_err(|e| ModelError::InvalidConfig(e.to_string()))
    }

    /// Every tensor a checkpoint for this config must contain, in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f, kv) = (self.hidden_size, self.intermediate_size, self.kv_dim());
        let mut out = vec![("embed.weight".to_string(), vec![self.vocab_size, h])];
        for i in 0..self.n_layers {
            let p = format!("layers.{i}");
            out.push((format!("{p}.attn.wq"), vec![h, h]));
            out.push((format!("{p}.attn.wk"), vec![kv, h]));
            out.push((format!("{p}.attn.wv"), vec![kv, h]));
            out.push((format!("{p}.attn.wo"), vec![h, h]));
            out.push((format!("{p}.attn_norm"), vec![h]));
            out.push((format!("{p}.ffn.w_gate"), vec![f, h]));
            out.push((format!("{p}.ffn.w_up"), vec![f, h]));
            out.push((format!("{p}.ffn.w_down"), vec![h, f]));
            out.push((format!("{p}.ffn_norm"), vec![h]));
        }
        out.push(("final_norm".to_string(), vec![h]));
        out
    }
}

/// Closed-form parameter count. The embedding is shared with the output head
/// and counted once.
pub fn count_parameters(config: &ModelConfig) -> Result<u64, ModelError> {
    config.validate()?;
    let v = config.vocab_size as u64;
    let h = config.hidden_size as u64;
    let f = config.intermediate_size as u64;
    let kv = config.kv_dim() as u64;
    let per_layer = h * h + 2 * h * kv + h * h + 3 * h * f + 2 * h;
    Ok(v * h + config.n_layers as u64 * per_layer + h)
}
