//! JSON bodies exchanged between the orchestrator and the generation server.

use serde::{Deserialize, Serialize};

use crate::model::GenerationParams;
use crate::tokenizer::TokenId;

/// `POST /v1/generate`. Exactly one of `prompt` or `tokens` should be set;
/// `tokens` wins when both are present. Sampling fields are flat.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_new_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_ids: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<String>,
}

impl GenerateBody {
    pub fn from_tokens(tokens: Vec<TokenId>, params: &GenerationParams, adapter: Option<String>) -> Self {
        GenerateBody {
            prompt: None,
            tokens: Some(tokens),
            max_new_tokens: Some(params.max_new_tokens),
            temperature: Some(params.temperature),
            top_k: params.top_k,
            seed: Some(params.seed),
            stop_ids: Some(params.stop_ids.clone()),
            adapter,
        }
    }

    pub fn params(&self) -> GenerationParams {
        let d = GenerationParams::default();
        GenerationParams {
            max_new_tokens: self.max_new_tokens.unwrap_or(d.max_new_tokens),
            temperature: self.temperature.unwrap_or(d.temperature),
            top_k: self.top_k.or(d.top_k),
            seed: self.seed.unwrap_or(d.seed),
            stop_ids: self.stop_ids.clone().unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReply {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub model_id: String,
    pub usage: Usage,
}

/// `POST /v1/adapters`: either an inline base64 UNLA payload or a path on the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadAdapterBody {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReply {
    pub status: String,
    pub model_id: String,
    pub uptime_s: f64,
    pub queue_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub error: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadAdapterReply {
    pub name: String,
    /// `loaded`, `unchanged` or `replaced`.
    pub status: String,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
    /// `base` or `adapter`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsReply {
    pub models: Vec<ModelEntry>,
}
