//! Byte-level BPE tokenization, a compact decoder-only transformer, palettized
//! weight storage, low-rank adapters and local/remote request routing.

pub mod adapter;
pub mod cli;
mod io;
pub mod model;
pub mod nn;
pub mod orchestrator;
pub mod protocol;
pub mod quant;
pub mod server;
pub mod tensor;
pub mod tokenizer;

pub use adapter::{Adapter, AdapterConfig, AdapterError, Projection};
pub use model::{Checkpoint, GenerationParams, Model, ModelConfig, ModelError, Preset};
pub use orchestrator::{decide_route, GenerationRequest, Orchestrator, Route, RouteDecision, RoutingPolicy};
pub use quant::{quantize_checkpoint, QuantizeOptions, QuantizedCheckpoint};
pub use tensor::Tensor;
pub use tokenizer::{merge_tokenizers, train_bpe, Tokenizer};
