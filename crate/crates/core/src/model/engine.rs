use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, ModelConfig, ModelError};
use crate::adapter::{Adapter, AdapterError, Projection};
use crate::nn::{attention_flat, matmul_wt, rms_norm_row, rope_rotate, silu};
use crate::tensor::Tensor;
use crate::tokenizer::TokenId;

/// Per-layer keys and values for the positions decoded so far.
#[derive(Debug, Clone)]
pub struct KVCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    cur_len: usize,
    max_len: usize,
}

impl KVCache {
    pub fn new(config: &ModelConfig) -> Self {
        KVCache {
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            cur_len: 0,
            max_len: config.max_seq_len,
        }
    }

    pub fn len(&self) -> usize {
        self.cur_len
    }

    pub fn is_empty(&self) -> bool {
        self.cur_len == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    /// 0 selects greedy decoding.
    pub temperature: f32,
    /// `None` keeps the full distribution.
    pub top_k: Option<usize>,
    pub seed: u64,
    pub stop_ids: Vec<TokenId>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams { max_new_tokens: 32, temperature: 0.0, top_k: None, seed: 0, stop_ids: Vec::new() }
    }
}

impl GenerationParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        GenerationParams { max_new_tokens, ..Default::default() }
    }
}

/// A checkpoint plus at most one attached adapter. Cloning is cheap; the
/// checkpoint itself is shared and never written.
#[derive(Debug, Clone)]
pub struct Model {
    ckpt: Arc<Checkpoint>,
    adapter: Option<Arc<Adapter>>,
}

impl Model {
    pub fn new(ckpt: Arc<Checkpoint>) -> Self {
        Model { ckpt, adapter: None }
    }

    pub fn checkpoint(&self) -> &Arc<Checkpoint> {
        &self.ckpt
    }

    pub fn config(&self) -> &ModelConfig {
        self.ckpt.config()
    }

    pub fn model_id(&self) -> &str {
        self.ckpt.model_id()
    }

    pub fn adapter(&self) -> Option<&Arc<Adapter>> {
        self.adapter.as_ref()
    }

    pub fn attach(&mut self, adapter: Arc<Adapter>) -> Result<(), AdapterError> {
        if let Some(current) = &self.adapter {
            return Err(AdapterError::AlreadyAttached(current.config().name.clone()));
        }
        adapter.check_compatible(self.config())?;
        self.adapter = Some(adapter);
        Ok(())
    }

    pub fn detach(&mut self, name: &str) -> Result<Arc<Adapter>, AdapterError> {
        match &self.adapter {
            Some(a) if a.config().name == name => Ok(self.adapter.take().unwrap()),
            _ => Err(AdapterError::NotAttached(name.to_string())),
        }
    }

    fn project(&self, layer: usize, p: Projection, x: &[f32]) -> Vec<f32> {
        let c = self.config();
        let (out_dim, in_dim) = p.dims(c);
        let w = self.ckpt.tensor(&p.tensor_name(layer));
        let mut y = matmul_wt(x, w.data(), in_dim, out_dim);
        if let Some(adapter) = &self.adapter {
            if let Some(delta) = adapter.delta(layer, p, x) {
                for (a, d) in y.iter_mut().zip(delta) {
                    *a += d;
                }
            }
        }
        y
    }

    /// Run `tokens` through the decoder, appending their keys/values to `cache`.
    /// Returns logits `[T, vocab_size]` computed against the tied embedding.
    pub fn forward(&self, tokens: &[TokenId], cache: &mut KVCache) -> Result<Tensor, ModelError> {
        let c = self.config();
        let (h, vocab) = (c.hidden_size, c.vocab_size);
        let (n_heads, n_kv, hd) = (c.n_heads, c.n_kv_heads, c.head_dim());
        let kv_dim = c.kv_dim();
        let t = tokens.len();
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= vocab) {
            return Err(ModelError::TokenOutOfRange { id, vocab });
        }
        let start = cache.cur_len;
        if start + t > c.max_seq_len.min(cache.max_len) {
            return Err(ModelError::ContextOverflow { needed: start + t, max: c.max_seq_len });
        }
        if t == 0 {
            return Ok(Tensor::zeros(&[0, vocab]));
        }

        let embed = self.ckpt.tensor("embed.weight");
        let mut x: Vec<f32> = tokens.iter().flat_map(|&id| embed.row(id as usize).to_vec()).collect();

        for layer in 0..c.n_layers {
            let norm_w = self.ckpt.tensor(&format!("layers.{layer}.attn_norm"));
            let mut normed = x.clone();
            normed.chunks_mut(h).for_each(|r| rms_norm_row(r, norm_w.data(), c.rms_eps));

            let mut q = self.project(layer, Projection::Wq, &normed);
            let mut k = self.project(layer, Projection::Wk, &normed);
            let v = self.project(layer, Projection::Wv, &normed);
            for i in 0..t {
                let pos = start + i;
                q[i * h..(i + 1) * h].chunks_mut(hd).for_each(|head| rope_rotate(head, pos, c.rope_theta));
                k[i * kv_dim..(i + 1) * kv_dim].chunks_mut(hd).for_each(|head| rope_rotate(head, pos, c.rope_theta));
            }
            cache.keys[layer].extend_from_slice(&k);
            cache.values[layer].extend_from_slice(&v);
            let s = start + t;
            let attn = attention_flat(&q, &cache.keys[layer], &cache.values[layer], t, s, n_heads, n_kv, hd);
            let o = self.project(layer, Projection::Wo, &attn);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            let norm_w = self.ckpt.tensor(&format!("layers.{layer}.ffn_norm"));
            let mut normed = x.clone();
            normed.chunks_mut(h).for_each(|r| rms_norm_row(r, norm_w.data(), c.rms_eps));
            let mut gate = self.project(layer, Projection::WGate, &normed);
            let up = self.project(layer, Projection::WUp, &normed);
            gate.iter_mut().zip(&up).for_each(|(g, u)| *g = silu(*g) * u);
            let down = self.project(layer, Projection::WDown, &gate);
            x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);
        }
        cache.cur_len = start + t;

        let final_w = self.ckpt.tensor("final_norm");
        x.chunks_mut(h).for_each(|r| rms_norm_row(r, final_w.data(), c.rms_eps));
        let logits = matmul_wt(&x, embed.data(), h, vocab);
        Ok(Tensor::new(vec![t, vocab], logits).expect("sized"))
    }

    /// Logits for a whole sequence from an empty cache.
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Tensor, ModelError> {
        let mut cache = KVCache::new(self.config());
        self.forward(tokens, &mut cache)
    }

    /// Autoregressive generation. Greedy when `temperature == 0` (ties go to the
    /// lowest id); otherwise top-k temperature sampling from a seeded ChaCha8 stream.
    /// A generated stop id is included in the output and ends generation.
    pub fn generate(&self, prompt: &[TokenId], params: &GenerationParams) -> Result<Vec<TokenId>, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        let max = self.config().max_seq_len;
        if prompt.len() + params.max_new_tokens > max {
            return Err(ModelError::ContextOverflow { needed: prompt.len() + params.max_new_tokens, max });
        }
        if params.max_new_tokens == 0 {
            return Ok(Vec::new());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut cache = KVCache::new(self.config());
        let logits = self.forward(prompt, &mut cache)?;
        let mut last = logits.row(prompt.len() - 1).to_vec();
        let mut out = Vec::with_capacity(params.max_new_tokens);
        loop {
            let next = if params.temperature <= 0.0 {
                argmax(&last)
            } else {
                sample(&last, params.temperature, params.top_k, &mut rng)
            };
            out.push(next);
            if params.stop_ids.contains(&next) || out.len() == params.max_new_tokens {
                break;
            }
            last = self.forward(&[next], &mut cache)?.row(0).to_vec();
        }
        Ok(out)
    }

    /// `exp(-mean log p(ids[i] | ids[..i]))` over positions 1..n.
    pub fn perplexity(&self, ids: &[TokenId]) -> Result<f64, ModelError> {
        if ids.len() < 2 {
            return Err(ModelError::SequenceTooShort(ids.len()));
        }
        let logits = self.logits(ids)?;
        Ok(perplexity_from_logits(&logits, ids))
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best as TokenId
}

fn sample(logits: &[f32], temperature: f32, top_k: Option<usize>, rng: &mut ChaCha8Rng) -> TokenId {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // descending by logit, ascending id on ties
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if let Some(k) = top_k {
        order.truncate(k.max(1));
    }
    let max = logits[order[0]] as f64 / temperature as f64;
    let weights: Vec<f64> = order.iter().map(|&i| (logits[i] as f64 / temperature as f64 - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, w) in order.iter().zip(&weights) {
        if u < *w {
            return i as TokenId;
        }
        u -= w;
    }
    *order.last().unwrap() as TokenId
}

/// Stable `log softmax(row)[target]`.
pub fn log_softmax_at(row: &[f32], target: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    row[target] as f64 - lse
}

/// Perplexity of `ids` given logits whose row `i` predicts `ids[i + 1]`.
pub fn perplexity_from_logits(logits: &Tensor, ids: &[TokenId]) -> f64 {
    let n = ids.len() - 1;
    let nll: f64 = (0..n).map(|i| -log_softmax_at(logits.row(i), ids[i + 1] as usize)).sum();
    (nll / n as f64).exp()
}
