use std::collections::BTreeMap;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::io::{ByteReader, ByteWriter};
use crate::tensor::Tensor;

pub const UNLM_MAGIC: &[u8; 4] = b"UNLM";
pub const UNLM_VERSION: u32 = 1;

/// Config plus every named weight tensor. The output head reuses `embed.weight`,
/// so no separate projection tensor exists.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EmbeddingInit {
    /// New rows are the arithmetic mean of the existing rows.
    Mean,
    Gaussian {
        sigma: f32,
        seed: u64,
    },
}

impl Checkpoint {
    /// Validate tensors against the config-implied shapes.
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = config.tensor_shapes();
        for (name, shape) in &expected {
            let t = tensors
                .get(name)
                .ok_or_else(|| ModelError::ShapeViolation { name: name.clone(), detail: "missing".into() })?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ShapeViolation {
                    name: name.clone(),
                    detail: format!("expected {:?}, found {:?}", shape, t.shape()),
                });
            }
        }
        if tensors.len() != expected.len() {
            let extra = tensors.keys().find(|k| !expected.iter().any(|(n, _)| n == *k)).cloned().unwrap_or_default();
            return Err(ModelError::ShapeViolation { name: extra, detail: "unexpected tensor".into() });
        }
        Ok(Checkpoint { config, tensors })
    }

    /// Seeded random weights: N(0, 0.02^2) matrices, unit norm weights.
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 1 {
                    Tensor::filled(&shape, 1.0)
                } else {
                    Tensor::randn_with(&shape, 0.02, &mut rng)
                };
                (name, t)
            })
            .collect();
        Self::new(config, tensors)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn model_id(&self) -> &str {
        &self.config.model_id
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("validated checkpoint lacks {name}"))
    }

    /// Replace a tensor with one of identical shape.
    pub fn set_tensor(&mut self, name: &str, t: Tensor) -> Result<(), ModelError> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::ShapeViolation { name: name.into(), detail: "unknown tensor".into() })?;
        if slot.shape() != t.shape() {
            return Err(ModelError::ShapeViolation {
                name: name.into(),
                detail: format!("expected {:?}, found {:?}", slot.shape(), t.shape()),
            });
        }
        *slot = t;
        Ok(())
    }

    pub fn element_count(&self) -> u64 {
        self.tensors.values().map(|t| t.len() as u64).sum()
    }

    /// Hash over config and raw tensor bits; changes whenever any weight changes.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        serde_json::to_string(&self.config).unwrap().hash(&mut h);
        for (name, t) in &self.tensors {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(UNLM_MAGIC);
        w.u32(UNLM_VERSION);
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        w.u64(cfg.len() as u64);
        w.bytes(&cfg);
        w.u32(self.tensors.len() as u32);
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            w.u16(name.len() as u16);
            w.bytes(name.as_bytes());
            w.u8(t.rank() as u8);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.u64(offset);
            offset += 4 * t.len() as u64;
        }
        for t in self.tensors.values() {
            w.f32s(t.data());
        }
        w.finish()
    }

    /// Parse a UNLM container. Tensor offsets are relative to the start of the
    /// data section, which immediately follows the tensor table.
    pub fn from_bytes(buf: &[u8]) -> Result<Self, ModelError> {
        let bad = ModelError::MalformedContainer;
        let mut r = ByteReader::new(buf);
        if r.take(4).map_err(bad)? != UNLM_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.u32().map_err(bad)?;
        if version != UNLM_VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        let cfg_len = r.u64().map_err(bad)? as usize;
        let cfg_bytes = r.take(cfg_len).map_err(bad)?;
        let config: ModelConfig = serde_json::from_slice(cfg_bytes).map_err(|e| bad(format!("config json: {e}")))?;
        let count = r.u32().map_err(bad)?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u16().map_err(bad)? as usize;
            let name = std::str::from_utf8(r.take(name_len).map_err(bad)?)
                .map_err(|_| bad("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8().map_err(bad)? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>().map_err(bad)?;
            let offset = r.u64().map_err(bad)? as usize;
            entries.push((name, shape, offset));
        }
        let data = r.rest();
        let mut tensors = BTreeMap::new();
        for (name, shape, offset) in entries {
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad(format!("{name}: shape overflows")))?;
            let end = n
                .checked_mul(4)
                .and_then(|b| b.checked_add(offset))
                .filter(|&e| e <= data.len())
                .ok_or_else(|| bad(format!("{name}: payload outside data section")))?;
            let values = crate::io::read_f32s(&data[offset..end]);
            let t = Tensor::new(shape, values).expect("length checked");
            if tensors.insert(name.clone(), t).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
        }
        Self::new(config, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Grow `embed.weight` to `new_vocab_size` rows. Existing rows and every other
/// tensor are left bit-for-bit unchanged.
pub fn extend_embeddings(
    ckpt: &Checkpoint,
    new_vocab_size: usize,
    init: EmbeddingInit,
) -> Result<Checkpoint, ModelError> {
    let old = ckpt.config.vocab_size;
    if new_vocab_size < old {
        return Err(ModelError::ShrinkNotAllowed { from: old, to: new_vocab_size });
    }
    let mut out = ckpt.clone();
    if new_vocab_size == old {
        return Ok(out);
    }
    let h = ckpt.config.hidden_size;
    let embed = ckpt.tensor("embed.weight");
    let extra = new_vocab_size - old;
    let mut data = embed.data().to_vec();
    match init {
        EmbeddingInit::Mean => {
            let mut mean = vec![0.0f64; h];
            for row in embed.data().chunks(h) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += *v as f64;
                }
            }
            let mean: Vec<f32> = mean.iter().map(|m| (m / old as f64) as f32).collect();
            for _ in 0..extra {
                data.extend_from_slice(&mean);
            }
        }
        EmbeddingInit::Gaussian { sigma, seed } => {
            data.extend(Tensor::randn(&[extra, h], sigma, seed).into_data());
        }
    }
    out.config.vocab_size = new_vocab_size;
    out.tensors.insert("embed.weight".into(), Tensor::new(vec![new_vocab_size, h], data).expect("sized"));
    Ok(out)
}
