//! Weight palettization: each group of weights is replaced by 2- or 4-bit
//! indices into a small k-means codebook, with a planner that mixes the two
//! widths to hit a target average bit width.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::io::{ByteReader, ByteWriter};
use crate::model::{Checkpoint, ModelConfig, ModelError};
use crate::tensor::Tensor;

pub const UNLQ_MAGIC: &[u8; 4] = b"UNLQ";
pub const UNQM_MAGIC: &[u8; 4] = b"UNQM";
pub const QUANT_VERSION: u32 = 1;
pub const DEFAULT_GROUP_SIZE: usize = 64;
pub const KMEANS_SEED: u64 = 42;
const MAX_ITERS: usize = 50;
const MIN_MOVEMENT: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("cannot palettize an empty group")]
    EmptyGroup,
    #[error("unsupported bit width {0}; expected 2 or 4")]
    InvalidBits(u8),
    #[error("plan has {got} groups but the tensor splits into {expected}")]
    PlanLengthMismatch { expected: usize, got: usize },
    #[error("corrupt palettized data: {0}")]
    CorruptIndices(String),
    #[error("target average {0} bits is outside [2, 4]")]
    TargetOutOfRange(f64),
    #[error("plan needs at least one group")]
    EmptyPlan,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed quantized container: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PalettizedGroup {
    pub bits: u8,
    pub codebook: Vec<f32>,
    /// Indices packed LSB-first, `bits` per entry.
    pub packed: Vec<u8>,
    pub len: usize,
}

impl PalettizedGroup {
    pub fn indices(&self) -> Vec<u8> {
        unpack_indices(&self.packed, self.bits, self.len)
    }

    pub fn reconstruct(&self) -> Vec<f32> {
        self.indices().iter().map(|&i| self.codebook[i as usize]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PalettizedTensor {
    pub original_shape: Vec<usize>,
    pub group_size: usize,
    pub groups: Vec<PalettizedGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixedPrecisionPlan {
    pub bits: Vec<u8>,
    pub achieved_avg_bits: f64,
    pub target_avg_bits: f64,
}

impl MixedPrecisionPlan {
    pub fn uniform(groups: usize, bits: u8) -> Self {
        MixedPrecisionPlan { bits: vec![bits; groups], achieved_avg_bits: bits as f64, target_avg_bits: bits as f64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantReport {
    pub mse: f64,
    pub max_abs_err: f64,
    pub avg_bits: f64,
    pub compression_ratio: f64,
}

pub fn pack_indices(indices: &[u8], bits: u8) -> Vec<u8> {
    let bits = bits as usize;
    let mut out = vec![0u8; (indices.len() * bits).div_ceil(8)];
    for (i, &idx) in indices.iter().enumerate() {
        let bit = i * bits;
        out[bit / 8] |= idx << (bit % 8);
    }
    out
}

pub fn unpack_indices(packed: &[u8], bits: u8, len: usize) -> Vec<u8> {
    let mask = (1u8 << bits) - 1;
    (0..len)
        .map(|i| {
            let bit = i * bits as usize;
            (packed[bit / 8] >> (bit % 8)) & mask
        })
        .collect()
}

fn nearest(codebook: &[f32], v: f32) -> (u8, f64) {
    let mut best = (0u8, f64::INFINITY);
    for (i, &c) in codebook.iter().enumerate() {
        let e = (v as f64 - c as f64).powi(2);
        if e < best.1 {
            best = (i as u8, e);
        }
    }
    best
}

fn mse_of(values: &[f32], codebook: &[f32], indices: &[u8]) -> f64 {
    values.iter().zip(indices).map(|(&v, &i)| (v as f64 - codebook[i as usize] as f64).powi(2)).sum::<f64>()
        / values.len() as f64
}

struct Fit {
    codebook: Vec<f32>,
    indices: Vec<u8>,
    mse: f64,
}

/// Lloyd iterations from `init`, returning the best assignment seen. Every
/// recorded state pairs a codebook with its nearest-centroid assignment, so the
/// result is never worse than the initial codebook.
fn lloyd(values: &[f32], init: Vec<f32>) -> Fit {
    let k = init.len();
    let mut centroids = init;
    let mut best: Option<Fit> = None;
    for _ in 0..MAX_ITERS {
        let assign: Vec<u8> = values.iter().map(|&v| nearest(&centroids, v).0).collect();
        let mse = mse_of(values, &centroids, &assign);
        if best.as_ref().is_none_or(|b| mse < b.mse) {
            best = Some(Fit { codebook: centroids.clone(), indices: assign.clone(), mse });
        }
        let mut sums = vec![0.0f64; k];
        let mut counts = vec![0usize; k];
        for (&v, &a) in values.iter().zip(&assign) {
            sums[a as usize] += v as f64;
            counts[a as usize] += 1;
        }
        let mut movement = 0.0f64;
        for c in 0..k {
            if counts[c] > 0 {
                let updated = (sums[c] / counts[c] as f64) as f32;
                movement = movement.max((updated as f64 - centroids[c] as f64).abs());
                centroids[c] = updated;
            }
        }
        if movement < MIN_MOVEMENT {
            break;
        }
    }
    best.expect("at least one iteration")
}

/// k-means++ seeding: extend `seeds` to `k` centroids, sampling each new one
/// with probability proportional to squared distance from the nearest chosen.
fn kmeans_pp(values: &[f32], k: usize, mut seeds: Vec<f32>, rng: &mut ChaCha8Rng) -> Vec<f32> {
    if seeds.is_empty() {
        seeds.push(values[rng.random_range(0..values.len())]);
    }
    while seeds.len() < k {
        let d2: Vec<f64> = values.iter().map(|&v| nearest(&seeds, v).1).collect();
        let total: f64 = d2.iter().sum();
        if total == 0.0 {
            // fewer distinct values than centroids; pad with a duplicate
            seeds.push(seeds[0]);
            continue;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = values.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            if u < *d {
                pick = i;
                break;
            }
            u -= d;
        }
        seeds.push(values[pick]);
    }
    seeds
}

/// Means of `k` equal-count chunks of the sorted values.
fn quantile_init(values: &[f32], k: usize) -> Vec<f32> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let n = sorted.len();
    (0..k)
        .map(|c| {
            let (lo, hi) = (c * n / k, ((c + 1) * n / k).max(c * n / k + 1).min(n));
            (sorted[lo..hi].iter().map(|&v| v as f64).sum::<f64>() / (hi - lo) as f64) as f32
        })
        .collect()
}

fn fit_group(values: &[f32], bits: u8) -> Fit {
    let k = 1usize << bits;
    let distinct: BTreeSet<u32> = values.iter().map(|v| v.to_bits()).collect();
    if distinct.len() <= k {
        let mut codebook: Vec<f32> = distinct.into_iter().map(f32::from_bits).collect();
        while codebook.len() < k {
            codebook.push(codebook[codebook.len() - 1]);
        }
        let indices: Vec<u8> =
            values.iter().map(|v| codebook.iter().position(|c| c.to_bits() == v.to_bits()).unwrap() as u8).collect();
        return Fit { codebook, indices, mse: 0.0 };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(KMEANS_SEED);
    let mut candidates = vec![kmeans_pp(values, k, Vec::new(), &mut rng), quantile_init(values, k)];
    if bits == 4 {
        // nested start: the 2-bit solution plus k-means++ continuation, which
        // guarantees the 4-bit fit is no worse than the 2-bit one
        let coarse = fit_group(values, 2);
        candidates.push(kmeans_pp(values, k, coarse.codebook, &mut rng));
    }
    candidates.into_iter().map(|init| lloyd(values, init)).reduce(|a, b| if b.mse < a.mse { b } else { a }).unwrap()
}

/// Palettize one group with a `2^bits`-entry codebook. Returns the codebook and
/// one unpacked index per value.
pub fn palettize_group(values: &[f32], bits: u8) -> Result<(Vec<f32>, Vec<u8>), QuantError> {
    if values.is_empty() {
        return Err(QuantError::EmptyGroup);
    }
    if bits != 2 && bits != 4 {
        return Err(QuantError::InvalidBits(bits));
    }
    let fit = fit_group(values, bits);
    Ok((fit.codebook, fit.indices))
}

/// Reconstruction MSE of a palettized group against its source values.
pub fn group_mse(values: &[f32], codebook: &[f32], indices: &[u8]) -> f64 {
    mse_of(values, codebook, indices)
}

pub fn group_count(len: usize, group_size: usize) -> usize {
    len.div_ceil(group_size)
}

/// Per-group mean absolute weight, the planner's sensitivity proxy.
pub fn group_sensitivities(t: &Tensor, group_size: usize) -> Vec<f64> {
    t.data().chunks(group_size).map(|g| g.iter().map(|v| v.abs() as f64).sum::<f64>() / g.len() as f64).collect()
}

/// Give 4 bits to the `round(f * N)` most sensitive groups, `f = (target - 2) / 2`,
/// and 2 bits to the rest. Equal sensitivities go to the lower group index.
pub fn plan_mixed_precision(sensitivities: &[f64], target_avg_bits: f64) -> Result<MixedPrecisionPlan, QuantError> {
    if !(2.0..=4.0).contains(&target_avg_bits) {
        return Err(QuantError::TargetOutOfRange(target_avg_bits));
    }
    let n = sensitivities.len();
    if n == 0 {
        return Err(QuantError::EmptyPlan);
    }
    let wide = (((target_avg_bits - 2.0) / 2.0) * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sensitivities[b].total_cmp(&sensitivities[a]).then(a.cmp(&b)));
    let mut bits = vec![2u8; n];
    for &g in &order[..wide] {
        bits[g] = 4;
    }
    let achieved = bits.iter().map(|&b| b as f64).sum::<f64>() / n as f64;
    Ok(MixedPrecisionPlan { bits, achieved_avg_bits: achieved, target_avg_bits })
}

/// Cut `t` row-major into groups of `group_size` (last may be short) and
/// palettize each at its planned width. Groups are processed in parallel; the
/// result does not depend on scheduling.
pub fn palettize_tensor(
    t: &Tensor,
    group_size: usize,
    plan: &MixedPrecisionPlan,
) -> Result<PalettizedTensor, QuantError> {
    if group_size == 0 {
        return Err(QuantError::ShapeMismatch("group_size must be positive".into()));
    }
    let expected = group_count(t.len(), group_size);
    if plan.bits.len() != expected {
        return Err(QuantError::PlanLengthMismatch { expected, got: plan.bits.len() });
    }
    let max_bits = plan.bits.iter().copied().max().unwrap_or(2);
    if group_size < 1 << max_bits {
        log::warn!("group size {group_size} is smaller than the {}-entry codebook", 1 << max_bits);
    }
    let groups = t
        .data()
        .par_chunks(group_size)
        .zip(plan.bits.par_iter())
        .map(|(values, &bits)| {
            let (codebook, indices) = palettize_group(values, bits)?;
            Ok(PalettizedGroup { bits, codebook, packed: pack_indices(&indices, bits), len: values.len() })
        })
        .collect::<Result<Vec<_>, QuantError>>()?;
    Ok(PalettizedTensor { original_shape: t.shape().to_vec(), group_size, groups })
}

impl PalettizedTensor {
    pub fn element_count(&self) -> usize {
        self.original_shape.iter().product()
    }

    /// Mean index bits per weight, weighted by group length.
    pub fn avg_bits(&self) -> f64 {
        let total: usize = self.groups.iter().map(|g| g.len).sum();
        self.groups.iter().map(|g| g.bits as f64 * g.len as f64).sum::<f64>() / total.max(1) as f64
    }

    /// Bits spent on codebooks (32 per entry).
    pub fn codebook_bits(&self) -> u64 {
        self.groups.iter().map(|g| 32 * g.codebook.len() as u64).sum()
    }

    fn validate(&self) -> Result<(), QuantError> {
        let n = self.element_count();
        if self.group_size == 0 || self.groups.len() != group_count(n, self.group_size) {
            return Err(QuantError::CorruptIndices(format!(
                "{} groups for {n} elements at group size {}",
                self.groups.len(),
                self.group_size
            )));
        }
        for (i, g) in self.groups.iter().enumerate() {
            let want_len = (n - i * self.group_size).min(self.group_size);
            if g.bits != 2 && g.bits != 4 {
                return Err(QuantError::CorruptIndices(format!("group {i} has {} bits", g.bits)));
            }
            if g.len != want_len {
                return Err(QuantError::CorruptIndices(format!("group {i} has {} values, expected {want_len}", g.len)));
            }
            if g.codebook.len() != 1 << g.bits {
                return Err(QuantError::CorruptIndices(format!("group {i} codebook has {} entries", g.codebook.len())));
            }
            if g.packed.len() != (g.len * g.bits as usize).div_ceil(8) {
                return Err(QuantError::CorruptIndices(format!("group {i} index payload is {} bytes", g.packed.len())));
            }
            if g.codebook.iter().any(|c| !c.is_finite()) {
                return Err(QuantError::CorruptIndices(format!("group {i} codebook is not finite")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(UNLQ_MAGIC);
        w.u32(QUANT_VERSION);
        w.u32(self.group_size as u32);
        w.u8(self.original_shape.len() as u8);
        for &d in &self.original_shape {
            w.u64(d as u64);
        }
        w.u64(self.groups.len() as u64);
        for g in &self.groups {
            w.u8(g.bits);
            w.f32s(&g.codebook);
            w.bytes(&g.packed);
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, QuantError> {
        let mut r = ByteReader::new(buf);
        let p = read_palettized(&mut r)?;
        if r.remaining() != 0 {
            return Err(QuantError::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        Ok(p)
    }
}

fn read_palettized(r: &mut ByteReader<'_>) -> Result<PalettizedTensor, QuantError> {
    let bad = QuantError::Malformed;
    if r.take(4).map_err(bad)? != UNLQ_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u32().map_err(bad)?;
    if version != QUANT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let group_size = r.u32().map_err(bad)? as usize;
    let rank = r.u8().map_err(bad)? as usize;
    let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>().map_err(bad)?;
    let n: usize = shape.iter().product();
    if group_size == 0 {
        return Err(bad("group size 0".into()));
    }
    let count = r.u64().map_err(bad)? as usize;
    if count != group_count(n, group_size) {
        return Err(bad(format!("{count} groups for {n} elements")));
    }
    let mut groups = Vec::with_capacity(count);
    for i in 0..count {
        let len = (n - i * group_size).min(group_size);
        let bits = r.u8().map_err(bad)?;
        if bits != 2 && bits != 4 {
            return Err(QuantError::CorruptIndices(format!("group {i} has {bits} bits")));
        }
        let codebook = r.f32s(1 << bits).map_err(bad)?;
        let packed = r.take((len * bits as usize).div_ceil(8)).map_err(bad)?.to_vec();
        groups.push(PalettizedGroup { bits, codebook, packed, len });
    }
    let p = PalettizedTensor { original_shape: shape, group_size, groups };
    p.validate()?;
    Ok(p)
}

/// Codebook lookup for every index, restoring the original shape.
pub fn depalettize(p: &PalettizedTensor) -> Result<Tensor, QuantError> {
    p.validate()?;
    let mut data = Vec::with_capacity(p.element_count());
    for g in &p.groups {
        data.extend(g.reconstruct());
    }
    Tensor::new(p.original_shape.clone(), data).map_err(|e| QuantError::CorruptIndices(e.to_string()))
}

pub fn quantization_report(original: &Tensor, p: &PalettizedTensor) -> Result<QuantReport, QuantError> {
    if original.shape() != p.original_shape.as_slice() {
        return Err(QuantError::ShapeMismatch(format!(
            "original {:?} vs palettized {:?}",
            original.shape(),
            p.original_shape
        )));
    }
    let recon = depalettize(p)?;
    let n = original.len().max(1) as f64;
    let (mut sq, mut max_abs) = (0.0f64, 0.0f64);
    for (a, b) in original.data().iter().zip(recon.data()) {
        let e = (*a as f64 - *b as f64).abs();
        sq += e * e;
        max_abs = max_abs.max(e);
    }
    let avg_bits = p.avg_bits();
    let overhead = p.codebook_bits() as f64 / n;
    Ok(QuantReport { mse: sq / n, max_abs_err: max_abs, avg_bits, compression_ratio: 32.0 / (avg_bits + overhead) })
}

pub fn save_palettized(p: &PalettizedTensor, path: impl AsRef<Path>) -> Result<(), QuantError> {
    fs::write(path, p.to_bytes())?;
    Ok(())
}

pub fn load_palettized(path: impl AsRef<Path>) -> Result<PalettizedTensor, QuantError> {
    PalettizedTensor::from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    Raw(Tensor),
    Palettized(PalettizedTensor),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizeOptions {
    pub target_avg_bits: f64,
    pub group_size: usize,
    pub include_embeddings: bool,
}

impl Default for QuantizeOptions {
    fn default() -> Self {
        QuantizeOptions { target_avg_bits: 3.5, group_size: DEFAULT_GROUP_SIZE, include_embeddings: false }
    }
}

/// A checkpoint whose weight matrices are palettized; norm vectors stay raw.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCheckpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, StoredTensor>,
    pub plan: MixedPrecisionPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantizedSummary {
    pub model_id: String,
    pub palettized_tensors: usize,
    pub raw_tensors: usize,
    pub groups: usize,
    pub groups_4bit: usize,
    pub groups_2bit: usize,
    pub avg_bits: f64,
    pub avg_bits_tolerance: f64,
    pub payload_bits_per_weight: f64,
    pub compression_ratio: f64,
}

fn palettizable(name: &str, t: &Tensor, include_embeddings: bool) -> bool {
    t.rank() == 2 && (include_embeddings || name != "embed.weight")
}

/// Palettize all weight matrices of `ckpt` under one plan ranked across every
/// group of every selected tensor.
pub fn quantize_checkpoint(ckpt: &Checkpoint, opts: &QuantizeOptions) -> Result<QuantizedCheckpoint, QuantError> {
    let selected: Vec<(&String, &Tensor)> =
        ckpt.tensors().iter().filter(|(n, t)| palettizable(n, t, opts.include_embeddings)).collect();
    let sensitivities: Vec<f64> = selected.iter().flat_map(|(_, t)| group_sensitivities(t, opts.group_size)).collect();
    let plan = plan_mixed_precision(&sensitivities, opts.target_avg_bits)?;
    let mut tensors = BTreeMap::new();
    let mut cursor = 0;
    for (name, t) in &selected {
        let n = group_count(t.len(), opts.group_size);
        let sub = MixedPrecisionPlan {
            bits: plan.bits[cursor..cursor + n].to_vec(),
            achieved_avg_bits: plan.achieved_avg_bits,
            target_avg_bits: plan.target_avg_bits,
        };
        cursor += n;
        tensors.insert((*name).clone(), StoredTensor::Palettized(palettize_tensor(t, opts.group_size, &sub)?));
    }
    for (name, t) in ckpt.tensors() {
        tensors.entry(name.clone()).or_insert_with(|| StoredTensor::Raw(t.clone()));
    }
    Ok(QuantizedCheckpoint { config: ckpt.config().clone(), tensors, plan })
}

impl QuantizedCheckpoint {
    pub fn dequantize(&self) -> Result<Checkpoint, QuantError> {
        let tensors = self
            .tensors
            .iter()
            .map(|(name, st)| {
                let t = match st {
                    StoredTensor::Raw(t) => t.clone(),
                    StoredTensor::Palettized(p) => depalettize(p)?,
                };
                Ok((name.clone(), t))
            })
            .collect::<Result<BTreeMap<_, _>, QuantError>>()?;
        Ok(Checkpoint::new(self.config.clone(), tensors)?)
    }

    pub fn summary(&self) -> QuantizedSummary {
        let pals: Vec<&PalettizedTensor> = self
            .tensors
            .values()
            .filter_map(|s| match s {
                StoredTensor::Palettized(p) => Some(p),
                StoredTensor::Raw(_) => None,
            })
            .collect();
        let groups: Vec<&PalettizedGroup> = pals.iter().flat_map(|p| &p.groups).collect();
        let weights: usize = groups.iter().map(|g| g.len).sum();
        let index_bits: f64 = groups.iter().map(|g| g.bits as f64 * g.len as f64).sum();
        let codebook_bits: u64 = pals.iter().map(|p| p.codebook_bits()).sum();
        let payload = index_bits / weights.max(1) as f64;
        QuantizedSummary {
            model_id: self.config.model_id.clone(),
            palettized_tensors: pals.len(),
            raw_tensors: self.tensors.len() - pals.len(),
            groups: groups.len(),
            groups_4bit: groups.iter().filter(|g| g.bits == 4).count(),
            groups_2bit: groups.iter().filter(|g| g.bits == 2).count(),
            avg_bits: payload,
            avg_bits_tolerance: 2.0 / groups.len().max(1) as f64,
            payload_bits_per_weight: payload,
            compression_ratio: 32.0 / (payload + codebook_bits as f64 / weights.max(1) as f64),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(UNQM_MAGIC);
        w.u32(QUANT_VERSION);
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        w.u64(cfg.len() as u64);
        w.bytes(&cfg);
        w.f32s(&[self.plan.target_avg_bits as f32]);
        w.u32(self.tensors.len() as u32);
        for (name, st) in &self.tensors {
            w.u16(name.len() as u16);
            w.bytes(name.as_bytes());
            match st {
                StoredTensor::Raw(t) => {
                    w.u8(0);
                    w.u8(t.rank() as u8);
                    for &d in t.shape() {
                        w.u64(d as u64);
                    }
                    w.f32s(t.data());
                }
                StoredTensor::Palettized(p) => {
                    w.u8(1);
                    w.bytes(&p.to_bytes());
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, QuantError> {
        let bad = QuantError::Malformed;
        let mut r = ByteReader::new(buf);
        if r.take(4).map_err(bad)? != UNQM_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.u32().map_err(bad)?;
        if version != QUANT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = r.u64().map_err(bad)? as usize;
        let config: ModelConfig =
            serde_json::from_slice(r.take(len).map_err(bad)?).map_err(|e| bad(format!("config: {e}")))?;
        let target = r.f32s(1).map_err(bad)?[0] as f64;
        let count = r.u32().map_err(bad)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16().map_err(bad)? as usize;
            let name = String::from_utf8(r.take(name_len).map_err(bad)?.to_vec())
                .map_err(|_| bad("tensor name is not UTF-8".into()))?;
            let st = match r.u8().map_err(bad)? {
                0 => {
                    let rank = r.u8().map_err(bad)? as usize;
                    let shape =
                        (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>().map_err(bad)?;
                    let data = r.f32s(shape.iter().product()).map_err(bad)?;
                    StoredTensor::Raw(Tensor::new(shape, data).expect("sized"))
                }
                1 => StoredTensor::Palettized(read_palettized(&mut r)?),
                k => return Err(bad(format!("unknown entry kind {k}"))),
            };
            tensors.insert(name, st);
        }
        if r.remaining() != 0 {
            return Err(bad(format!("{} trailing bytes", r.remaining())));
        }
        let bits: Vec<u8> = tensors
            .values()
            .filter_map(|s| match s {
                StoredTensor::Palettized(p) => Some(p.groups.iter().map(|g| g.bits)),
                StoredTensor::Raw(_) => None,
            })
            .flatten()
            .collect();
        let achieved = bits.iter().map(|&b| b as f64).sum::<f64>() / bits.len().max(1) as f64;
        let plan = MixedPrecisionPlan { bits, achieved_avg_bits: achieved, target_avg_bits: target };
        Ok(QuantizedCheckpoint { config, tensors, plan })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), QuantError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, QuantError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
