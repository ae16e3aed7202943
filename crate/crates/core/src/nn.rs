//! Numerical building blocks: bias-free linear maps, RMSNorm, RoPE,
//! grouped-query attention and the SwiGLU feed-forward block.
//!
//! Everything here is a pure function of its inputs. Row-level kernels work on
//! slices so the model can call them without building intermediate tensors.

use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{n_heads} query heads cannot be grouped over {n_kv_heads} kv heads")]
    GroupingError { n_heads: usize, n_kv_heads: usize },
    #[error("RoPE needs an even head dimension, got {0}")]
    OddHeadDim(usize),
}

impl From<ShapeError> for NnError {
    fn from(e: ShapeError) -> Self {
        NnError::ShapeMismatch(e.to_string())
    }
}

fn mismatch(msg: impl Into<String>) -> NnError {
    NnError::ShapeMismatch(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionGeometry {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub rope_theta: f32,
}

impl AttentionGeometry {
    pub fn validate(&self, hidden_size: usize) -> Result<(), NnError> {
        if self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(NnError::GroupingError { n_heads: self.n_heads, n_kv_heads: self.n_kv_heads });
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(NnError::OddHeadDim(self.head_dim));
        }
        if self.n_heads * self.head_dim != hidden_size {
            return Err(mismatch(format!(
                "{} heads x {} head_dim != hidden {}",
                self.n_heads, self.head_dim, hidden_size
            )));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y[r] = x[r] . W^T` for each of `rows` rows. `w` is `[out, in]` row-major.
pub fn matmul_wt(x: &[f32], w: &[f32], in_dim: usize, out_dim: usize) -> Vec<f32> {
    debug_assert_eq!(w.len(), in_dim * out_dim);
    let rows = x.len() / in_dim;
    let mut y = vec![0.0f32; rows * out_dim];
    let kernel = |(r, yr): (usize, &mut [f32])| {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for (o, yo) in yr.iter_mut().enumerate() {
            *yo = dot(xr, &w[o * in_dim..(o + 1) * in_dim]);
        }
    };
    // each output element is one sequential dot product, so parallel and
    // serial paths are bitwise identical
    if rows * out_dim * in_dim >= 1 << 18 {
        y.par_chunks_mut(out_dim).enumerate().for_each(kernel);
    } else {
        y.chunks_mut(out_dim).enumerate().for_each(kernel);
    }
    y
}

/// `x . W^T` over the last axis of `x`; `W` is `[out, in]`. There is no bias.
pub fn linear_nobias(x: &Tensor, w: &Tensor) -> Result<Tensor, NnError> {
    if w.rank() != 2 {
        return Err(mismatch(format!("weight must be rank 2, got {:?}", w.shape())));
    }
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    if x.last_dim() != in_dim || x.rank() == 0 {
        return Err(mismatch(format!("input {:?} vs weight {:?}", x.shape(), w.shape())));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    Ok(Tensor::new(shape, matmul_wt(x.data(), w.data(), in_dim, out_dim))?)
}

/// In-place RMSNorm of one vector.
pub fn rms_norm_row(x: &mut [f32], weight: &[f32], eps: f32) {
    let ms = x.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>() / x.len() as f64;
    let denom = (ms + eps as f64).sqrt();
    if denom == 0.0 {
        // all-zero input with eps = 0
        x.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let inv = (1.0 / denom) as f32;
    for (v, w) in x.iter_mut().zip(weight) {
        *v = *v * inv * w;
    }
}

pub fn rms_norm(x: &Tensor, weight: &Tensor, eps: f32) -> Result<Tensor, NnError> {
    let h = x.last_dim();
    if weight.rank() != 1 || weight.len() != h {
        return Err(mismatch(format!("norm weight {:?} vs input {:?}", weight.shape(), x.shape())));
    }
    let mut out = x.clone();
    out.data_mut().chunks_mut(h).for_each(|row| rms_norm_row(row, weight.data(), eps));
    Ok(out)
}

/// Rotate consecutive pairs `(v[2j], v[2j+1])` of one head vector by
/// `pos * theta^(-2j/d)`.
pub fn rope_rotate(v: &mut [f32], pos: usize, theta: f32) {
    let d = v.len();
    for j in 0..d / 2 {
        let freq = (theta as f64).powf(-(2.0 * j as f64) / d as f64);
        let angle = pos as f64 * freq;
        let (sin, cos) = angle.sin_cos();
        let (sin, cos) = (sin as f32, cos as f32);
        let (a, b) = (v[2 * j], v[2 * j + 1]);
        v[2 * j] = a * cos - b * sin;
        v[2 * j + 1] = a * sin + b * cos;
    }
}

fn rope_tensor(x: &mut Tensor, positions: &[usize], theta: f32) {
    let head_dim = x.last_dim();
    let per_pos = x.len() / positions.len().max(1);
    for (t, &pos) in positions.iter().enumerate() {
        for head in x.data_mut()[t * per_pos..(t + 1) * per_pos].chunks_mut(head_dim) {
            rope_rotate(head, pos, theta);
        }
    }
}

/// Apply rotary position embeddings to `q: [T, n_heads, d]` and `k: [T, n_kv_heads, d]`.
pub fn apply_rope(q: &Tensor, k: &Tensor, positions: &[usize], theta: f32) -> Result<(Tensor, Tensor), NnError> {
    if q.rank() != 3 || k.rank() != 3 {
        return Err(mismatch("q and k must be [T, heads, head_dim]"));
    }
    let head_dim = q.shape()[2];
    if !head_dim.is_multiple_of(2) {
        return Err(NnError::OddHeadDim(head_dim));
    }
    if k.shape()[2] != head_dim {
        return Err(mismatch(format!("q head_dim {} vs k head_dim {}", head_dim, k.shape()[2])));
    }
    if q.shape()[0] != positions.len() || k.shape()[0] != positions.len() {
        return Err(mismatch(format!("{} positions for q {:?} and k {:?}", positions.len(), q.shape(), k.shape())));
    }
    let (mut q2, mut k2) = (q.clone(), k.clone());
    rope_tensor(&mut q2, positions, theta);
    rope_tensor(&mut k2, positions, theta);
    Ok((q2, k2))
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

struct AttnDims {
    t: usize,
    s: usize,
    n_heads: usize,
    n_kv: usize,
    d: usize,
}

fn check_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<AttnDims, NnError> {
    if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
        return Err(mismatch("attention inputs must be rank 3"));
    }
    if k.shape() != v.shape() {
        return Err(mismatch(format!("k {:?} vs v {:?}", k.shape(), v.shape())));
    }
    let (t, n_heads, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (s, n_kv) = (k.shape()[0], k.shape()[1]);
    if k.shape()[2] != d {
        return Err(mismatch(format!("q head_dim {d} vs k head_dim {}", k.shape()[2])));
    }
    if n_kv == 0 || n_heads % n_kv != 0 {
        return Err(NnError::GroupingError { n_heads, n_kv_heads: n_kv });
    }
    if t > s {
        return Err(mismatch(format!("{t} queries but only {s} keys")));
    }
    Ok(AttnDims { t, s, n_heads, n_kv, d })
}

/// Grouped-query scaled dot-product attention (reference form).
///
/// `q: [T, n_heads, d]`, `k, v: [S, n_kv_heads, d]`. Query head `h` reads kv head
/// `h / (n_heads / n_kv_heads)`. With `causal`, query `i` sees keys `0..=i + S - T`,
/// i.e. queries are the last `T` positions of the key sequence.
pub fn gqa_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool, scale: Option<f32>) -> Result<Tensor, NnError> {
    let dims = check_attention(q, k, v)?;
    let scale = scale.unwrap_or(1.0 / (dims.d as f32).sqrt());
    let mut out = vec![0.0f32; q.len()];
    attention_rows(q.data(), k.data(), v.data(), &dims, causal, scale, &mut out);
    Ok(Tensor::new(q.shape().to_vec(), out)?)
}

fn attention_rows(q: &[f32], k: &[f32], v: &[f32], dims: &AttnDims, causal: bool, scale: f32, out: &mut [f32]) {
    let AttnDims { t, s, n_heads, n_kv, d } = *dims;
    let group = n_heads / n_kv;
    let mut scores = vec![0.0f32; s];
    for i in 0..t {
        let visible = if causal { i + (s - t) + 1 } else { s };
        for h in 0..n_heads {
            let kvh = h / group;
            let qv = &q[(i * n_heads + h) * d..(i * n_heads + h + 1) * d];
            for (j, sc) in scores[..visible].iter_mut().enumerate() {
                *sc = dot(qv, &k[(j * n_kv + kvh) * d..(j * n_kv + kvh + 1) * d]) * scale;
            }
            softmax_in_place(&mut scores[..visible]);
            let o = &mut out[(i * n_heads + h) * d..(i * n_heads + h + 1) * d];
            o.iter_mut().for_each(|x| *x = 0.0);
            for (j, &p) in scores[..visible].iter().enumerate() {
                let vr = &v[(j * n_kv + kvh) * d..(j * n_kv + kvh + 1) * d];
                for (x, y) in o.iter_mut().zip(vr) {
                    *x += p * y;
                }
            }
        }
    }
}

/// Same contract as [`gqa_attention`], evaluated in key blocks of `block` with an
/// online softmax (running max and normalizer), so no `T x S` score matrix exists.
pub fn gqa_attention_tiled(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    causal: bool,
    scale: Option<f32>,
    block: usize,
) -> Result<Tensor, NnError> {
    let AttnDims { t, s, n_heads, n_kv, d } = check_attention(q, k, v)?;
    let scale = scale.unwrap_or(1.0 / (d as f32).sqrt());
    let block = block.max(1);
    let group = n_heads / n_kv;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0f32; q.len()];
    let mut acc = vec![0.0f32; d];
    for i in 0..t {
        let visible = if causal { i + (s - t) + 1 } else { s };
        for h in 0..n_heads {
            let kvh = h / group;
            let qv = &qd[(i * n_heads + h) * d..(i * n_heads + h + 1) * d];
            let mut running_max = f32::NEG_INFINITY;
            let mut norm = 0.0f32;
            acc.iter_mut().for_each(|x| *x = 0.0);
            for start in (0..visible).step_by(block) {
                let end = (start + block).min(visible);
                let scores: Vec<f32> = (start..end)
                    .map(|j| dot(qv, &kd[(j * n_kv + kvh) * d..(j * n_kv + kvh + 1) * d]) * scale)
                    .collect();
                let block_max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let new_max = running_max.max(block_max);
                let correction = (running_max - new_max).exp();
                norm *= correction;
                acc.iter_mut().for_each(|x| *x *= correction);
                for (off, sc) in scores.iter().enumerate() {
                    let p = (sc - new_max).exp();
                    norm += p;
                    let j = start + off;
                    let vr = &vd[(j * n_kv + kvh) * d..(j * n_kv + kvh + 1) * d];
                    for (x, y) in acc.iter_mut().zip(vr) {
                        *x += p * y;
                    }
                }
                running_max = new_max;
            }
            let o = &mut out[(i * n_heads + h) * d..(i * n_heads + h + 1) * d];
            for (x, a) in o.iter_mut().zip(&acc) {
                *x = a / norm;
            }
        }
    }
    Ok(Tensor::new(q.shape().to_vec(), out)?)
}

/// Attention over flat buffers, used by the model's cached decode path.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_flat(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    t: usize,
    s: usize,
    n_heads: usize,
    n_kv: usize,
    d: usize,
) -> Vec<f32> {
    let dims = AttnDims { t, s, n_heads, n_kv, d };
    let mut out = vec![0.0f32; t * n_heads * d];
    attention_rows(q, k, v, &dims, true, 1.0 / (d as f32).sqrt(), &mut out);
    out
}

#[inline]
pub fn silu(z: f32) -> f32 {
    z / (1.0 + (-z).exp())
}

/// `down( silu(gate(x)) * up(x) )` over flat rows of width `hidden`.
pub fn swiglu_rows(x: &[f32], w_gate: &[f32], w_up: &[f32], w_down: &[f32], hidden: usize, inter: usize) -> Vec<f32> {
    let mut gate = matmul_wt(x, w_gate, hidden, inter);
    let up = matmul_wt(x, w_up, hidden, inter);
    for (g, u) in gate.iter_mut().zip(&up) {
        *g = silu(*g) * u;
    }
    matmul_wt(&gate, w_down, inter, hidden)
}

pub fn swiglu_ffn(x: &Tensor, w_gate: &Tensor, w_up: &Tensor, w_down: &Tensor) -> Result<Tensor, NnError> {
    let h = x.last_dim();
    if w_gate.rank() != 2 || w_up.shape() != w_gate.shape() {
        return Err(mismatch(format!("gate {:?} vs up {:?}", w_gate.shape(), w_up.shape())));
    }
    let f = w_gate.shape()[0];
    if w_gate.shape()[1] != h || w_down.shape() != [h, f] {
        return Err(mismatch(format!("x {:?}, gate {:?}, down {:?}", x.shape(), w_gate.shape(), w_down.shape())));
    }
    Ok(Tensor::new(x.shape().to_vec(), swiglu_rows(x.data(), w_gate.data(), w_up.data(), w_down.data(), h, f))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let x = t(&[2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]);
        assert_eq!(linear_nobias(&x, &w).unwrap().data(), &[3.0, 2.0]);

        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let x = Tensor::randn(&[4, 3], 1.0, 1);
        assert_eq!(linear_nobias(&x, &eye).unwrap(), x);
        let z = Tensor::zeros(&[4, 3]);
        assert_eq!(linear_nobias(&z, &eye).unwrap(), z);

        let bad = Tensor::zeros(&[2, 4]);
        assert!(matches!(linear_nobias(&x, &bad), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn rms_norm_examples() {
        let out = rms_norm(&t(&[2], &[3.0, 4.0]), &t(&[2], &[1.0, 1.0]), 0.0).unwrap();
        // rms = sqrt(12.5)
        assert!((out.data()[0] - 0.848_528_1).abs() < 1e-5);
        assert!((out.data()[1] - 1.131_370_8).abs() < 1e-5);

        let ones = Tensor::filled(&[8], 1.0);
        let y = rms_norm(&ones, &ones, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-5));

        let z = Tensor::zeros(&[2, 8]);
        assert_eq!(rms_norm(&z, &ones, 1e-5).unwrap(), z);
        assert_eq!(rms_norm(&z, &ones, 0.0).unwrap(), z);

        assert!(rms_norm(&z, &Tensor::zeros(&[7]), 1e-5).is_err());
    }

    #[test]
    fn rope_examples() {
        let q = t(&[1, 1, 2], &[1.0, 0.0]);
        let (q1, _) = apply_rope(&q, &q, &[1], 10000.0).unwrap();
        assert!((q1.data()[0] - 0.540_302_3).abs() < 1e-6);
        assert!((q1.data()[1] - 0.841_470_96).abs() < 1e-6);

        let q = Tensor::randn(&[1, 2, 4], 1.0, 3);
        let k = Tensor::randn(&[1, 1, 4], 1.0, 4);
        let (q0, k0) = apply_rope(&q, &k, &[0], 10000.0).unwrap();
        assert_eq!((q0, k0), (q.clone(), k.clone()));

        let odd = Tensor::zeros(&[1, 1, 3]);
        assert_eq!(apply_rope(&odd, &odd, &[0], 1e4), Err(NnError::OddHeadDim(3)));
        assert!(apply_rope(&q, &k, &[0, 1], 1e4).is_err());
    }

    #[test]
    fn attention_single_key_returns_v() {
        let q = Tensor::randn(&[1, 2, 4], 1.0, 1);
        let k = Tensor::randn(&[1, 1, 4], 1.0, 2);
        let v = Tensor::randn(&[1, 1, 4], 1.0, 3);
        let out = gqa_attention(&q, &k, &v, true, None).unwrap();
        for h in 0..2 {
            assert_eq!(&out.data()[h * 4..h * 4 + 4], v.data());
        }
    }

    #[test]
    fn identical_keys_give_mean_of_visible_values() {
        let (s, d) = (5, 4);
        let q = Tensor::randn(&[s, 2, d], 1.0, 1);
        let key_row = Tensor::randn(&[d], 1.0, 2);
        let k = Tensor::new(vec![s, 1, d], key_row.data().repeat(s)).unwrap();
        let v = Tensor::randn(&[s, 1, d], 1.0, 3);
        let out = gqa_attention(&q, &k, &v, true, None).unwrap();
        for i in 0..s {
            for c in 0..d {
                let mean: f32 = (0..=i).map(|j| v.data()[j * d + c]).sum::<f32>() / (i + 1) as f32;
                for h in 0..2 {
                    assert!((out.data()[(i * 2 + h) * d + c] - mean).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn attention_grouping_errors() {
        let q = Tensor::zeros(&[1, 3, 4]);
        let kv = Tensor::zeros(&[1, 2, 4]);
        assert_eq!(gqa_attention(&q, &kv, &kv, true, None), Err(NnError::GroupingError { n_heads: 3, n_kv_heads: 2 }));
        let q = Tensor::zeros(&[1, 4, 4]);
        let v = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(gqa_attention(&q, &kv, &v, true, None), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn geometry_validation() {
        let g = AttentionGeometry { n_heads: 32, n_kv_heads: 8, head_dim: 64, rope_theta: 1e4 };
        assert!(g.validate(2048).is_ok());
        assert_eq!(g.group_size(), 4);
        assert!(g.validate(1024).is_err());
        let g = AttentionGeometry { n_kv_heads: 5, ..g };
        assert!(matches!(g.validate(2048), Err(NnError::GroupingError { .. })));
    }

    #[test]
    fn swiglu_examples() {
        let one = t(&[1, 1], &[1.0]);
        let y = swiglu_ffn(&t(&[1], &[1.0]), &one, &one, &one).unwrap();
        // silu(1) = 1 / (1 + e^-1)
        assert!((y.data()[0] - 0.731_058_6).abs() < 1e-6);

        let (h, f) = (8, 12);
        let wg = Tensor::randn(&[f, h], 1.0, 1);
        let wu = Tensor::randn(&[f, h], 1.0, 2);
        let wd = Tensor::randn(&[h, f], 1.0, 3);
        let z = Tensor::zeros(&[3, h]);
        assert_eq!(swiglu_ffn(&z, &wg, &wu, &wd).unwrap(), z);
        assert!(swiglu_ffn(&z, &wg, &wu, &wg).is_err());
    }

    #[test]
    fn swiglu_table_sizes_shape() {
        // hidden 2048 -> intermediate 5632 -> hidden 2048
        let (h, f) = (2048, 5632);
        let x = Tensor::randn(&[1, h], 1.0, 1);
        let wg = Tensor::zeros(&[f, h]);
        let wd = Tensor::zeros(&[h, f]);
        let y = swiglu_ffn(&x, &wg, &wg, &wd).unwrap();
        assert_eq!(y.shape(), &[1, h]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rope_preserves_pair_norms(seed in 0u64..1000, pos in 0usize..4096) {
            let mut v = Tensor::randn(&[16], 1.0, seed).into_data();
            let before: Vec<f32> = v.chunks(2).map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt()).collect();
            rope_rotate(&mut v, pos, 10000.0);
            for (p, n) in v.chunks(2).zip(before) {
                prop_assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - n).abs() < 1e-5 * n.max(1.0));
            }
        }

        #[test]
        fn rms_norm_scale_invariant(seed in 0u64..1000, c in 0.01f32..100.0) {
            let x = Tensor::randn(&[2, 16], 1.0, seed);
            let w = Tensor::randn(&[16], 1.0, seed + 1);
            let mut scaled = x.clone();
            scaled.data_mut().iter_mut().for_each(|v| *v *= c);
            let a = rms_norm(&x, &w, 0.0).unwrap();
            let b = rms_norm(&scaled, &w, 0.0).unwrap();
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!((p - q).abs() <= 1e-5 * p.abs().max(1e-3));
            }
        }

        #[test]
        fn attention_outputs_are_convex_combinations(seed in 0u64..1000, t in 1usize..6, extra in 0usize..4) {
            let s = t + extra;
            let q = Tensor::randn(&[t, 4, 8], 1.0, seed);
            let k = Tensor::randn(&[s, 2, 8], 1.0, seed + 1);
            let v = Tensor::randn(&[s, 2, 8], 1.0, seed + 2);
            let out = gqa_attention(&q, &k, &v, true, None).unwrap();
            for i in 0..t {
                for h in 0..4 {
                    let kvh = h / 2;
                    for c in 0..8 {
                        let col = (0..s).map(|j| v.data()[(j * 2 + kvh) * 8 + c]);
                        let (lo, hi) = col.fold((f32::MAX, f32::MIN), |(l, u), x| (l.min(x), u.max(x)));
                        let o = out.data()[(i * 4 + h) * 8 + c];
                        prop_assert!(o >= lo - 1e-5 && o <= hi + 1e-5);
                    }
                }
            }
        }

        #[test]
        fn future_keys_do_not_matter(seed in 0u64..1000, t in 2usize..8) {
            let q = Tensor::randn(&[t, 2, 4], 1.0, seed);
            let k = Tensor::randn(&[t, 1, 4], 1.0, seed + 1);
            let v = Tensor::randn(&[t, 1, 4], 1.0, seed + 2);
            let base = gqa_attention(&q, &k, &v, true, None).unwrap();
            let (mut k2, mut v2) = (k.clone(), v.clone());
            let cut = t / 2;
            k2.data_mut()[cut * 4..].iter_mut().for_each(|x| *x = 0.0);
            v2.data_mut()[cut * 4..].iter_mut().for_each(|x| *x = 0.0);
            let masked = gqa_attention(&q, &k2, &v2, true, None).unwrap();
            // queries before `cut` only see keys before `cut`
            prop_assert_eq!(&base.data()[..cut * 8], &masked.data()[..cut * 8]);
        }

        #[test]
        fn tiled_matches_reference(seed in 0u64..1000, t in 1usize..10, extra in 0usize..6, block in 1usize..5) {
            let s = t + extra;
            let q = Tensor::randn(&[t, 4, 8], 1.0, seed);
            let k = Tensor::randn(&[s, 2, 8], 1.0, seed + 1);
            let v = Tensor::randn(&[s, 2, 8], 1.0, seed + 2);
            for causal in [true, false] {
                let a = gqa_attention(&q, &k, &v, causal, None).unwrap();
                let b = gqa_attention_tiled(&q, &k, &v, causal, None, block).unwrap();
                prop_assert!(a.max_abs_diff(&b) < 1e-5);
            }
        }

        #[test]
        fn ops_are_pure(seed in 0u64..1000) {
            let x = Tensor::randn(&[3, 8], 1.0, seed);
            let w = Tensor::randn(&[5, 8], 1.0, seed + 1);
            prop_assert!(linear_nobias(&x, &w).unwrap().bitwise_eq(&linear_nobias(&x, &w).unwrap()));
        }
    }
}
