use rand::Rng;

use super::layers::Linear;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::{matmul, matmul_at, matmul_bt, Real};
use crate::tensor::Tensor;

pub const ROPE_BASE: f64 = 10_000.0;

/// Cosine/sine of `position * base^(-2i / head_dim)` for each rotated pair.
pub struct RopeTable<T> {
    cos: Vec<T>,
    sin: Vec<T>,
    half: usize,
}

impl<T: Real> RopeTable<T> {
    pub fn new(positions: &[T], head_dim: usize, base: f64) -> Result<Self> {
        if head_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "rotary embedding needs an even head dimension, got {head_dim}"
            )));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &m in positions {
            for i in 0..half {
                let theta = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = m.f64() * theta;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        Ok(Self { cos, sin, half })
    }

    /// Rotates each `(2i, 2i+1)` pair of a `frames x head_dim` block in place.
    /// `inverse` rotates by the negated angle (the transpose).
    pub fn rotate(&self, x: &mut [T], inverse: bool) {
        let d = 2 * self.half;
        for (f, row) in x.chunks_exact_mut(d).enumerate() {
            for i in 0..self.half {
                let c = self.cos[f * self.half + i];
                let s = if inverse {
                    -self.sin[f * self.half + i]
                } else {
                    self.sin[f * self.half + i]
                };
                let (a, b) = (row[2 * i], row[2 * i + 1]);
                row[2 * i] = a * c - b * s;
                row[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

/// Applies rotary position embedding to a `heads x frames x head_dim` tensor.
pub fn rope_apply<T: Real>(q: &Tensor<T>, positions: &[T]) -> Result<Tensor<T>> {
    let shape = q.shape();
    if shape.len() != 3 || shape[1] != positions.len() {
        return Err(Error::ShapeMismatch(format!(
            "rope expects heads x {} x head_dim, got {shape:?}",
            positions.len()
        )));
    }
    let table = RopeTable::new(positions, shape[2], ROPE_BASE)?;
    let mut out = q.clone();
    for head in out.data_mut().chunks_exact_mut(shape[1] * shape[2]) {
        table.rotate(head, false);
    }
    Ok(out)
}

/// Multi-head self-attention with rotary queries/keys and a key padding mask.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub dim: usize,
    pub heads: usize,
}

pub struct AttentionCache<T> {
    input: Vec<T>,
    /// Per head, rotated `frames x head_dim`.
    q: Vec<Vec<T>>,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// Per head, `frames x frames` softmax weights.
    probs: Vec<Vec<T>>,
    context: Vec<T>,
}

impl SelfAttention {
    pub(crate) fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, false, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, false, rng),
            dim,
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &[T],
        mask: &[bool],
        rope: &RopeTable<T>,
    ) -> (Vec<T>, AttentionCache<T>) {
        let frames = mask.len();
        let (d, dh) = (self.dim, self.head_dim());
        let qkv = self.qkv.forward(p, x, frames);
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut context = vec![T::zero(); frames * d];
        let mut cache = AttentionCache {
            input: x.to_vec(),
            q: Vec::with_capacity(self.heads),
            k: Vec::with_capacity(self.heads),
            v: Vec::with_capacity(self.heads),
            probs: Vec::with_capacity(self.heads),
            context: Vec::new(),
        };

        for h in 0..self.heads {
            let gather = |part: usize| -> Vec<T> {
                let mut out = Vec::with_capacity(frames * dh);
                for f in 0..frames {
                    let start = f * 3 * d + part * d + h * dh;
                    out.extend_from_slice(&qkv[start..start + dh]);
                }
                out
            };
            let (mut q, mut k, v) = (gather(0), gather(1), gather(2));
            rope.rotate(&mut q, false);
            rope.rotate(&mut k, false);

            let mut scores = vec![T::zero(); frames * frames];
            matmul_bt(frames, dh, frames, &q, &k, T::zero(), &mut scores);
            for row in scores.chunks_exact_mut(frames) {
                softmax_masked(row, mask, scale);
            }
            let mut ctx = vec![T::zero(); frames * dh];
            matmul(frames, frames, dh, &scores, &v, T::zero(), &mut ctx);
            for f in 0..frames {
                context[f * d + h * dh..f * d + (h + 1) * dh]
                    .copy_from_slice(&ctx[f * dh..(f + 1) * dh]);
            }
            cache.q.push(q);
            cache.k.push(k);
            cache.v.push(v);
            cache.probs.push(scores);
        }

        let y = self.out.forward(p, &context, frames);
        cache.context = context;
        (y, cache)
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &AttentionCache<T>,
        gy: &[T],
        rope: &RopeTable<T>,
        grads: &mut ParamStore<T>,
    ) -> Vec<T> {
        let frames = cache.context.len() / self.dim;
        let (d, dh) = (self.dim, self.head_dim());
        let scale = T::one() / T::of(dh as f64).sqrt();
        let g_context = self.out.backward(p, &cache.context, gy, frames, grads);
        let mut g_qkv = vec![T::zero(); frames * 3 * d];

        for h in 0..self.heads {
            let mut g_ctx = Vec::with_capacity(frames * dh);
            for f in 0..frames {
                g_ctx.extend_from_slice(&g_context[f * d + h * dh..f * d + (h + 1) * dh]);
            }
            let probs = &cache.probs[h];
            // d probs = g_ctx * v^T ; d v = probs^T * g_ctx
            let mut g_probs = vec![T::zero(); frames * frames];
            matmul_bt(frames, dh, frames, &g_ctx, &cache.v[h], T::zero(), &mut g_probs);
            let mut g_v = vec![T::zero(); frames * dh];
            matmul_at(frames, frames, dh, probs, &g_ctx, T::zero(), &mut g_v);
            // softmax backward, then the 1/sqrt(dh) scale
            for (gp, pr) in g_probs
                .chunks_exact_mut(frames)
                .zip(probs.chunks_exact(frames))
            {
                let dot: T = gp.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for (g, &pv) in gp.iter_mut().zip(pr) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            let mut g_q = vec![T::zero(); frames * dh];
            matmul(frames, frames, dh, &g_probs, &cache.k[h], T::zero(), &mut g_q);
            let mut g_k = vec![T::zero(); frames * dh];
            matmul_at(frames, frames, dh, &g_probs, &cache.q[h], T::zero(), &mut g_k);
            rope.rotate(&mut g_q, true);
            rope.rotate(&mut g_k, true);

            for f in 0..frames {
                let base = f * 3 * d + h * dh;
                g_qkv[base..base + dh].copy_from_slice(&g_q[f * dh..(f + 1) * dh]);
                g_qkv[base + d..base + d + dh].copy_from_slice(&g_k[f * dh..(f + 1) * dh]);
                g_qkv[base + 2 * d..base + 2 * d + dh]
                    .copy_from_slice(&g_v[f * dh..(f + 1) * dh]);
            }
        }
        self.qkv.backward(p, &cache.input, &g_qkv, frames, grads)
    }
}

/// Scaled softmax over unmasked keys; masked keys get an additive `-inf`
/// bias. A row with no valid key becomes all zeros.
fn softmax_masked<T: Real>(row: &mut [T], mask: &[bool], scale: T) {
    let mut max = T::neg_infinity();
    for (v, &m) in row.iter_mut().zip(mask) {
        *v = if m { *v * scale } else { T::neg_infinity() };
        max = max.max(*v);
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}
