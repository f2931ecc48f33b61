use rand::Rng;

use super::attention::{AttentionCache, RopeTable, SelfAttention};
use super::layers::{
    glu, glu_backward, mask_rows, silu, silu_backward, DepthwiseConv1d, LayerNorm, LayerNormCache,
    Linear,
};
use super::params::ParamStore;
use crate::scalar::Real;

/// Position-wise `Linear -> SiLU -> Linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub struct FeedForwardCache<T> {
    input: Vec<T>,
    hidden: Vec<T>,
    activated: Vec<T>,
}

impl FeedForward {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        mult: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, dim * mult, false, rng),
            down: Linear::new(store, &format!("{name}.down"), dim * mult, dim, false, rng),
        }
    }

    fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T], rows: usize) -> (Vec<T>, FeedForwardCache<T>) {
        let hidden = self.up.forward(p, x, rows);
        let activated = silu(&hidden);
        let y = self.down.forward(p, &activated, rows);
        (
            y,
            FeedForwardCache {
                input: x.to_vec(),
                hidden,
                activated,
            },
        )
    }

    fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &FeedForwardCache<T>,
        gy: &[T],
        rows: usize,
        grads: &mut ParamStore<T>,
    ) -> Vec<T> {
        let g_act = self.down.backward(p, &cache.activated, gy, rows, grads);
        let g_hidden = silu_backward(&cache.hidden, &g_act);
        self.up.backward(p, &cache.input, &g_hidden, rows, grads)
    }
}

/// `Linear(d -> 2d) -> GLU -> depthwise conv -> LayerNorm -> SiLU -> Linear(d -> d)`.
///
/// Masked frames are zeroed ahead of the depthwise convolution so padding never
/// leaks into valid neighbours. Normalization is per frame, which keeps batch
/// items independent.
#[derive(Debug, Clone)]
pub struct ConvModule {
    pub pointwise_in: Linear,
    pub depthwise: DepthwiseConv1d,
    pub norm: LayerNorm,
    pub pointwise_out: Linear,
    dim: usize,
}

pub struct ConvModuleCache<T> {
    input: Vec<T>,
    expanded: Vec<T>,
    gated: Vec<T>,
    norm: LayerNormCache<T>,
    normalized: Vec<T>,
    activated: Vec<T>,
}

impl ConvModule {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            pointwise_in: Linear::new(store, &format!("{name}.pointwise_in"), dim, 2 * dim, false, rng),
            depthwise: DepthwiseConv1d::new(store, &format!("{name}.depthwise"), dim, kernel, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim, rng),
            pointwise_out: Linear::new(store, &format!("{name}.pointwise_out"), dim, dim, false, rng),
            dim,
        }
    }

    fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T], mask: &[bool]) -> (Vec<T>, ConvModuleCache<T>) {
        let rows = mask.len();
        let expanded = self.pointwise_in.forward(p, x, rows);
        let mut gated = glu(&expanded, self.dim);
        mask_rows(&mut gated, mask, self.dim);
        let conv = self.depthwise.forward(p, &gated);
        let (normalized, norm) = self.norm.forward(p, &conv);
        let activated = silu(&normalized);
        let y = self.pointwise_out.forward(p, &activated, rows);
        (
            y,
            ConvModuleCache {
                input: x.to_vec(),
                expanded,
                gated,
                norm,
                normalized,
                activated,
            },
        )
    }

    fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &ConvModuleCache<T>,
        gy: &[T],
        mask: &[bool],
        grads: &mut ParamStore<T>,
    ) -> Vec<T> {
        let rows = mask.len();
        let g_act = self.pointwise_out.backward(p, &cache.activated, gy, rows, grads);
        let g_norm = silu_backward(&cache.normalized, &g_act);
        let g_conv = self.norm.backward(p, &cache.norm, &g_norm, grads);
        let mut g_gated = self.depthwise.backward(p, &cache.gated, &g_conv, grads);
        mask_rows(&mut g_gated, mask, self.dim);
        let g_expanded = glu_backward(&cache.expanded, &g_gated, self.dim);
        self.pointwise_in.backward(p, &cache.input, &g_expanded, rows, grads)
    }
}

/// Macaron conformer block with pre-norm residuals:
/// `FF/2 -> MHSA(RoPE) -> Conv -> FF/2 -> LayerNorm`.
#[derive(Debug, Clone)]
pub struct ConformerBlock {
    pub ff1_norm: LayerNorm,
    pub ff1: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: SelfAttention,
    pub conv_norm: LayerNorm,
    pub conv: ConvModule,
    pub ff2_norm: LayerNorm,
    pub ff2: FeedForward,
    pub out_norm: LayerNorm,
    dim: usize,
}

pub struct ConformerCache<T> {
    ff1_norm: LayerNormCache<T>,
    ff1: FeedForwardCache<T>,
    attn_norm: LayerNormCache<T>,
    attn: AttentionCache<T>,
    conv_norm: LayerNormCache<T>,
    conv: ConvModuleCache<T>,
    ff2_norm: LayerNormCache<T>,
    ff2: FeedForwardCache<T>,
    out_norm: LayerNormCache<T>,
}

impl ConformerBlock {
    pub(crate) fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
        conv_kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ff1_norm: LayerNorm::new(store, &format!("{name}.ff1_norm"), dim, rng),
            ff1: FeedForward::new(store, &format!("{name}.ff1"), dim, ff_mult, rng),
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim, rng),
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            conv_norm: LayerNorm::new(store, &format!("{name}.conv_norm"), dim, rng),
            conv: ConvModule::new(store, &format!("{name}.conv"), dim, conv_kernel, rng),
            ff2_norm: LayerNorm::new(store, &format!("{name}.ff2_norm"), dim, rng),
            ff2: FeedForward::new(store, &format!("{name}.ff2"), dim, ff_mult, rng),
            out_norm: LayerNorm::new(store, &format!("{name}.out_norm"), dim, rng),
            dim,
        }
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &[T],
        mask: &[bool],
        rope: &RopeTable<T>,
    ) -> (Vec<T>, ConformerCache<T>) {
        let rows = mask.len();
        let half = T::of(0.5);

        let (a, ff1_norm) = self.ff1_norm.forward(p, x);
        let (f, ff1) = self.ff1.forward(p, &a, rows);
        let h1: Vec<T> = x.iter().zip(&f).map(|(&x, &f)| x + half * f).collect();

        let (a, attn_norm) = self.attn_norm.forward(p, &h1);
        let (att, attn) = self.attn.forward(p, &a, mask, rope);
        let h2: Vec<T> = h1.iter().zip(&att).map(|(&x, &y)| x + y).collect();

        let (a, conv_norm) = self.conv_norm.forward(p, &h2);
        let (cv, conv) = self.conv.forward(p, &a, mask);
        let h3: Vec<T> = h2.iter().zip(&cv).map(|(&x, &y)| x + y).collect();

        let (a, ff2_norm) = self.ff2_norm.forward(p, &h3);
        let (f, ff2) = self.ff2.forward(p, &a, rows);
        let h4: Vec<T> = h3.iter().zip(&f).map(|(&x, &f)| x + half * f).collect();

        let (y, out_norm) = self.out_norm.forward(p, &h4);
        (
            y,
            ConformerCache {
                ff1_norm,
                ff1,
                attn_norm,
                attn,
                conv_norm,
                conv,
                ff2_norm,
                ff2,
                out_norm,
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &ConformerCache<T>,
        gy: &[T],
        mask: &[bool],
        rope: &RopeTable<T>,
        grads: &mut ParamStore<T>,
    ) -> Vec<T> {
        let rows = mask.len();
        let half = T::of(0.5);
        let add = |acc: &mut Vec<T>, g: Vec<T>, scale: T| {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += scale * b;
            }
        };

        let mut g = self.out_norm.backward(p, &cache.out_norm, gy, grads);

        let gf: Vec<T> = g.iter().map(|&v| half * v).collect();
        let ga = self.ff2.backward(p, &cache.ff2, &gf, rows, grads);
        add(&mut g, self.ff2_norm.backward(p, &cache.ff2_norm, &ga, grads), T::one());

        let ga = self.conv.backward(p, &cache.conv, &g, mask, grads);
        add(&mut g, self.conv_norm.backward(p, &cache.conv_norm, &ga, grads), T::one());

        let ga = self.attn.backward(p, &cache.attn, &g, rope, grads);
        add(&mut g, self.attn_norm.backward(p, &cache.attn_norm, &ga, grads), T::one());

        let gf: Vec<T> = g.iter().map(|&v| half * v).collect();
        let ga = self.ff1.backward(p, &cache.ff1, &gf, rows, grads);
        add(&mut g, self.ff1_norm.backward(p, &cache.ff1_norm, &ga, grads), T::one());
        debug_assert_eq!(g.len(), rows * self.dim);
        g
    }
}
