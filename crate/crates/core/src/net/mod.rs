//! Conformer vector-field estimator `v(x_t | c, t)`.
//!
//! Each batch item is processed on its own: frame-wise fusion of `x_t`, the
//! condition `c` and a sinusoidal embedding of `t`, a stack of conformer blocks
//! with rotary self-attention, a projection back to mel bins, and a 2-D
//! convolutional head over the three-channel image `(projection, x_t, c)`.
//! Gradients come from explicit reverse passes through every layer.

mod attention;
mod conformer;
mod layers;
mod params;

pub use attention::{rope_apply, RopeTable, SelfAttention, ROPE_BASE};
pub use conformer::{ConformerBlock, ConformerCache, ConvModule, FeedForward};
pub use layers::{Conv2d, DepthwiseConv1d, LayerNorm, Linear};
pub use params::{Param, ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::cfm_loss_with_grad;
use crate::scalar::Real;
use layers::{leaky_relu, leaky_relu_backward, mask_image, mask_rows};

/// Highest angular frequency of the time embedding.
const TIME_EMBED_MAX_FREQ: f64 = 1000.0;
const HEAD_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub n_blocks: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub ff_mult: usize,
    pub time_embed_dim: usize,
    pub n_mels: usize,
    pub head_channels: usize,
    pub leaky_slope: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            model_dim: 128,
            n_heads: 4,
            conv_kernel: 7,
            ff_mult: 4,
            time_embed_dim: 64,
            n_mels: crate::dsp::N_MELS,
            head_channels: 32,
            leaky_slope: 0.01,
        }
    }
}

impl EstimatorConfig {
    /// Ten-block depth; other widths keep their defaults.
    pub fn full_depth() -> Self {
        Self {
            n_blocks: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("model.{key}: {why}")));
        if self.n_blocks == 0 {
            return bad("n_blocks", "must be at least 1");
        }
        if self.model_dim == 0 || self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return bad("n_heads", "model_dim must be a positive multiple of n_heads");
        }
        if (self.model_dim / self.n_heads) % 2 != 0 {
            return bad("n_heads", "head dimension must be even for rotary embedding");
        }
        if self.conv_kernel % 2 == 0 {
            return bad("conv_kernel", "must be odd");
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim", "must be positive and even");
        }
        if self.n_mels == 0 || self.head_channels == 0 || self.ff_mult == 0 {
            return bad("n_mels", "n_mels, head_channels and ff_mult must be positive");
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope", "must lie in [0, 1)");
        }
        Ok(())
    }

    /// Stable textual identity used to match checkpoints to configs.
    pub fn fingerprint(&self) -> String {
        format!(
            "blocks={};dim={};heads={};kernel={};ff={};temb={};mels={};head={};slope={}",
            self.n_blocks,
            self.model_dim,
            self.n_heads,
            self.conv_kernel,
            self.ff_mult,
            self.time_embed_dim,
            self.n_mels,
            self.head_channels,
            self.leaky_slope
        )
    }
}

/// `batch x frames x bins` values with a `batch x frames` validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTensor<T> {
    values: Vec<T>,
    mask: Vec<bool>,
    batch: usize,
    frames: usize,
    bins: usize,
}

impl<T: Real> BatchTensor<T> {
    pub fn new(values: Vec<T>, mask: Vec<bool>, batch: usize, frames: usize, bins: usize) -> Result<Self> {
        if values.len() != batch * frames * bins || mask.len() != batch * frames {
            return Err(Error::ShapeMismatch(format!(
                "{} values / {} mask flags for a {batch} x {frames} x {bins} batch",
                values.len(),
                mask.len()
            )));
        }
        Ok(Self {
            values,
            mask,
            batch,
            frames,
            bins,
        })
    }

    /// Fully valid batch.
    pub fn dense(values: Vec<T>, batch: usize, frames: usize, bins: usize) -> Result<Self> {
        Self::new(values, vec![true; batch * frames], batch, frames, bins)
    }

    /// Stacks `frames_i x bins` items, zero-padding to the longest.
    pub fn pad(items: &[&[T]], bins: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("batch has no items"));
        }
        if items.iter().any(|it| it.is_empty() || it.len() % bins != 0) {
            return Err(Error::ShapeMismatch(format!("item length not a multiple of {bins}")));
        }
        let frames = items.iter().map(|it| it.len() / bins).max().unwrap_or(0);
        let mut values = vec![T::zero(); items.len() * frames * bins];
        let mut mask = vec![false; items.len() * frames];
        for (i, it) in items.iter().enumerate() {
            let n = it.len() / bins;
            values[i * frames * bins..i * frames * bins + it.len()].copy_from_slice(it);
            mask[i * frames..i * frames + n].iter_mut().for_each(|m| *m = true);
        }
        Self::new(values, mask, items.len(), frames, bins)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn item(&self, i: usize) -> &[T] {
        let n = self.frames * self.bins;
        &self.values[i * n..(i + 1) * n]
    }

    pub fn item_mask(&self, i: usize) -> &[bool] {
        &self.mask[i * self.frames..(i + 1) * self.frames]
    }

    /// Number of valid frames of item `i`.
    pub fn valid_frames(&self, i: usize) -> usize {
        self.item_mask(i).iter().filter(|&&m| m).count()
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.batch == other.batch
            && self.frames == other.frames
            && self.bins == other.bins
            && self.mask == other.mask
    }
}

/// `[sin(t w_1) .. sin(t w_h), cos(t w_1) .. cos(t w_h)]` with `h = dim / 2`
/// and frequencies spaced geometrically from 1 to 1000.
pub fn time_embed<T: Real>(t: T, dim: usize) -> Result<Vec<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("time embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let freq = |i: usize| {
        if half == 1 {
            1.0
        } else {
            TIME_EMBED_MAX_FREQ.powf(i as f64 / (half - 1) as f64)
        }
    };
    let t = t.f64();
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|i| T::of((t * freq(i)).sin())));
    out.extend((0..half).map(|i| T::of((t * freq(i)).cos())));
    Ok(out)
}

#[derive(Debug, Clone)]
struct Layers {
    input: Linear,
    blocks: Vec<ConformerBlock>,
    output: Linear,
    head_in: Conv2d,
    res: Vec<(Conv2d, Conv2d)>,
    head_out: Conv2d,
}

/// Learnable estimator: configuration, layer wiring and parameter values.
#[derive(Debug, Clone)]
pub struct Estimator<T> {
    config: EstimatorConfig,
    layers: Layers,
    params: ParamStore<T>,
}

struct ResCache<T> {
    input: Vec<T>,
    act_in: Vec<T>,
    mid: Vec<T>,
    act_mid: Vec<T>,
}

struct ItemCache<T> {
    mask: Vec<bool>,
    fused: Vec<T>,
    blocks: Vec<ConformerCache<T>>,
    conformer_out: Vec<T>,
    image: Vec<T>,
    res: Vec<ResCache<T>>,
    last: Vec<T>,
    last_act: Vec<T>,
}

impl<T: Real> Estimator<T> {
    /// Fan-in uniform weights, zero biases, and a zeroed final convolution so
    /// the untrained field is identically zero.
    pub fn new(config: EstimatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let fused = 2 * c.n_mels + c.time_embed_dim;
        let input = Linear::new(&mut store, "input", fused, c.model_dim, false, &mut rng);
        let blocks = (0..c.n_blocks)
            .map(|i| {
                ConformerBlock::new(
                    &mut store,
                    &format!("blocks.{i}"),
                    c.model_dim,
                    c.n_heads,
                    c.ff_mult,
                    c.conv_kernel,
                    &mut rng,
                )
            })
            .collect();
        let output = Linear::new(&mut store, "output", c.model_dim, c.n_mels, false, &mut rng);
        let ch = c.head_channels;
        let head_in = Conv2d::new(&mut store, "head.in", 3, ch, HEAD_KERNEL, false, &mut rng);
        let res = (0..2)
            .map(|i| {
                (
                    Conv2d::new(&mut store, &format!("head.res{i}.conv1"), ch, ch, HEAD_KERNEL, false, &mut rng),
                    Conv2d::new(&mut store, &format!("head.res{i}.conv2"), ch, ch, HEAD_KERNEL, false, &mut rng),
                )
            })
            .collect();
        let head_out = Conv2d::new(&mut store, "head.out", ch, 1, HEAD_KERNEL, true, &mut rng);
        Ok(Self {
            config,
            layers: Layers {
                input,
                blocks,
                output,
                head_in,
                res,
                head_out,
            },
            params: store,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Replaces all parameter values; names and shapes must match.
    pub fn set_params(&mut self, params: ParamStore<T>) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::ShapeMismatch("parameter layout differs from the model".into()));
        }
        self.params = params;
        Ok(())
    }

    /// The same model in another precision.
    pub fn cast<U: Real>(&self) -> Estimator<U> {
        Estimator {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self.params.cast(),
        }
    }

    fn check_inputs(&self, xt: &BatchTensor<T>, c: &BatchTensor<T>, t: &[T]) -> Result<()> {
        if !xt.same_geometry(c) {
            return Err(Error::ShapeMismatch("x_t and condition differ in shape or mask".into()));
        }
        if xt.bins() != self.config.n_mels {
            return Err(Error::ShapeMismatch(format!(
                "{} mel bins, model expects {}",
                xt.bins(),
                self.config.n_mels
            )));
        }
        if t.len() != xt.batch() {
            return Err(Error::ShapeMismatch(format!(
                "{} time values for a batch of {}",
                t.len(),
                xt.batch()
            )));
        }
        if let Some(bad) = t.iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::InvalidArgument(format!("t = {bad} outside [0, 1]")));
        }
        if !self.params.all_finite() {
            return Err(Error::NonFinite("estimator parameters".into()));
        }
        Ok(())
    }

    /// Predicted field, zero on masked frames. `t` holds one time per item.
    pub fn forward(&self, xt: &BatchTensor<T>, c: &BatchTensor<T>, t: &[T]) -> Result<BatchTensor<T>> {
        self.check_inputs(xt, c, t)?;
        let mut out = Vec::with_capacity(xt.values().len());
        for i in 0..xt.batch() {
            let (y, _) = self.forward_item(xt.item(i), c.item(i), t[i], xt.item_mask(i))?;
            out.extend(y);
        }
        BatchTensor::new(out, xt.mask().to_vec(), xt.batch(), xt.frames(), xt.bins())
    }

    /// Masked mean squared error against `target` and its parameter gradient.
    pub fn loss_and_grad(
        &self,
        xt: &BatchTensor<T>,
        c: &BatchTensor<T>,
        t: &[T],
        target: &BatchTensor<T>,
    ) -> Result<(T, ParamStore<T>)> {
        self.check_inputs(xt, c, t)?;
        if !xt.same_geometry(target) {
            return Err(Error::ShapeMismatch("target differs from x_t in shape or mask".into()));
        }
        let mut pred = Vec::with_capacity(xt.values().len());
        let mut caches = Vec::with_capacity(xt.batch());
        for i in 0..xt.batch() {
            let (y, cache) = self.forward_item(xt.item(i), c.item(i), t[i], xt.item_mask(i))?;
            pred.extend(y);
            caches.push(cache);
        }
        let mut g_pred = vec![T::zero(); pred.len()];
        let loss = cfm_loss_with_grad(&pred, target.values(), xt.mask(), Some(&mut g_pred))?;
        let mut grads = self.params.zeros_like();
        let n = xt.frames() * xt.bins();
        for (i, cache) in caches.iter().enumerate() {
            self.backward_item(cache, &g_pred[i * n..(i + 1) * n], &mut grads);
        }
        Ok((loss, grads))
    }

    fn forward_item(&self, xt: &[T], c: &[T], t: T, mask: &[bool]) -> Result<(Vec<T>, ItemCache<T>)> {
        let cfg = &self.config;
        let p = &self.params;
        let (frames, bins) = (mask.len(), cfg.n_mels);
        let head_dim = cfg.model_dim / cfg.n_heads;
        let fused_width = 2 * bins + cfg.time_embed_dim;
        let temb = time_embed(t, cfg.time_embed_dim)?;
        let mut fused = Vec::with_capacity(frames * fused_width);
        for f in 0..frames {
            if mask[f] {
                fused.extend_from_slice(&xt[f * bins..(f + 1) * bins]);
                fused.extend_from_slice(&c[f * bins..(f + 1) * bins]);
            } else {
                fused.extend(std::iter::repeat(T::zero()).take(2 * bins));
            }
            fused.extend_from_slice(&temb);
        }

        let positions: Vec<T> = (0..frames).map(|f| T::of(f as f64)).collect();
        let rope = RopeTable::new(&positions, head_dim, ROPE_BASE)?;
        let mut h = self.layers.input.forward(p, &fused, frames);
        let mut blocks = Vec::with_capacity(self.layers.blocks.len());
        for block in &self.layers.blocks {
            let (next, cache) = block.forward(p, &h, mask, &rope);
            h = next;
            blocks.push(cache);
        }
        let projected = self.layers.output.forward(p, &h, frames);

        let plane = frames * bins;
        let mut image = Vec::with_capacity(3 * plane);
        image.extend_from_slice(&projected);
        image.extend_from_slice(xt);
        image.extend_from_slice(c);
        mask_image(&mut image, mask, bins);

        let slope = T::of(cfg.leaky_slope);
        let mut z = self.layers.head_in.forward(p, &image, frames, bins);
        mask_image(&mut z, mask, bins);
        let mut res = Vec::with_capacity(self.layers.res.len());
        for (conv1, conv2) in &self.layers.res {
            let act_in = leaky_relu(&z, slope);
            let mut mid = conv1.forward(p, &act_in, frames, bins);
            mask_image(&mut mid, mask, bins);
            let act_mid = leaky_relu(&mid, slope);
            let mut delta = conv2.forward(p, &act_mid, frames, bins);
            mask_image(&mut delta, mask, bins);
            let next: Vec<T> = z.iter().zip(&delta).map(|(&a, &b)| a + b).collect();
            res.push(ResCache {
                input: z,
                act_in,
                mid,
                act_mid,
            });
            z = next;
        }
        let last_act = leaky_relu(&z, slope);
        let mut y = self.layers.head_out.forward(p, &last_act, frames, bins);
        mask_image(&mut y, mask, bins);

        Ok((
            y,
            ItemCache {
                mask: mask.to_vec(),
                fused,
                blocks,
                conformer_out: h,
                image,
                res,
                last: z,
                last_act,
            },
        ))
    }

    fn backward_item(&self, cache: &ItemCache<T>, g_out: &[T], grads: &mut ParamStore<T>) {
        let cfg = &self.config;
        let p = &self.params;
        let mask = &cache.mask;
        let (frames, bins) = (mask.len(), cfg.n_mels);
        let slope = T::of(cfg.leaky_slope);

        let mut g = g_out.to_vec();
        mask_image(&mut g, mask, bins);
        let g_act = self
            .layers
            .head_out
            .backward(p, &cache.last_act, &g, frames, bins, grads, true)
            .expect("input gradient requested");
        let mut g_z = leaky_relu_backward(&cache.last, &g_act, slope);

        for ((conv1, conv2), rc) in self.layers.res.iter().zip(&cache.res).rev() {
            let mut g_delta = g_z.clone();
            mask_image(&mut g_delta, mask, bins);
            let g_act_mid = conv2
                .backward(p, &rc.act_mid, &g_delta, frames, bins, grads, true)
                .expect("input gradient requested");
            let mut g_mid = leaky_relu_backward(&rc.mid, &g_act_mid, slope);
            mask_image(&mut g_mid, mask, bins);
            let g_act_in = conv1
                .backward(p, &rc.act_in, &g_mid, frames, bins, grads, true)
                .expect("input gradient requested");
            for (gz, gi) in g_z.iter_mut().zip(leaky_relu_backward(&rc.input, &g_act_in, slope)) {
                *gz += gi;
            }
        }

        mask_image(&mut g_z, mask, bins);
        let g_image = self
            .layers
            .head_in
            .backward(p, &cache.image, &g_z, frames, bins, grads, true)
            .expect("input gradient requested");
        let mut g_proj = g_image[..frames * bins].to_vec();
        mask_rows(&mut g_proj, mask, bins);

        let positions: Vec<T> = (0..frames).map(|f| T::of(f as f64)).collect();
        let rope = RopeTable::new(&positions, cfg.model_dim / cfg.n_heads, ROPE_BASE)
            .expect("head dimension validated at construction");
        let mut g_h = self
            .layers
            .output
            .backward(p, &cache.conformer_out, &g_proj, frames, grads);
        for (block, bc) in self.layers.blocks.iter().zip(&cache.blocks).rev() {
            g_h = block.backward(p, bc, &g_h, mask, &rope, grads);
        }
        self.layers.input.backward(p, &cache.fused, &g_h, frames, grads);
    }
}
