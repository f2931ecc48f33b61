//! Building blocks with hand-written reverse passes.
//!
//! Every layer works on one sequence at a time, laid out row-major as
//! `rows x features` (or `channels x height x width` for the 2-D convolutions).
//! `forward` returns whatever the matching `backward` needs; `backward`
//! accumulates parameter gradients into a store of the same layout and returns
//! the input gradient.

use rand::Rng;

use super::params::{Init, ParamId, ParamStore};
use crate::scalar::{matmul, matmul_at, matmul_bt, Real};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub(crate) fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        zero_init: bool,
        rng: &mut R,
    ) -> Self {
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::FanIn(inputs)
        };
        let weight = store.add(format!("{name}.weight"), &[inputs, outputs], init, rng);
        let bias = store.add(format!("{name}.bias"), &[outputs], Init::Zeros, rng);
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.inputs);
        let b = p.get(self.bias);
        let mut y: Vec<T> = Vec::with_capacity(rows * self.outputs);
        for _ in 0..rows {
            y.extend_from_slice(b);
        }
        matmul(rows, self.inputs, self.outputs, x, p.get(self.weight), T::one(), &mut y);
        y
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &[T],
        gy: &[T],
        rows: usize,
        grads: &mut ParamStore<T>,
    ) -> Vec<T> {
        matmul_at(
            self.inputs,
            rows,
            self.outputs,
            x,
            gy,
            T::one(),
            grads.get_mut(self.weight),
        );
        let gb = grads.get_mut(self.bias);
        for row in gy.chunks_exact(self.outputs) {
            for (g, &v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut gx = vec![T::zero(); rows * self.inputs];
        matmul_bt(rows, self.outputs, self.inputs, gy, p.get(self.weight), T::zero(), &mut gx);
        gx
    }
}

/// Per-row normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
}

impl LayerNorm {
    pub(crate) fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), &[dim], Init::Ones, rng),
            bias: store.add(format!("{name}.bias"), &[dim], Init::Zeros, rng),
            dim,
        }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.dim;
        let inv_d = T::one() / T::of(d as f64);
        let (gain, bias) = (p.get(self.gain), p.get(self.bias));
        let rows = x.len() / d;
        let mut y = vec![T::zero(); x.len()];
        let mut normalized = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + T::of(LN_EPS)).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let n = (row[j] - mean) * is;
                normalized[r * d + j] = n;
                y[r * d + j] = n * gain[j] + bias[j];
            }
        }
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &LayerNormCache<T>,
        gy: &[T],
        grads: &mut ParamStore<T>,
    ) -> Vec<T> {
        let d = self.dim;
        let inv_d = T::one() / T::of(d as f64);
        let gain = p.get(self.gain);
        let mut gx = vec![T::zero(); gy.len()];
        let mut g_gain = vec![T::zero(); d];
        let mut g_bias = vec![T::zero(); d];
        let mut gn = vec![T::zero(); d];
        for (r, &is) in cache.inv_std.iter().enumerate() {
            let n = &cache.normalized[r * d..(r + 1) * d];
            let g = &gy[r * d..(r + 1) * d];
            let mut mean_gn = T::zero();
            let mut mean_gn_n = T::zero();
            for j in 0..d {
                g_gain[j] += g[j] * n[j];
                g_bias[j] += g[j];
                gn[j] = g[j] * gain[j];
                mean_gn += gn[j];
                mean_gn_n += gn[j] * n[j];
            }
            mean_gn *= inv_d;
            mean_gn_n *= inv_d;
            for j in 0..d {
                gx[r * d + j] = is * (gn[j] - mean_gn - n[j] * mean_gn_n);
            }
        }
        for (a, b) in grads.get_mut(self.gain).iter_mut().zip(&g_gain) {
            *a += *b;
        }
        for (a, b) in grads.get_mut(self.bias).iter_mut().zip(&g_bias) {
            *a += *b;
        }
        gx
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `x * sigmoid(x)`.
pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward<T: Real>(x: &[T], gy: &[T]) -> Vec<T> {
    x.iter()
        .zip(gy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

/// Gated linear unit over rows of width `2 * half`: `a * sigmoid(b)`.
pub fn glu<T: Real>(x: &[T], half: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(x.len() / 2);
    for row in x.chunks_exact(2 * half) {
        let (a, b) = row.split_at(half);
        y.extend(a.iter().zip(b).map(|(&a, &b)| a * sigmoid(b)));
    }
    y
}

pub fn glu_backward<T: Real>(x: &[T], gy: &[T], half: usize) -> Vec<T> {
    let mut gx = Vec::with_capacity(x.len());
    for (row, g) in x.chunks_exact(2 * half).zip(gy.chunks_exact(half)) {
        let (a, b) = row.split_at(half);
        let start = gx.len();
        gx.resize(start + 2 * half, T::zero());
        for j in 0..half {
            let s = sigmoid(b[j]);
            gx[start + j] = g[j] * s;
            gx[start + half + j] = g[j] * a[j] * s * (T::one() - s);
        }
    }
    gx
}

pub fn leaky_relu<T: Real>(x: &[T], slope: T) -> Vec<T> {
    x.iter()
        .map(|&v| if v > T::zero() { v } else { v * slope })
        .collect()
}

pub fn leaky_relu_backward<T: Real>(x: &[T], gy: &[T], slope: T) -> Vec<T> {
    x.iter()
        .zip(gy)
        .map(|(&v, &g)| if v > T::zero() { g } else { g * slope })
        .collect()
}

/// Zeroes the rows of `x` (width `width`) whose mask flag is false.
pub fn mask_rows<T: Real>(x: &mut [T], mask: &[bool], width: usize) {
    for (row, &m) in x.chunks_exact_mut(width).zip(mask) {
        if !m {
            row.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Zeroes masked frames of a `channels x frames x bins` image.
pub fn mask_image<T: Real>(x: &mut [T], mask: &[bool], bins: usize) {
    let plane = mask.len() * bins;
    for channel in x.chunks_exact_mut(plane) {
        mask_rows(channel, mask, bins);
    }
}

/// Per-channel convolution along the row (time) axis with zero padding.
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl DepthwiseConv1d {
    pub(crate) fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), &[channels, kernel], Init::FanIn(kernel), rng),
            bias: store.add(format!("{name}.bias"), &[channels], Init::Zeros, rng),
            channels,
            kernel,
        }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let (c, k) = (self.channels, self.kernel);
        let rows = x.len() / c;
        let pad = (k / 2) as isize;
        let (w, b) = (p.get(self.weight), p.get(self.bias));
        let mut y = Vec::with_capacity(x.len());
        for _ in 0..rows {
            y.extend_from_slice(b);
        }
        for r in 0..rows as isize {
            for j in 0..k as isize {
                let src = r + j - pad;
                if src < 0 || src >= rows as isize {
                    continue;
                }
                let xs = &x[src as usize * c..(src as usize + 1) * c];
                let ys = &mut y[r as usize * c..(r as usize + 1) * c];
                for ch in 0..c {
                    ys[ch] += w[ch * k + j as usize] * xs[ch];
                }
            }
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &[T],
        gy: &[T],
        grads: &mut ParamStore<T>,
    ) -> Vec<T> {
        let (c, k) = (self.channels, self.kernel);
        let rows = x.len() / c;
        let pad = (k / 2) as isize;
        let w = p.get(self.weight);
        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![T::zero(); c * k];
        let mut gb = vec![T::zero(); c];
        for r in 0..rows as isize {
            let g = &gy[r as usize * c..(r as usize + 1) * c];
            for ch in 0..c {
                gb[ch] += g[ch];
            }
            for j in 0..k as isize {
                let src = r + j - pad;
                if src < 0 || src >= rows as isize {
                    continue;
                }
                let s = src as usize * c;
                for ch in 0..c {
                    gw[ch * k + j as usize] += g[ch] * x[s + ch];
                    gx[s + ch] += g[ch] * w[ch * k + j as usize];
                }
            }
        }
        for (a, b) in grads.get_mut(self.weight).iter_mut().zip(&gw) {
            *a += *b;
        }
        for (a, b) in grads.get_mut(self.bias).iter_mut().zip(&gb) {
            *a += *b;
        }
        gx
    }
}

/// Square-kernel 2-D convolution with same-size zero padding, via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub(crate) fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        zero_init: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let init = if zero_init { Init::Zeros } else { Init::FanIn(fan_in) };
        Self {
            weight: store.add(
                format!("{name}.weight"),
                &[out_channels, in_channels, kernel, kernel],
                init,
                rng,
            ),
            bias: store.add(format!("{name}.bias"), &[out_channels], Init::Zeros, rng),
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// `cols[(c * k + dy) * k + dx][y * width + x] = input[c][y + dy - pad][x + dx - pad]`.
    fn im2col<T: Real>(&self, x: &[T], height: usize, width: usize) -> Vec<T> {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let plane = height * width;
        let mut cols = vec![T::zero(); self.in_channels * k * k * plane];
        for c in 0..self.in_channels {
            let src = &x[c * plane..(c + 1) * plane];
            for dy in 0..k {
                for dx in 0..k {
                    let row = (c * k + dy) * k + dx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let off_x = dx as isize - pad;
                    for y in 0..height {
                        let sy = y as isize + dy as isize - pad;
                        if sy < 0 || sy >= height as isize {
                            continue;
                        }
                        let s_row = &src[sy as usize * width..(sy as usize + 1) * width];
                        let d_row = &mut dst[y * width..(y + 1) * width];
                        let lo = (-off_x).max(0) as usize;
                        let hi = (width as isize - off_x).min(width as isize) as usize;
                        if lo < hi {
                            let s_lo = (lo as isize + off_x) as usize;
                            d_row[lo..hi].copy_from_slice(&s_row[s_lo..s_lo + (hi - lo)]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], height: usize, width: usize) -> Vec<T> {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let plane = height * width;
        let mut x = vec![T::zero(); self.in_channels * plane];
        for c in 0..self.in_channels {
            let dst = &mut x[c * plane..(c + 1) * plane];
            for dy in 0..k {
                for dx in 0..k {
                    let row = (c * k + dy) * k + dx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    let off_x = dx as isize - pad;
                    for y in 0..height {
                        let sy = y as isize + dy as isize - pad;
                        if sy < 0 || sy >= height as isize {
                            continue;
                        }
                        let d_row = &mut dst[sy as usize * width..(sy as usize + 1) * width];
                        let s_row = &src[y * width..(y + 1) * width];
                        let lo = (-off_x).max(0) as usize;
                        let hi = (width as isize - off_x).min(width as isize) as usize;
                        for xx in lo..hi {
                            d_row[(xx as isize + off_x) as usize] += s_row[xx];
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T], height: usize, width: usize) -> Vec<T> {
        let plane = height * width;
        let kk = self.in_channels * self.kernel * self.kernel;
        let cols = self.im2col(x, height, width);
        let b = p.get(self.bias);
        let mut y = vec![T::zero(); self.out_channels * plane];
        for (o, chunk) in y.chunks_exact_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[o]);
        }
        matmul(self.out_channels, kk, plane, p.get(self.weight), &cols, T::one(), &mut y);
        y
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &[T],
        gy: &[T],
        height: usize,
        width: usize,
        grads: &mut ParamStore<T>,
        need_input_grad: bool,
    ) -> Option<Vec<T>> {
        let plane = height * width;
        let kk = self.in_channels * self.kernel * self.kernel;
        let cols = self.im2col(x, height, width);
        matmul_bt(
            self.out_channels,
            plane,
            kk,
            gy,
            &cols,
            T::one(),
            grads.get_mut(self.weight),
        );
        let gb = grads.get_mut(self.bias);
        for (o, chunk) in gy.chunks_exact(plane).enumerate() {
            gb[o] += chunk.iter().copied().sum::<T>();
        }
        if !need_input_grad {
            return None;
        }
        let mut gcols = cols;
        matmul_at(kk, self.out_channels, plane, p.get(self.weight), gy, T::zero(), &mut gcols);
        Some(self.col2im(&gcols, height, width))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central-difference check of `sum(forward(x) * probe)` w.r.t. x.
    fn check_input_grad(
        f: impl Fn(&[f64]) -> Vec<f64>,
        x: &[f64],
        probe: &[f64],
        analytic: &[f64],
    ) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut up = x.to_vec();
            up[i] += h;
            let mut dn = x.to_vec();
            dn[i] -= h;
            let s = |v: Vec<f64>| v.iter().zip(probe).map(|(a, b)| a * b).sum::<f64>();
            let fd = (s(f(&up)) - s(f(&dn))) / (2.0 * h);
            assert!(
                (fd - analytic[i]).abs() < 1e-6 * fd.abs().max(1.0),
                "input {i}: fd {fd} vs {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, false, &mut rng);
        store.get_mut(conv.bias).copy_from_slice(&[0.1, -0.2, 0.3]);
        let (h, w) = (4, 5);
        let x = rand_vec(2 * h * w, &mut rng);
        let y = conv.forward(&store, &x, h, w);
        let wt = store.get(conv.weight);
        for o in 0..3 {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = store.get(conv.bias)[o];
                    for c in 0..2 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (sy, sx) = (yy as isize + dy - 1, xx as isize + dx - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += wt[((o * 2 + c) * 3 + dy as usize) * 3 + dx as usize]
                                    * x[(c * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    assert!((acc - y[(o * h + yy) * w + xx]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "lin", 4, 3, false, &mut rng);
        let ln = LayerNorm::new(&mut store, "ln", 4, &mut rng);
        store.get_mut(ln.gain).copy_from_slice(&[0.5, 1.5, -1.0, 2.0]);
        let dw = DepthwiseConv1d::new(&mut store, "dw", 4, 3, &mut rng);
        let conv = Conv2d::new(&mut store, "conv", 2, 2, 3, false, &mut rng);
        let mut grads = store.zeros_like();

        let x = rand_vec(12, &mut rng);
        let probe = rand_vec(9, &mut rng);
        let gx = lin.backward(&store, &x, &probe, 3, &mut grads);
        check_input_grad(|v| lin.forward(&store, v, 3), &x, &probe, &gx);

        let probe = rand_vec(12, &mut rng);
        let (_, cache) = ln.forward(&store, &x);
        let gx = ln.backward(&store, &cache, &probe, &mut grads);
        check_input_grad(|v| ln.forward(&store, v).0, &x, &probe, &gx);

        let gx = dw.backward(&store, &x, &probe, &mut grads);
        check_input_grad(|v| dw.forward(&store, v), &x, &probe, &gx);

        let gx = silu_backward(&x, &probe);
        check_input_grad(|v| silu(v), &x, &probe, &gx);

        let gx = leaky_relu_backward(&x, &probe, 0.01);
        check_input_grad(|v| leaky_relu(v, 0.01), &x, &probe, &gx);

        let probe6 = rand_vec(6, &mut rng);
        let gx = glu_backward(&x, &probe6, 2);
        check_input_grad(|v| glu(v, 2), &x, &probe6, &gx);

        let img = rand_vec(2 * 3 * 4, &mut rng);
        let probe = rand_vec(2 * 3 * 4, &mut rng);
        let gx = conv
            .backward(&store, &img, &probe, 3, 4, &mut grads, true)
            .unwrap();
        check_input_grad(|v| conv.forward(&store, v, 3, 4), &img, &probe, &gx);
    }

    #[test]
    fn masking_zeroes_whole_frames() {
        let mut x = vec![1.0f32; 2 * 3 * 4];
        mask_image(&mut x, &[true, false, true], 4);
        for c in 0..2 {
            for f in 0..3 {
                for b in 0..4 {
                    let want = if f == 1 { 0.0 } else { 1.0 };
                    assert_eq!(x[(c * 3 + f) * 4 + b], want);
                }
            }
        }
    }
}
