use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{frame_count, AudioBuffer, HOP, N_FFT};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Centered short-time spectrum, frame-major: `bins[frame * n_bins + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram<T> {
    bins: Vec<Complex<T>>,
    n_frames: usize,
    n_fft: usize,
    hop: usize,
}

impl<T: Real> ComplexSpectrogram<T> {
    pub fn new(bins: Vec<Complex<T>>, n_frames: usize, n_fft: usize, hop: usize) -> Result<Self> {
        if n_frames == 0 {
            return Err(Error::Empty("spectrogram has no frames"));
        }
        if bins.len() != n_frames * (n_fft / 2 + 1) {
            return Err(Error::ShapeMismatch(format!(
                "{} bins for {n_frames} frames of a {n_fft}-point transform",
                bins.len()
            )));
        }
        Ok(Self {
            bins,
            n_frames,
            n_fft,
            hop,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> &[Complex<T>] {
        &self.bins
    }

    pub fn bins_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.bins
    }

    pub fn frame(&self, i: usize) -> &[Complex<T>] {
        let n = self.n_bins();
        &self.bins[i * n..(i + 1) * n]
    }

    /// Magnitudes, frame-major.
    pub fn magnitude(&self) -> Vec<T> {
        self.bins.iter().map(|c| c.norm()).collect()
    }
}

/// Reusable STFT analysis/synthesis pair with a periodic Hann window.
pub struct Stft<T: Real> {
    n_fft: usize,
    hop: usize,
    window: Vec<T>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Real> Stft<T> {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        if n_fft < 2 || n_fft % 2 != 0 {
            return Err(Error::InvalidArgument(format!("n_fft must be even, got {n_fft}")));
        }
        if hop == 0 || hop > n_fft {
            return Err(Error::InvalidArgument(format!("hop {hop} outside 1..={n_fft}")));
        }
        let window = (0..n_fft)
            .map(|i| {
                let phase = 2.0 * std::f64::consts::PI * i as f64 / n_fft as f64;
                T::of(0.5 - 0.5 * phase.cos())
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            n_fft,
            hop,
            window,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        })
    }

    /// The 1024/256 geometry used throughout the crate.
    pub fn canonical() -> Self {
        Self::new(N_FFT, HOP).expect("canonical geometry is valid")
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Analysis with `n_fft / 2` samples of reflection padding on both sides.
    pub fn forward(&self, signal: &[T]) -> Result<ComplexSpectrogram<T>> {
        if signal.is_empty() {
            return Err(Error::Empty("stft of an empty buffer"));
        }
        let len = signal.len();
        let pad = self.n_fft / 2;
        let n_frames = frame_count(len, self.hop);
        let n_bins = self.n_bins();
        let mut out = Vec::with_capacity(n_frames * n_bins);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.n_fft];
        let mut scratch =
            vec![Complex::new(T::zero(), T::zero()); self.forward.get_inplace_scratch_len()];
        for f in 0..n_frames {
            let start = (f * self.hop) as isize - pad as isize;
            for (j, slot) in buf.iter_mut().enumerate() {
                let idx = reflect(start + j as isize, len);
                *slot = Complex::new(signal[idx] * self.window[j], T::zero());
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            out.extend_from_slice(&buf[..n_bins]);
        }
        ComplexSpectrogram::new(out, n_frames, self.n_fft, self.hop)
    }

    /// Weighted overlap-add inverse of [`Stft::forward`], trimmed to `length` samples.
    pub fn inverse(&self, spec: &ComplexSpectrogram<T>, length: usize) -> Result<Vec<T>> {
        if spec.n_fft() != self.n_fft || spec.hop() != self.hop {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram geometry {}/{} does not match {}/{}",
                spec.n_fft(),
                spec.hop(),
                self.n_fft,
                self.hop
            )));
        }
        let pad = self.n_fft / 2;
        let n_bins = self.n_bins();
        let total = (spec.n_frames() - 1) * self.hop + self.n_fft;
        let mut acc = vec![T::zero(); total];
        let mut wsum = vec![T::zero(); total];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.n_fft];
        let mut scratch =
            vec![Complex::new(T::zero(), T::zero()); self.inverse.get_inplace_scratch_len()];
        let norm = T::one() / T::of(self.n_fft as f64);

        for f in 0..spec.n_frames() {
            let frame = spec.frame(f);
            buf[0] = Complex::new(frame[0].re, T::zero());
            buf[pad] = Complex::new(frame[n_bins - 1].re, T::zero());
            for k in 1..pad {
                buf[k] = frame[k];
                buf[self.n_fft - k] = frame[k].conj();
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let off = f * self.hop;
            for j in 0..self.n_fft {
                let w = self.window[j];
                acc[off + j] += buf[j].re * norm * w;
                wsum[off + j] += w * w;
            }
        }

        let tiny = T::of(1e-10);
        Ok((0..length)
            .map(|n| {
                let i = n + pad;
                if i < total && wsum[i] > tiny {
                    acc[i] / wsum[i]
                } else {
                    T::zero()
                }
            })
            .collect())
    }
}

/// Mirror an out-of-range index back into `0..len` (edge samples not repeated).
pub(crate) fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

pub fn stft<T: Real>(buf: &AudioBuffer<T>) -> Result<ComplexSpectrogram<T>> {
    Stft::canonical().forward(buf.samples())
}

pub fn istft<T: Real>(
    spec: &ComplexSpectrogram<T>,
    length: usize,
    sample_rate: u32,
) -> Result<AudioBuffer<T>> {
    let samples = Stft::canonical().inverse(spec, length)?;
    AudioBuffer::new(samples, sample_rate)
}
