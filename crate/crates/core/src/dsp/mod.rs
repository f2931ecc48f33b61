//! Waveform and spectrogram processing.
//!
//! The analysis geometry is fixed at 24 kHz, a periodic Hann window of 1024
//! samples and a hop of 256, giving 513 frequency bins and 93.75 frames per
//! second. Mel spectrograms have 128 bins and are natural-log compressed with a
//! magnitude floor of `1e-5`.

mod griffin_lim;
mod mel;
mod resample;
mod stft;
mod wav;

pub use griffin_lim::{logmel_to_audio, GriffinLim, Vocoder};
pub use mel::{audio_to_logmel, build_mel_filterbank, MelFilterbank, MelScale};
pub use resample::resample;
pub use stft::{istft, stft, ComplexSpectrogram, Stft};
pub(crate) use stft::reflect;
pub use wav::{load_wav, save_wav};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const SAMPLE_RATE: u32 = 24_000;
pub const N_FFT: usize = 1024;
pub const HOP: usize = 256;
pub const N_MELS: usize = 128;
/// Magnitude clamp applied before the logarithm.
pub const MEL_FLOOR: f64 = 1e-5;

/// Mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer<T> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Real> AudioBuffer<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("audio sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![T::zero(); len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> T {
        self.samples.iter().map(|&s| s * s).sum()
    }

    pub fn rms(&self) -> T {
        if self.samples.is_empty() {
            return T::zero();
        }
        (self.energy() / T::of(self.samples.len() as f64)).sqrt()
    }

    pub fn peak(&self) -> T {
        self.samples
            .iter()
            .fold(T::zero(), |acc, &s| acc.max(s.abs()))
    }

    pub fn scaled(&self, gain: T) -> Self {
        Self {
            samples: self.samples.iter().map(|&s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Log-mel spectrogram stored frame-major: `values[frame * n_mels + bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram<T> {
    values: Vec<T>,
    n_frames: usize,
    n_mels: usize,
}

impl<T: Real> MelSpectrogram<T> {
    pub fn new(values: Vec<T>, n_frames: usize, n_mels: usize) -> Result<Self> {
        if n_frames == 0 || n_mels == 0 {
            return Err(Error::Empty("mel spectrogram"));
        }
        if values.len() != n_frames * n_mels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {n_frames} x {n_mels} mel",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("mel cell {i}")));
        }
        Ok(Self {
            values,
            n_frames,
            n_mels,
        })
    }

    pub fn filled(value: T, n_frames: usize, n_mels: usize) -> Self {
        Self {
            values: vec![value; n_frames * n_mels],
            n_frames,
            n_mels,
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frame(&self, i: usize) -> &[T] {
        &self.values[i * self.n_mels..(i + 1) * self.n_mels]
    }

    pub fn get(&self, frame: usize, bin: usize) -> T {
        self.values[frame * self.n_mels + bin]
    }

    /// Frames per second at the canonical geometry.
    pub fn frame_rate() -> f64 {
        SAMPLE_RATE as f64 / HOP as f64
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            n_frames: self.n_frames,
            n_mels: self.n_mels,
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n_frames == other.n_frames && self.n_mels == other.n_mels
    }

    /// One line per frame, cells separated by single spaces.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.values.len() * 12);
        for f in 0..self.n_frames {
            let row: Vec<String> = self.frame(f).iter().map(|v| v.to_string()).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    /// Inverse of [`MelSpectrogram::to_text`]; any whitespace separates cells.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut values = Vec::new();
        let (mut n_frames, mut n_mels) = (0, 0);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|c| {
                    c.parse::<f64>()
                        .map(T::of)
                        .map_err(|_| Error::InvalidArgument(format!("mel line {}: `{c}` is not a number", i + 1)))
                })
                .collect::<Result<Vec<T>>>()?;
            if n_frames == 0 {
                n_mels = row.len();
            } else if row.len() != n_mels {
                return Err(Error::ShapeMismatch(format!(
                    "mel line {} has {} cells, expected {n_mels}",
                    i + 1,
                    row.len()
                )));
            }
            values.extend(row);
            n_frames += 1;
        }
        Self::new(values, n_frames, n_mels)
    }
}

/// Number of centered frames for a signal of `len` samples.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len / hop + 1
}
