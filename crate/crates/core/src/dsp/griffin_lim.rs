use rustfft::num_complex::Complex;

use super::{AudioBuffer, ComplexSpectrogram, MelFilterbank, MelSpectrogram, Stft, HOP};
use crate::error::{Error, Result};
use crate::scalar::{matmul_bt, Real};

/// Turns a log-mel spectrogram back into a waveform.
pub trait Vocoder<T: Real> {
    /// `length` is the number of output samples. `phase_hint`, when given,
    /// supplies initial phases for the frames of `mel`.
    fn synthesize(
        &self,
        mel: &MelSpectrogram<T>,
        length: usize,
        phase_hint: Option<&ComplexSpectrogram<T>>,
    ) -> Result<AudioBuffer<T>>;
}

/// Fast Griffin-Lim phase retrieval over a pseudo-inverted mel magnitude.
pub struct GriffinLim<T: Real> {
    stft: Stft<T>,
    pinv: Vec<T>,
    n_mels: usize,
    sample_rate: u32,
    pub iterations: usize,
    pub momentum: T,
}

impl<T: Real> GriffinLim<T> {
    pub const DEFAULT_ITERATIONS: usize = 32;
    pub const DEFAULT_MOMENTUM: f64 = 0.99;

    pub fn new(fb: &MelFilterbank<T>, iterations: usize, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        Ok(Self {
            stft: Stft::new(fb.n_fft(), HOP)?,
            pinv: fb.pseudo_inverse(),
            n_mels: fb.n_mels(),
            sample_rate: fb.sample_rate(),
            iterations,
            momentum: T::of(momentum),
        })
    }

    /// Linear magnitude estimate: `max(0, pinv(fb) * exp(mel))`, frame-major.
    pub fn linear_magnitude(&self, mel: &MelSpectrogram<T>) -> Result<Vec<T>> {
        if mel.n_mels() != self.n_mels {
            return Err(Error::ShapeMismatch(format!(
                "mel has {} bins, filterbank has {}",
                mel.n_mels(),
                self.n_mels
            )));
        }
        if mel.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mel input to vocoder".into()));
        }
        let linear: Vec<T> = mel.values().iter().map(|v| v.exp()).collect();
        let n_bins = self.stft.n_bins();
        let mut mag = vec![T::zero(); mel.n_frames() * n_bins];
        matmul_bt(
            mel.n_frames(),
            self.n_mels,
            n_bins,
            &linear,
            &self.pinv,
            T::zero(),
            &mut mag,
        );
        for m in &mut mag {
            *m = m.max(T::zero());
        }
        Ok(mag)
    }

    /// Phase retrieval for a frame-major magnitude spectrogram.
    pub fn reconstruct(
        &self,
        magnitude: &[T],
        n_frames: usize,
        length: usize,
        phase_hint: Option<&ComplexSpectrogram<T>>,
    ) -> Result<Vec<T>> {
        let n_bins = self.stft.n_bins();
        let unit = Complex::new(T::one(), T::zero());
        let mut angles: Vec<Complex<T>> = match phase_hint {
            None => vec![unit; n_frames * n_bins],
            Some(hint) => {
                if hint.n_frames() != n_frames || hint.n_bins() != n_bins {
                    return Err(Error::ShapeMismatch(format!(
                        "phase hint is {}x{}, magnitude is {n_frames}x{n_bins}",
                        hint.n_frames(),
                        hint.n_bins()
                    )));
                }
                hint.bins()
                    .iter()
                    .map(|c| {
                        let n = c.norm();
                        if n > T::zero() {
                            c / n
                        } else {
                            unit
                        }
                    })
                    .collect()
            }
        };

        let n_fft = self.stft.n_fft();
        let hop = self.stft.hop();
        let compose = |angles: &[Complex<T>]| -> Result<ComplexSpectrogram<T>> {
            let bins = angles
                .iter()
                .zip(magnitude)
                .map(|(a, &m)| a * m)
                .collect();
            ComplexSpectrogram::new(bins, n_frames, n_fft, hop)
        };

        let accel = self.momentum / (T::one() + self.momentum);
        let eps = T::of(1e-16);
        // Inner iterations need a length whose centered analysis has exactly
        // `n_frames` frames.
        let analysis_len = if length / hop + 1 == n_frames {
            length
        } else {
            (n_frames - 1) * hop
        };
        let mut rebuilt: Vec<Complex<T>> = vec![Complex::new(T::zero(), T::zero()); angles.len()];
        for _ in 0..self.iterations {
            let signal = self.stft.inverse(&compose(&angles)?, analysis_len.max(1))?;
            let next = self.stft.forward(&signal)?;
            let next = next.bins();
            for ((a, r), &n) in angles.iter_mut().zip(rebuilt.iter_mut()).zip(next) {
                let v = n - *r * accel;
                *a = v / (v.norm() + eps);
                *r = n;
            }
        }
        self.stft.inverse(&compose(&angles)?, length)
    }
}

impl<T: Real> Vocoder<T> for GriffinLim<T> {
    fn synthesize(
        &self,
        mel: &MelSpectrogram<T>,
        length: usize,
        phase_hint: Option<&ComplexSpectrogram<T>>,
    ) -> Result<AudioBuffer<T>> {
        let mag = self.linear_magnitude(mel)?;
        let samples = self.reconstruct(&mag, mel.n_frames(), length, phase_hint)?;
        AudioBuffer::new(samples, self.sample_rate)
    }
}

/// Griffin-Lim inversion from zero initial phase; output has
/// `(n_frames - 1) * hop` samples.
pub fn logmel_to_audio<T: Real>(
    mel: &MelSpectrogram<T>,
    fb: &MelFilterbank<T>,
    iterations: usize,
) -> Result<AudioBuffer<T>> {
    let gl = GriffinLim::new(fb, iterations, GriffinLim::<T>::DEFAULT_MOMENTUM)?;
    let length = (mel.n_frames() - 1) * HOP;
    gl.synthesize(mel, length, None)
}
