//! Inference: condition mel -> Euler integration of the learned field from a
//! Gaussian prior draw -> refined mel -> waveform.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{audio_to_logmel, resample, stft, AudioBuffer, MelFilterbank, MelSpectrogram, Vocoder, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::flow::{euler_integrate, sample_prior, FlowConfig};
use crate::net::{BatchTensor, Estimator};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::train::{Checkpoint, MelNorm};

pub const DEFAULT_MAX_FRAMES: usize = 4096;

/// Where Griffin-Lim starts its phase estimate when inverting a refined mel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseInit {
    /// All bins start at phase 0.
    Zero,
    /// Phases of the distorted input's STFT.
    #[default]
    Condition,
}

/// Trained estimator with the normalization it was trained under.
#[derive(Debug, Clone)]
pub struct Refiner<T> {
    pub estimator: Estimator<T>,
    pub norm: MelNorm,
    pub max_frames: usize,
}

impl<T: Real> Refiner<T> {
    pub fn new(estimator: Estimator<T>, norm: MelNorm) -> Self {
        Self {
            estimator,
            norm,
            max_frames: DEFAULT_MAX_FRAMES,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        Ok(Self::new(ck.estimator()?, ck.norm))
    }

    /// Draws `x0 ~ N(0, I)` shaped like `c` and integrates the field
    /// conditioned on `c` over `flow.n_steps` Euler steps.
    pub fn refine_mel<R: Rng + ?Sized>(
        &self,
        c: &MelSpectrogram<T>,
        flow: &FlowConfig,
        rng: &mut R,
    ) -> Result<MelSpectrogram<T>> {
        flow.validate()?;
        let (frames, bins) = (c.n_frames(), c.n_mels());
        if frames > self.max_frames {
            return Err(Error::TooLong {
                frames,
                limit: self.max_frames,
            });
        }
        if bins != self.estimator.config().n_mels {
            return Err(Error::ShapeMismatch(format!(
                "condition has {bins} mel bins, model expects {}",
                self.estimator.config().n_mels
            )));
        }
        let cond = BatchTensor::dense(self.norm.normalize(c).into_values(), 1, frames, bins)?;
        let x0 = sample_prior::<T, _>(&[frames, bins], rng);
        let field = |x: &Tensor<T>, t: T, cond: &BatchTensor<T>| {
            let xt = BatchTensor::dense(x.data().to_vec(), 1, frames, bins)?;
            let v = self.estimator.forward(&xt, cond, &[t])?;
            Tensor::new(&[frames, bins], v.values().to_vec())
        };
        let x1 = euler_integrate(field, &x0, &cond, flow.n_steps)?;
        let refined = MelSpectrogram::new(x1.into_data(), frames, bins)?;
        Ok(self.norm.denormalize(&refined))
    }

    /// Resamples to the canonical rate, refines the log-mel and vocodes it
    /// back to a waveform of the same length.
    pub fn refine_wav<R: Rng + ?Sized, V: Vocoder<T> + ?Sized>(
        &self,
        distorted: &AudioBuffer<T>,
        fb: &MelFilterbank<T>,
        vocoder: &V,
        phase: PhaseInit,
        flow: &FlowConfig,
        rng: &mut R,
    ) -> Result<AudioBuffer<T>> {
        if distorted.is_empty() {
            return Err(Error::Empty("audio input"));
        }
        let buf = if distorted.sample_rate() == SAMPLE_RATE {
            distorted.clone()
        } else {
            resample(distorted, SAMPLE_RATE)?
        };
        let mel = audio_to_logmel(&buf, fb)?;
        self.refine_condition(&mel, &buf, vocoder, phase, flow, rng)
    }

    /// Refines an already computed condition mel of `audio` (canonical rate)
    /// and vocodes the result to `audio.len()` samples.
    pub fn refine_condition<R: Rng + ?Sized, V: Vocoder<T> + ?Sized>(
        &self,
        condition: &MelSpectrogram<T>,
        audio: &AudioBuffer<T>,
        vocoder: &V,
        phase: PhaseInit,
        flow: &FlowConfig,
        rng: &mut R,
    ) -> Result<AudioBuffer<T>> {
        let refined = self.refine_mel(condition, flow, rng)?;
        let hint = match phase {
            PhaseInit::Zero => None,
            PhaseInit::Condition => Some(stft(audio)?),
        };
        vocoder.synthesize(&refined, audio.len(), hint.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{build_mel_filterbank, GriffinLim, MelScale};
    use crate::net::EstimatorConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EstimatorConfig {
        EstimatorConfig {
            n_blocks: 1,
            model_dim: 16,
            n_heads: 2,
            head_channels: 4,
            time_embed_dim: 8,
            ..EstimatorConfig::default()
        }
    }

    #[test]
    fn untrained_model_returns_the_prior_draw() {
        let r = Refiner::new(Estimator::<f64>::new(tiny(), 1).unwrap(), MelNorm::default());
        let c = MelSpectrogram::filled(-3.0, 9, 128);
        let flow = FlowConfig::default();
        let out = r.refine_mel(&c, &flow, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let x0 = sample_prior::<f64, _>(&[9, 128], &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(out.values(), x0.data());
    }

    #[test]
    fn frame_guard() {
        let mut r = Refiner::new(Estimator::<f32>::new(tiny(), 1).unwrap(), MelNorm::default());
        r.max_frames = 8;
        let c = MelSpectrogram::filled(0.0, 9, 128);
        let err = r.refine_mel(&c, &FlowConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::TooLong { frames: 9, limit: 8 })));
    }

    #[test]
    fn silence_through_untrained_model_is_finite_and_deterministic() {
        let r = Refiner::new(Estimator::<f32>::new(tiny(), 1).unwrap(), MelNorm::default());
        let fb = build_mel_filterbank(128, 1024, 24_000, 0.0, 12_000.0, MelScale::Slaney).unwrap();
        let gl = GriffinLim::new(&fb, 4, 0.99).unwrap();
        let silence = AudioBuffer::zeros(4000, 24_000);
        let flow = FlowConfig {
            n_steps: 4,
            ..FlowConfig::default()
        };
        let run = || {
            r.refine_wav(&silence, &fb, &gl, PhaseInit::Condition, &flow, &mut ChaCha8Rng::seed_from_u64(3))
                .unwrap()
        };
        let a = run();
        assert_eq!(a.len(), 4000);
        assert!(a.samples().iter().all(|v| v.is_finite()));
        assert_eq!(a, run());
    }
}
