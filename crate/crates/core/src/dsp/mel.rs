use super::{AudioBuffer, MelSpectrogram, Stft, MEL_FLOOR};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{matmul_bt, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelScale {
    Htk,
    #[default]
    Slaney,
}

impl MelScale {
    pub fn hz_to_mel(self, hz: f64) -> f64 {
        match self {
            MelScale::Htk => 2595.0 * (1.0 + hz / 700.0).log10(),
            MelScale::Slaney => {
                let f_sp = 200.0 / 3.0;
                let min_log_hz = 1000.0;
                let min_log_mel = min_log_hz / f_sp;
                let logstep = 6.4f64.ln() / 27.0;
                if hz >= min_log_hz {
                    min_log_mel + (hz / min_log_hz).ln() / logstep
                } else {
                    hz / f_sp
                }
            }
        }
    }

    pub fn mel_to_hz(self, mel: f64) -> f64 {
        match self {
            MelScale::Htk => 700.0 * (10f64.powf(mel / 2595.0) - 1.0),
            MelScale::Slaney => {
                let f_sp = 200.0 / 3.0;
                let min_log_hz = 1000.0;
                let min_log_mel = min_log_hz / f_sp;
                let logstep = 6.4f64.ln() / 27.0;
                if mel >= min_log_mel {
                    min_log_hz * (logstep * (mel - min_log_mel)).exp()
                } else {
                    mel * f_sp
                }
            }
        }
    }
}

/// Triangular mel filters over the one-sided FFT bins, area-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank<T> {
    /// `n_mels x n_bins`, row-major.
    weights: Vec<T>,
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
    scale: MelScale,
}

impl<T: Real> MelFilterbank<T> {
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn row(&self, m: usize) -> &[T] {
        let n = self.n_bins();
        &self.weights[m * n..(m + 1) * n]
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn f_min(&self) -> f64 {
        self.f_min
    }

    pub fn f_max(&self) -> f64 {
        self.f_max
    }

    pub fn scale(&self) -> MelScale {
        self.scale
    }

    /// Applies the filters to frame-major magnitudes (`n_frames x n_bins`).
    pub fn apply(&self, magnitudes: &[T], n_frames: usize) -> Vec<T> {
        let mut out = vec![T::zero(); n_frames * self.n_mels];
        matmul_bt(
            n_frames,
            self.n_bins(),
            self.n_mels,
            magnitudes,
            &self.weights,
            T::zero(),
            &mut out,
        );
        out
    }

    /// Moore-Penrose pseudo-inverse, `n_bins x n_mels` row-major.
    pub fn pseudo_inverse(&self) -> Vec<T> {
        let n_bins = self.n_bins();
        let fb = nalgebra::DMatrix::<f64>::from_fn(self.n_mels, n_bins, |r, c| {
            self.weights[r * n_bins + c].f64()
        });
        let pinv = fb
            .pseudo_inverse(1e-12)
            .expect("svd of a finite matrix converges");
        let mut out = Vec::with_capacity(n_bins * self.n_mels);
        for r in 0..n_bins {
            for c in 0..self.n_mels {
                out.push(T::of(pinv[(r, c)]));
            }
        }
        out
    }
}

pub fn build_mel_filterbank<T: Real>(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
    scale: MelScale,
) -> Result<MelFilterbank<T>> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
        return Err(Error::InvalidArgument(format!(
            "mel range [{f_min}, {f_max}] Hz invalid for a {sample_rate} Hz signal"
        )));
    }
    if n_mels == 0 || n_fft < 2 {
        return Err(Error::InvalidArgument("n_mels and n_fft must be positive".into()));
    }
    let n_bins = n_fft / 2 + 1;
    let fft_freqs: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
        .collect();
    let (mel_lo, mel_hi) = (scale.hz_to_mel(f_min), scale.hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| scale.mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut weights = vec![T::zero(); n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (hi - lo);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, &f) in fft_freqs.iter().enumerate() {
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            let w = rising.min(falling).max(0.0);
            row[k] = T::of(w * norm);
        }
        if row.iter().all(|&w| w == T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "mel filter {m} covers no FFT bin; {n_mels} mels is too many for a {n_fft}-point FFT"
            )));
        }
    }

    Ok(MelFilterbank {
        weights,
        n_mels,
        n_fft,
        sample_rate,
        f_min,
        f_max,
        scale,
    })
}

/// `log(max(fb * |stft(x)|, 1e-5))`, one row per centered frame.
pub fn audio_to_logmel<T: Real>(
    buf: &AudioBuffer<T>,
    fb: &MelFilterbank<T>,
) -> Result<MelSpectrogram<T>> {
    if buf.sample_rate() != fb.sample_rate() {
        return Err(Error::SampleRateMismatch {
            expected: fb.sample_rate(),
            actual: buf.sample_rate(),
        });
    }
    let stft = Stft::new(fb.n_fft(), super::HOP)?;
    let spec = stft.forward(buf.samples())?;
    let floor = T::of(MEL_FLOOR);
    let values = fb
        .apply(&spec.magnitude(), spec.n_frames())
        .into_iter()
        .map(|v| v.max(floor).ln())
        .collect();
    MelSpectrogram::new(values, spec.n_frames(), fb.n_mels())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{N_FFT, N_MELS, SAMPLE_RATE};

    fn canonical() -> MelFilterbank<f64> {
        build_mel_filterbank(N_MELS, N_FFT, SAMPLE_RATE, 0.0, 12_000.0, MelScale::Slaney).unwrap()
    }

    #[test]
    fn scale_round_trips() {
        for scale in [MelScale::Htk, MelScale::Slaney] {
            for hz in [0.0, 123.0, 999.0, 1000.0, 4321.0, 12_000.0] {
                assert!((scale.mel_to_hz(scale.hz_to_mel(hz)) - hz).abs() < 1e-9);
            }
        }
        assert!((MelScale::Slaney.hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn shape_and_nonnegativity() {
        let fb = canonical();
        assert_eq!(fb.weights().len(), 128 * 513);
        assert!(fb.weights().iter().all(|&w| w >= 0.0));
        for m in 0..128 {
            assert!(fb.row(m).iter().sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn centers_strictly_increase() {
        let fb = canonical();
        let argmax = |m: usize| {
            let row = fb.row(m);
            (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
        };
        // Adjacent low filters can share a peak bin, so compare
        // weight-centroids, which resolve sub-bin spacing.
        let centroid = |m: usize| {
            let row = fb.row(m);
            let s: f64 = row.iter().sum();
            row.iter().enumerate().map(|(k, w)| k as f64 * w).sum::<f64>() / s
        };
        for m in 1..128 {
            assert!(argmax(m) >= argmax(m - 1));
            assert!(centroid(m) > centroid(m - 1));
        }
    }

    #[test]
    fn in_band_bins_are_covered() {
        let fb = canonical();
        for k in 1..512 {
            let total: f64 = (0..128).map(|m| fb.row(m)[k]).sum();
            assert!(total > 0.0, "bin {k}");
        }
    }

    #[test]
    fn invalid_ranges() {
        let bad = |lo, hi| {
            build_mel_filterbank::<f32>(128, 1024, 24_000, lo, hi, MelScale::Slaney).is_err()
        };
        assert!(bad(-1.0, 8000.0));
        assert!(bad(5000.0, 5000.0));
        assert!(bad(0.0, 13_000.0));
        assert!(build_mel_filterbank::<f32>(400, 64, 24_000, 0.0, 12_000.0, MelScale::Htk).is_err());
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let fb = canonical();
        let mel = audio_to_logmel(&AudioBuffer::zeros(24_000, 24_000), &fb).unwrap();
        assert_eq!(mel.n_frames(), 94);
        assert_eq!(mel.n_mels(), 128);
        assert!(mel.values().iter().all(|&v| (v - (1e-5f64).ln()).abs() < 1e-12));
    }

    #[test]
    fn gain_shifts_log_mel() {
        let fb = canonical();
        let x: Vec<f64> = (0..6000)
            .map(|i| (i as f64 * 0.07).sin() * 0.05 + (i as f64 * 0.31).cos() * 0.02)
            .collect();
        let quiet = AudioBuffer::new(x, 24_000).unwrap();
        let loud = quiet.scaled(10.0);
        let a = audio_to_logmel(&quiet, &fb).unwrap();
        let b = audio_to_logmel(&loud, &fb).unwrap();
        let floor = (1e-5f64).ln();
        let mut checked = 0;
        for (&qa, &qb) in a.values().iter().zip(b.values()) {
            assert!(qb >= qa);
            if qa > floor + 1e-9 {
                assert!((qb - qa - 10f64.ln()).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn sample_rate_must_match() {
        let fb = canonical();
        let err = audio_to_logmel(&AudioBuffer::zeros(100, 16_000), &fb).unwrap_err();
        assert!(matches!(err, Error::SampleRateMismatch { .. }));
    }

    #[test]
    fn pseudo_inverse_recovers_mel_space() {
        let fb = canonical();
        let pinv = fb.pseudo_inverse();
        // fb * pinv = I (fb has full row rank)
        for r in [0usize, 17, 64, 127] {
            for c in [0usize, 17, 64, 127] {
                let v: f64 = (0..513).map(|k| fb.row(r)[k] * pinv[k * 128 + c]).sum();
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-8, "({r},{c}) = {v}");
            }
        }
    }
}
