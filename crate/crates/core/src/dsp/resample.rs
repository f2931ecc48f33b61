use super::AudioBuffer;
use crate::error::{Error, Result};
use crate::scalar::Real;

const KAISER_BETA: f64 = 8.0;
/// Sinc zero crossings on each side of the kernel center.
const HALF_ZEROS: f64 = 24.0;
/// Cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.97;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// Output length is `round(len * target / source)`; equal rates return the
/// input unchanged.
pub fn resample<T: Real>(buf: &AudioBuffer<T>, target_rate: u32) -> Result<AudioBuffer<T>> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target sample rate must be positive".into()));
    }
    let source_rate = buf.sample_rate();
    if source_rate == target_rate {
        return Ok(buf.clone());
    }

    let ratio = target_rate as f64 / source_rate as f64;
    let out_len = (buf.len() as f64 * ratio).round() as usize;
    let cutoff = ratio.min(1.0) * ROLLOFF;
    let half_width = HALF_ZEROS / cutoff;
    let i0_beta = bessel_i0(KAISER_BETA);
    let x = buf.samples();
    let n_in = x.len() as isize;

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let center = n as f64 / ratio;
        let lo = ((center - half_width).ceil() as isize).max(0);
        let hi = ((center + half_width).floor() as isize).min(n_in - 1);
        let mut acc = 0.0;
        for k in lo..=hi {
            let d = center - k as f64;
            let r = d / half_width;
            let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
            acc += x[k as usize].f64() * cutoff * sinc(cutoff * d) * w;
        }
        out.push(T::of(acc));
    }
    AudioBuffer::new(out, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, secs: f64) -> AudioBuffer<f64> {
        let n = (rate as f64 * secs) as usize;
        let s = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() * 0.5)
            .collect();
        AudioBuffer::new(s, rate).unwrap()
    }

    /// Frequency of the largest bin of a brute-force DFT magnitude scan.
    fn dominant_frequency(x: &[f64], rate: u32) -> (f64, f64) {
        let n = x.len();
        let mut best = (0usize, 0.0);
        for k in 1..n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in x.iter().enumerate() {
                let ph = -2.0 * std::f64::consts::PI * (k * i % n) as f64 / n as f64;
                re += v * ph.cos();
                im += v * ph.sin();
            }
            let mag = re * re + im * im;
            if mag > best.1 {
                best = (k, mag);
            }
        }
        (best.0 as f64 * rate as f64 / n as f64, rate as f64 / n as f64)
    }

    #[test]
    fn identity_at_equal_rates() {
        let buf = sine(440.0, 24_000, 0.1);
        assert_eq!(resample(&buf, 24_000).unwrap(), buf);
    }

    #[test]
    fn length_arithmetic() {
        let buf = AudioBuffer::<f32>::zeros(48_000, 48_000);
        let out = resample(&buf, 24_000).unwrap();
        assert_eq!(out.len(), 24_000);
        assert_eq!(out.sample_rate(), 24_000);

        let buf = AudioBuffer::<f32>::zeros(1001, 16_000);
        assert_eq!(resample(&buf, 24_000).unwrap().len(), 1502);
    }

    #[test]
    fn sine_keeps_its_frequency() {
        let buf = sine(440.0, 48_000, 0.25);
        let out = resample(&buf, 24_000).unwrap();
        let (f, bin) = dominant_frequency(out.samples(), 24_000);
        assert!((f - 440.0).abs() <= bin, "peak at {f} Hz");
    }

    #[test]
    fn upsampled_sine_matches_analytic_signal() {
        let buf = sine(1000.0, 16_000, 0.1);
        let out = resample(&buf, 24_000).unwrap();
        let expect = sine(1000.0, 24_000, 0.1);
        // interior only; edges lack kernel support
        for i in 200..out.len() - 200 {
            assert!((out.samples()[i] - expect.samples()[i]).abs() < 2e-3);
        }
    }

    #[test]
    fn rejects_zero_rate() {
        let buf = AudioBuffer::<f32>::zeros(10, 24_000);
        assert!(resample(&buf, 0).is_err());
    }
}
