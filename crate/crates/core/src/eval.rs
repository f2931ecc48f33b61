//! Objective metrics (SI-SNR, log-spectral distance), spectrogram images and
//! evaluation report records.

use std::fmt::Write as _;
use std::path::Path;

use image::GrayImage;

use crate::dsp::{audio_to_logmel, AudioBuffer, MelFilterbank, MelSpectrogram};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Magnitude bound on reported SI-SNR values.
pub const SI_SNR_CAP_DB: f64 = 100.0;

/// Scale-invariant SNR in dB after removing the mean of both signals.
/// Clamped to `[-100, 100]`; a vanishing residual gives `+100`.
pub fn si_snr<T: Real>(estimate: &AudioBuffer<T>, reference: &AudioBuffer<T>) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "estimate has {} samples, reference has {}",
            estimate.len(),
            reference.len()
        )));
    }
    let centered = |b: &AudioBuffer<T>| {
        let v: Vec<f64> = b.samples().iter().map(|x| x.f64()).collect();
        let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
        v.into_iter().map(|x| x - mean).collect::<Vec<_>>()
    };
    let s = centered(reference);
    let e = centered(estimate);
    let ss: f64 = s.iter().map(|x| x * x).sum();
    if !(ss > 0.0) {
        return Err(Error::InvalidArgument("reference has zero energy".into()));
    }
    let alpha = e.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / ss;
    let target: f64 = alpha * alpha * ss;
    let resid: f64 = e.iter().zip(&s).map(|(a, b)| (a - alpha * b).powi(2)).sum();
    let cap = 10f64.powf(SI_SNR_CAP_DB / 10.0);
    if resid * cap <= target {
        return Ok(SI_SNR_CAP_DB);
    }
    if target * cap <= resid {
        return Ok(-SI_SNR_CAP_DB);
    }
    Ok(10.0 * (target / resid).log10())
}

/// Root mean square of cellwise log-mel differences.
pub fn log_spectral_distance<T: Real>(a: &MelSpectrogram<T>, b: &MelSpectrogram<T>) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{} mel",
            a.n_frames(),
            a.n_mels(),
            b.n_frames(),
            b.n_mels()
        )));
    }
    let sum: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x.f64() - y.f64()).powi(2))
        .sum();
    Ok((sum / a.values().len() as f64).sqrt())
}

/// Grayscale image with one pixel per cell: time on x, mel bin on y with
/// low bins at the bottom, values min-max scaled to `0..=255`. A constant
/// mel renders as mid gray.
pub fn spectrogram_image<T: Real>(mel: &MelSpectrogram<T>) -> GrayImage {
    let (frames, bins) = (mel.n_frames(), mel.n_mels());
    let (lo, hi) = mel
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.f64()), hi.max(v.f64()))
        });
    let span = hi - lo;
    GrayImage::from_fn(frames as u32, bins as u32, |x, y| {
        let v = mel.get(x as usize, bins - 1 - y as usize).f64();
        let level = if span > 0.0 { (v - lo) / span } else { 0.5 };
        image::Luma([(level * 255.0).round() as u8])
    })
}

pub fn render_spectrogram_image<T: Real>(mel: &MelSpectrogram<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    spectrogram_image(mel)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other.to_string()),
        })
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub si_snr_distorted: f64,
    pub si_snr_refined: f64,
    pub lsd_distorted: f64,
    pub lsd_refined: f64,
}

impl EvalRecord {
    /// Tab-separated `key=value` fields.
    pub fn to_line(&self) -> String {
        format!(
            "id={}\tsi_snr_distorted={:.4}\tsi_snr_refined={:.4}\tlsd_distorted={:.4}\tlsd_refined={:.4}",
            self.id, self.si_snr_distorted, self.si_snr_refined, self.lsd_distorted, self.lsd_refined
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidArgument(format!("report line `{line}`: {m}"));
        let mut id = None;
        let mut vals = [None; 4];
        const KEYS: [&str; 4] = ["si_snr_distorted", "si_snr_refined", "lsd_distorted", "lsd_refined"];
        for field in line.split('\t') {
            let (k, v) = field.split_once('=').ok_or_else(|| bad(format!("field `{field}`")))?;
            if k == "id" {
                id = Some(v.to_string());
            } else if let Some(i) = KEYS.iter().position(|&key| key == k) {
                vals[i] = Some(v.parse::<f64>().map_err(|_| bad(format!("`{k}` is not a number")))?);
            } else {
                return Err(bad(format!("unknown key `{k}`")));
            }
        }
        let get = |i: usize| vals[i].ok_or_else(|| bad(format!("missing `{}`", KEYS[i])));
        Ok(Self {
            id: id.ok_or_else(|| bad("missing `id`".into()))?,
            si_snr_distorted: get(0)?,
            si_snr_refined: get(1)?,
            lsd_distorted: get(2)?,
            lsd_refined: get(3)?,
        })
    }
}

/// SI-SNR and log-mel distance of the distorted and refined waveforms
/// against the clean one. All three share one sample rate and length.
pub fn evaluate_pair<T: Real>(
    id: &str,
    clean: &AudioBuffer<T>,
    distorted: &AudioBuffer<T>,
    refined: &AudioBuffer<T>,
    fb: &MelFilterbank<T>,
) -> Result<EvalRecord> {
    let reference = audio_to_logmel(clean, fb)?;
    Ok(EvalRecord {
        id: id.to_string(),
        si_snr_distorted: si_snr(distorted, clean)?,
        si_snr_refined: si_snr(refined, clean)?,
        lsd_distorted: log_spectral_distance(&audio_to_logmel(distorted, fb)?, &reference)?,
        lsd_refined: log_spectral_distance(&audio_to_logmel(refined, fb)?, &reference)?,
    })
}

pub fn format_report(records: &[EvalRecord]) -> String {
    let mut s = String::new();
    for r in records {
        writeln!(s, "{}", r.to_line()).expect("writing to a string");
    }
    s
}
