//! Synthetic degradations for building paired (clean, distorted) data:
//! seeded noise at a calibrated SNR, exponentially decaying room responses,
//! and temporal smearing of mel frames.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{
    audio_to_logmel, load_wav, reflect, resample, save_wav, AudioBuffer, MelFilterbank,
    MelSpectrogram, SAMPLE_RATE,
};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::train::MelPair;

/// Energy of the envelope falls by this factor over `rt60` seconds.
const RT60_DECAY_DB: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationSpec {
    pub snr_db: f64,
    /// Reverberation time in seconds; 0 disables reverb.
    pub rt60_s: f64,
    /// Half-width of the mel moving average; 0 disables smearing.
    pub smear_frames: usize,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            snr_db: 5.0,
            rt60_s: 0.0,
            smear_frames: 0,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.snr_db.is_finite() {
            return Err(Error::InvalidArgument("snr_db must be finite".into()));
        }
        if !(self.rt60_s >= 0.0 && self.rt60_s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "rt60_s = {} must be non-negative",
                self.rt60_s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    White,
    Pink,
}

/// Unit-variance Gaussian white noise.
pub fn white_noise<T: Real, R: Rng + ?Sized>(len: usize, sample_rate: u32, rng: &mut R) -> AudioBuffer<T> {
    let samples = (0..len)
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    AudioBuffer::new(samples, sample_rate).expect("gaussian samples are finite")
}

/// White noise shaped to a `1/f` power spectrum (-3 dB per octave), scaled
/// to unit RMS. The DC bin is removed.
pub fn pink_noise<T: Real, R: Rng + ?Sized>(len: usize, sample_rate: u32, rng: &mut R) -> AudioBuffer<T> {
    if len < 2 {
        return AudioBuffer::zeros(len, sample_rate);
    }
    let mut spec: Vec<Complex<f64>> = (0..len)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(len).process(&mut spec);
    spec[0] = Complex::new(0.0, 0.0);
    for (k, c) in spec.iter_mut().enumerate().skip(1) {
        let f = k.min(len - k) as f64;
        *c /= f.sqrt();
    }
    planner.plan_fft_inverse(len).process(&mut spec);
    let rms = (spec.iter().map(|c| c.re * c.re).sum::<f64>() / len as f64).sqrt();
    let samples = spec.iter().map(|c| T::of(c.re / rms)).collect();
    AudioBuffer::new(samples, sample_rate).expect("shaped noise is finite")
}

pub fn make_noise<T: Real, R: Rng + ?Sized>(
    kind: NoiseKind,
    len: usize,
    sample_rate: u32,
    rng: &mut R,
) -> AudioBuffer<T> {
    match kind {
        NoiseKind::White => white_noise(len, sample_rate, rng),
        NoiseKind::Pink => pink_noise(len, sample_rate, rng),
    }
}

/// Where additive noise comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSource<T> {
    Synthetic(NoiseKind),
    /// Canonical-rate recordings; one is picked at random per degradation.
    Recordings(Vec<AudioBuffer<T>>),
}

impl<T: Real> NoiseSource<T> {
    /// Every WAV in `dir`, resampled to the canonical rate.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let files = list_wavs(dir)?;
        if files.is_empty() {
            return Err(Error::Empty("noise directory has no wav files"));
        }
        files
            .iter()
            .map(load_canonical)
            .collect::<Result<Vec<_>>>()
            .map(Self::Recordings)
    }

    /// Noise for a signal of `len` samples at `sample_rate`.
    pub fn draw<R: Rng + ?Sized>(&self, len: usize, sample_rate: u32, rng: &mut R) -> Result<AudioBuffer<T>> {
        match self {
            Self::Synthetic(kind) => Ok(make_noise(*kind, len, sample_rate, rng)),
            Self::Recordings(list) => {
                if list.is_empty() {
                    return Err(Error::Empty("noise recordings"));
                }
                let pick = &list[rng.gen_range(0..list.len())];
                if pick.sample_rate() != sample_rate {
                    return Err(Error::SampleRateMismatch {
                        expected: sample_rate,
                        actual: pick.sample_rate(),
                    });
                }
                Ok(pick.clone())
            }
        }
    }
}

/// Adds `noise`, looped from a random offset to the length of `clean`, scaled
/// so that `10 log10(E_clean / E_noise) = snr_db`.
pub fn add_noise_at_snr<T: Real, R: Rng + ?Sized>(
    clean: &AudioBuffer<T>,
    noise: &AudioBuffer<T>,
    snr_db: f64,
    rng: &mut R,
) -> Result<AudioBuffer<T>> {
    if clean.sample_rate() != noise.sample_rate() {
        return Err(Error::SampleRateMismatch {
            expected: clean.sample_rate(),
            actual: noise.sample_rate(),
        });
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument("snr_db must be finite".into()));
    }
    if noise.is_empty() {
        return Err(Error::Empty("noise"));
    }
    let offset = rng.gen_range(0..noise.len());
    let segment: Vec<T> = (0..clean.len())
        .map(|i| noise.samples()[(offset + i) % noise.len()])
        .collect();
    let e_clean = clean.energy().f64();
    let e_noise: f64 = segment.iter().map(|v| v.f64() * v.f64()).sum();
    if e_clean <= 0.0 {
        return Err(Error::InvalidArgument("clean signal has zero energy".into()));
    }
    if e_noise <= 0.0 {
        return Err(Error::InvalidArgument("noise has zero energy".into()));
    }
    let gain = T::of((e_clean / e_noise / 10f64.powf(snr_db / 10.0)).sqrt());
    let samples = clean
        .samples()
        .iter()
        .zip(&segment)
        .map(|(&c, &n)| c + gain * n)
        .collect();
    AudioBuffer::new(samples, clean.sample_rate())
}

/// Unit impulse followed by Gaussian noise under an exponential envelope
/// whose energy falls 60 dB after `rt60_s`. The tail carries about as much
/// energy as the direct path. `rt60_s = 0` gives `[1]`.
pub fn synth_rir<T: Real, R: Rng + ?Sized>(rt60_s: f64, sample_rate: u32, rng: &mut R) -> Result<AudioBuffer<T>> {
    if !(rt60_s >= 0.0 && rt60_s.is_finite()) {
        return Err(Error::InvalidArgument(format!("rt60 = {rt60_s} must be non-negative")));
    }
    if sample_rate == 0 {
        return Err(Error::InvalidArgument("sample rate must be positive".into()));
    }
    let n60 = rt60_s * sample_rate as f64;
    if n60 < 1.0 {
        return AudioBuffer::new(vec![T::one()], sample_rate);
    }
    // amplitude decay per sample
    let a = RT60_DECAY_DB / 20.0 * std::f64::consts::LN_10 / n60;
    let sigma = (1.0 - (-2.0 * a).exp()).sqrt();
    let len = (1.25 * n60).ceil() as usize + 1;
    let mut h = Vec::with_capacity(len);
    h.push(T::one());
    for n in 1..len {
        let g: f64 = rng.sample(StandardNormal);
        h.push(T::of(sigma * g * (-a * n as f64).exp()));
    }
    AudioBuffer::new(h, sample_rate)
}

/// `y[n] = sum_k h[k] x[n - k]` for `n < len(x)`.
pub fn convolve_truncated<T: Real>(x: &[T], h: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (k, &hk) in h.iter().enumerate().take(x.len()) {
        if hk == T::zero() {
            continue;
        }
        for (yn, &xn) in y[k..].iter_mut().zip(x) {
            *yn += hk * xn;
        }
    }
    y
}

/// Convolves with `rir`, keeps the first `clean.len()` samples and rescales
/// to the peak of `clean`.
pub fn apply_reverb<T: Real>(clean: &AudioBuffer<T>, rir: &AudioBuffer<T>) -> Result<AudioBuffer<T>> {
    if clean.sample_rate() != rir.sample_rate() {
        return Err(Error::SampleRateMismatch {
            expected: clean.sample_rate(),
            actual: rir.sample_rate(),
        });
    }
    let wet = AudioBuffer::new(convolve_truncated(clean.samples(), rir.samples()), clean.sample_rate())?;
    let peak = wet.peak();
    if peak > T::zero() {
        Ok(wet.scaled(clean.peak() / peak))
    } else {
        Ok(wet)
    }
}

/// Moving average over `2 * smear_frames + 1` frames with reflected edges.
pub fn spectral_smear<T: Real>(mel: &MelSpectrogram<T>, smear_frames: usize) -> MelSpectrogram<T> {
    if smear_frames == 0 {
        return mel.clone();
    }
    let (n, bins) = (mel.n_frames(), mel.n_mels());
    let w = smear_frames as isize;
    let inv = T::one() / T::of((2 * smear_frames + 1) as f64);
    let mut out = vec![T::zero(); n * bins];
    for f in 0..n {
        let row = &mut out[f * bins..(f + 1) * bins];
        for d in -w..=w {
            let src = mel.frame(reflect(f as isize + d, n));
            for (o, &s) in row.iter_mut().zip(src) {
                *o += s;
            }
        }
        for o in row.iter_mut() {
            *o *= inv;
        }
    }
    MelSpectrogram::new(out, n, bins).expect("average of finite values")
}

/// Waveform degradation of `clean` per `spec`: reverb first, then noise.
/// Smearing acts on mels and is applied separately. `rng` drives the RIR,
/// the noise and its offset.
pub fn degrade<T: Real, R: Rng + ?Sized>(
    clean: &AudioBuffer<T>,
    spec: &DegradationSpec,
    noise: &NoiseSource<T>,
    rng: &mut R,
) -> Result<AudioBuffer<T>> {
    spec.validate()?;
    let sr = clean.sample_rate();
    let reverbed = if spec.rt60_s > 0.0 {
        let rir = synth_rir(spec.rt60_s, sr, rng)?;
        apply_reverb(clean, &rir)?
    } else {
        clean.clone()
    };
    let noise = noise.draw(clean.len(), sr, rng)?;
    add_noise_at_snr(&reverbed, &noise, spec.snr_db, rng)
}

/// Sum of sinusoids with raised-cosine fades of `fade_s` at both ends.
pub fn tone_clip<T: Real>(
    partials: &[(f64, f64)],
    duration_s: f64,
    fade_s: f64,
    sample_rate: u32,
) -> Result<AudioBuffer<T>> {
    let len = (duration_s * sample_rate as f64).round() as usize;
    if len == 0 {
        return Err(Error::Empty("tone clip"));
    }
    let fade = ((fade_s * sample_rate as f64) as usize).min(len / 2);
    let samples = (0..len)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            let v: f64 = partials
                .iter()
                .map(|&(f, a)| a * (2.0 * std::f64::consts::PI * f * t).sin())
                .sum();
            let edge = i.min(len - 1 - i);
            let g = if edge < fade {
                0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / fade as f64).cos()
            } else {
                1.0
            };
            T::of(v * g)
        })
        .collect();
    AudioBuffer::new(samples, sample_rate)
}

/// A small harmonic tone for clip `index` of a generated set.
pub fn tone_partials(index: usize) -> Vec<(f64, f64)> {
    const BASES: [f64; 6] = [220.0, 261.63, 329.63, 392.0, 293.66, 349.23];
    let f0 = BASES[index % BASES.len()] * (1 + index / BASES.len()) as f64;
    vec![(f0, 0.3), (2.0 * f0, 0.15), (3.0 * f0, 0.075)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub id: String,
    pub clean_path: PathBuf,
    pub distorted_path: PathBuf,
    pub spec: DegradationSpec,
}

/// Pair list stored as one tab-separated `key=value` line per record:
/// `id`, `clean_path`, `distorted_path`, `snr_db`, `rt60_s`, `smear_frames`,
/// `seed`. Relative paths resolve against the manifest's directory. Blank
/// lines and lines starting with `#` are ignored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairManifest {
    pub records: Vec<PairRecord>,
}

const MANIFEST_KEYS: [&str; 7] = [
    "id",
    "clean_path",
    "distorted_path",
    "snr_db",
    "rt60_s",
    "smear_frames",
    "seed",
];

impl PairManifest {
    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            for (key, v) in [("id", r.id.as_str()), ("clean_path", path_str(&r.clean_path)?), (
                "distorted_path",
                path_str(&r.distorted_path)?,
            )] {
                if v.is_empty() || v.contains(['\t', '\n', '\r']) {
                    return Err(Error::InvalidArgument(format!("{key} `{v}` cannot be stored")));
                }
            }
            writeln!(
                s,
                "id={}\tclean_path={}\tdistorted_path={}\tsnr_db={}\trt60_s={}\tsmear_frames={}\tseed={}",
                r.id,
                path_str(&r.clean_path)?,
                path_str(&r.distorted_path)?,
                r.spec.snr_db,
                r.spec.rt60_s,
                r.spec.smear_frames,
                r.spec.seed
            )
            .expect("writing to a string");
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut ids = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Manifest {
                line: line_no,
                message,
            };
            let mut fields: [Option<&str>; 7] = [None; 7];
            for field in line.split('\t') {
                let (key, value) = field
                    .split_once('=')
                    .ok_or_else(|| err(format!("field `{field}` is not key=value")))?;
                let slot = MANIFEST_KEYS
                    .iter()
                    .position(|&k| k == key)
                    .ok_or_else(|| err(format!("unknown key `{key}`")))?;
                if fields[slot].replace(value).is_some() {
                    return Err(err(format!("duplicate key `{key}`")));
                }
            }
            let get = |slot: usize| fields[slot].ok_or_else(|| err(format!("missing key `{}`", MANIFEST_KEYS[slot])));
            let num = |slot: usize| -> Result<f64> {
                get(slot)?
                    .parse()
                    .map_err(|_| err(format!("`{}` is not a number", MANIFEST_KEYS[slot])))
            };
            let int = |slot: usize| -> Result<u64> {
                get(slot)?
                    .parse()
                    .map_err(|_| err(format!("`{}` is not an unsigned integer", MANIFEST_KEYS[slot])))
            };
            let spec = DegradationSpec {
                snr_db: num(3)?,
                rt60_s: num(4)?,
                smear_frames: int(5)? as usize,
                seed: int(6)?,
            };
            spec.validate().map_err(|e| err(e.to_string()))?;
            let id = get(0)?.to_string();
            if id.is_empty() || !ids.insert(id.clone()) {
                return Err(err(format!("empty or duplicate id `{id}`")));
            }
            records.push(PairRecord {
                id,
                clean_path: PathBuf::from(get(1)?),
                distorted_path: PathBuf::from(get(2)?),
                spec,
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for r in &mut m.records {
            r.clean_path = base.join(&r.clean_path);
            r.distorted_path = base.join(&r.distorted_path);
        }
        Ok(m)
    }
}

fn path_str(p: &Path) -> Result<&str> {
    p.to_str()
        .ok_or_else(|| Error::InvalidArgument(format!("path {} is not valid utf-8", p.display())))
}

/// Reads a WAV and brings it to the canonical rate.
pub fn load_canonical<T: Real>(path: impl AsRef<Path>) -> Result<AudioBuffer<T>> {
    let buf = load_wav(path)?;
    if buf.sample_rate() == SAMPLE_RATE {
        Ok(buf)
    } else {
        resample(&buf, SAMPLE_RATE)
    }
}

/// Log-mels of a record: clean target and the smeared distorted condition.
pub fn record_mels<T: Real>(record: &PairRecord, fb: &MelFilterbank<T>) -> Result<MelPair<T>> {
    let clean = load_canonical(&record.clean_path)?;
    let distorted = load_canonical(&record.distorted_path)?;
    if clean.len() != distorted.len() {
        return Err(Error::ShapeMismatch(format!(
            "record {}: clean has {} samples, distorted has {}",
            record.id,
            clean.len(),
            distorted.len()
        )));
    }
    let clean = audio_to_logmel(&clean, fb)?;
    let distorted = spectral_smear(&audio_to_logmel(&distorted, fb)?, record.spec.smear_frames);
    MelPair::new(clean, distorted)
}

/// Per-record random seed from the dataset seed, the degradation seed and the
/// clean file index.
pub fn record_seed(seed: u64, spec_seed: u64, file_index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ spec_seed.rotate_left(32));
    rng.set_stream(file_index as u64);
    rng.gen()
}

/// Sorted `*.wav` files of a directory.
pub fn list_wavs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Writes canonical-rate copies of every clean WAV in `clean_dir` under
/// `out_dir/clean/`, one distorted WAV per (file, spec) under
/// `out_dir/distorted/`, and `out_dir/manifest.tsv`. Record ids are
/// `<stem>_<spec index>`. The returned records carry paths under `out_dir`.
pub fn build_dataset(
    clean_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    specs: &[DegradationSpec],
    seed: u64,
    noise: &NoiseSource<f64>,
) -> Result<PairManifest> {
    let files = list_wavs(&clean_dir)?;
    if files.is_empty() {
        return Err(Error::Empty("clean directory has no wav files"));
    }
    if specs.is_empty() {
        return Err(Error::Empty("degradation specs"));
    }
    for s in specs {
        s.validate()?;
    }
    let out_dir = out_dir.as_ref();
    for sub in ["clean", "distorted"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::new();
    for (fi, file) in files.iter().enumerate() {
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidArgument(format!("bad file name {}", file.display())))?;
        let clean = load_canonical::<f64>(file)?;
        let clean_rel = PathBuf::from("clean").join(format!("{stem}.wav"));
        save_wav(&clean, out_dir.join(&clean_rel))?;
        // what the distorted signal is built from is exactly what was stored
        let clean = load_wav::<f64>(out_dir.join(&clean_rel))?;
        for (si, spec) in specs.iter().enumerate() {
            let id = format!("{stem}_{si:02}");
            let rseed = record_seed(seed, spec.seed, fi);
            let mut rng = ChaCha8Rng::seed_from_u64(rseed);
            let distorted = degrade(&clean, spec, noise, &mut rng)?;
            let rel = PathBuf::from("distorted").join(format!("{id}.wav"));
            save_wav(&distorted, out_dir.join(&rel))?;
            records.push(PairRecord {
                id,
                clean_path: clean_rel.clone(),
                distorted_path: rel,
                spec: DegradationSpec {
                    seed: rseed,
                    ..*spec
                },
            });
        }
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut manifest = PairManifest { records };
    manifest.save(out_dir.join("manifest.tsv"))?;
    // hand back what `PairManifest::load` would give for the saved file
    for r in &mut manifest.records {
        r.clean_path = out_dir.join(&r.clean_path);
        r.distorted_path = out_dir.join(&r.distorted_path);
    }
    Ok(manifest)
}

/// Writes `count` harmonic tone clips of `duration_s` seconds as
/// `tone_XX.wav` into `dir`.
pub fn write_tone_set(dir: impl AsRef<Path>, count: usize, duration_s: f64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let clip = tone_clip::<f64>(&tone_partials(i), duration_s, 0.02, SAMPLE_RATE)?;
            let path = dir.join(format!("tone_{i:02}.wav"));
            save_wav(&clip, &path)?;
            Ok(path)
        })
        .collect()
}
