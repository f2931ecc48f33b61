//! TOML run configuration with sections `dsp`, `flow`, `model`, `train` and
//! `simulate`. Every key is optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::{build_mel_filterbank, GriffinLim, MelFilterbank, MelScale, HOP, MEL_FLOOR, N_FFT, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::net::EstimatorConfig;
use crate::refine::{PhaseInit, DEFAULT_MAX_FRAMES};
use crate::scalar::Real;
use crate::simulate::{DegradationSpec, NoiseKind};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub mel_scale: MelScale,
    pub log_floor: f64,
    pub gl_iterations: usize,
    pub gl_momentum: f64,
    pub gl_phase_init: PhaseInit,
    pub max_frames: usize,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            n_fft: N_FFT,
            hop: HOP,
            n_mels: crate::dsp::N_MELS,
            f_min: 0.0,
            f_max: SAMPLE_RATE as f64 / 2.0,
            mel_scale: MelScale::Slaney,
            log_floor: MEL_FLOOR,
            gl_iterations: 32,
            gl_momentum: 0.99,
            gl_phase_init: PhaseInit::Condition,
            max_frames: DEFAULT_MAX_FRAMES,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        let fixed = |key: &str, got: f64, want: f64| {
            if got != want {
                Err(Error::Config(format!("dsp.{key} = {got}: only {want} is supported")))
            } else {
                Ok(())
            }
        };
        fixed("sample_rate", self.sample_rate as f64, SAMPLE_RATE as f64)?;
        fixed("n_fft", self.n_fft as f64, N_FFT as f64)?;
        fixed("hop", self.hop as f64, HOP as f64)?;
        fixed("log_floor", self.log_floor, MEL_FLOOR)?;
        if !(0.0..1.0).contains(&self.gl_momentum) {
            return Err(Error::Config("dsp.gl_momentum must lie in [0, 1)".into()));
        }
        if self.max_frames == 0 {
            return Err(Error::Config("dsp.max_frames must be at least 1".into()));
        }
        self.filterbank::<f64>()
            .map(|_| ())
            .map_err(|e| Error::Config(format!("dsp.n_mels/f_min/f_max: {e}")))
    }

    pub fn filterbank<T: Real>(&self) -> Result<MelFilterbank<T>> {
        build_mel_filterbank(self.n_mels, self.n_fft, self.sample_rate, self.f_min, self.f_max, self.mel_scale)
    }

    pub fn vocoder<T: Real>(&self, fb: &MelFilterbank<T>) -> Result<GriffinLim<T>> {
        GriffinLim::new(fb, self.gl_iterations, self.gl_momentum)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Directory of clean WAVs. When absent, `synth_clips` tone clips are
    /// generated under `out_dir/source/` and used instead.
    pub clean_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub noise: NoiseKind,
    /// Directory of noise WAVs that replaces the synthetic generator.
    pub noise_dir: Option<PathBuf>,
    pub synth_clips: usize,
    pub synth_seconds: f64,
    pub specs: Vec<DegradationSpec>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            clean_dir: None,
            out_dir: PathBuf::from("data"),
            seed: 0,
            noise: NoiseKind::White,
            noise_dir: None,
            synth_clips: 4,
            synth_seconds: 0.5,
            specs: vec![DegradationSpec::default()],
        }
    }
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.specs.is_empty() {
            return Err(Error::Config("simulate.specs must list at least one degradation".into()));
        }
        for (i, s) in self.specs.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::Config(format!("simulate.specs[{i}]: {e}")))?;
        }
        if self.clean_dir.is_none() && (self.synth_clips == 0 || !(self.synth_seconds > 0.0)) {
            return Err(Error::Config(
                "simulate.synth_clips and simulate.synth_seconds must be positive without clean_dir".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dsp: DspConfig,
    pub flow: FlowConfig,
    pub model: EstimatorConfig,
    pub train: TrainConfig,
    pub simulate: SimulateConfig,
}

impl Config {
    /// Parses and validates TOML text. Relative paths are left as written.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(one_line(&e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train.manifest);
        fix(&mut self.train.checkpoint);
        if let Some(p) = self.train.resume_from.as_mut() {
            fix(p);
        }
        fix(&mut self.simulate.out_dir);
        if let Some(p) = self.simulate.clean_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.simulate.noise_dir.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        self.flow.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.simulate.validate()?;
        if self.model.n_mels != self.dsp.n_mels {
            return Err(Error::Config(format!(
                "model.n_mels = {} differs from dsp.n_mels = {}",
                self.model.n_mels, self.dsp.n_mels
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// The parser's message with the source excerpt folded onto one line.
fn one_line(e: &toml::de::Error) -> String {
    let msg = e.message().trim().to_string();
    match e.span() {
        Some(span) => format!("{msg} (at byte {})", span.start),
        None => msg,
    }
}
