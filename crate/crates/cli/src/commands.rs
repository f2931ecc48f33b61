use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use melflow::config::Config;
use melflow::dsp::{audio_to_logmel, save_wav, stft, MelSpectrogram, Vocoder};
use melflow::eval::{evaluate_pair, format_report, render_spectrogram_image};
use melflow::flow::FlowConfig;
use melflow::refine::{PhaseInit, Refiner};
use melflow::simulate::{
    build_dataset, load_canonical, record_mels, spectral_smear, write_tone_set, NoiseSource, PairManifest,
};
use melflow::train::{load_checkpoint, save_checkpoint, step_rng, MelNorm, MelPair, Trainer};

const LOG_EVERY: u64 = 50;

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

pub fn simulate(config: &Path) -> Result<()> {
    let cfg = load_config(Some(config))?;
    let sim = &cfg.simulate;
    let clean_dir = match &sim.clean_dir {
        Some(d) => d.clone(),
        None => {
            let dir = sim.out_dir.join("source");
            write_tone_set(&dir, sim.synth_clips, sim.synth_seconds)?;
            dir
        }
    };
    let noise = match &sim.noise_dir {
        Some(d) => NoiseSource::from_dir(d)?,
        None => NoiseSource::Synthetic(sim.noise),
    };
    let manifest = build_dataset(&clean_dir, &sim.out_dir, &sim.specs, sim.seed, &noise)?;
    println!(
        "wrote {} pairs to {}",
        manifest.records.len(),
        sim.out_dir.join("manifest.tsv").display()
    );
    Ok(())
}

pub fn train(config: &Path) -> Result<()> {
    let cfg = load_config(Some(config))?;
    let tc = &cfg.train;
    let manifest = PairManifest::load(&tc.manifest)?;
    if manifest.records.is_empty() {
        bail!("manifest {} has no records", tc.manifest.display());
    }
    let fb = cfg.dsp.filterbank::<f32>()?;
    let pairs = manifest
        .records
        .iter()
        .map(|r| record_mels(r, &fb).with_context(|| format!("record {}", r.id)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = pairs.iter().find(|p| p.clean.n_frames() > cfg.dsp.max_frames) {
        bail!(
            "a training pair has {} frames, above dsp.max_frames = {}",
            p.clean.n_frames(),
            cfg.dsp.max_frames
        );
    }
    let mut trainer = match &tc.resume_from {
        Some(path) => {
            let ck = load_checkpoint::<f32>(path, Some(&cfg.model))
                .with_context(|| format!("resuming from {}", path.display()))?;
            Trainer::resume(ck, cfg.flow, tc.clone())?
        }
        None => {
            let norm = MelNorm::fit(pairs.iter().map(|p| &p.clean))?;
            Trainer::new(cfg.model.clone(), cfg.flow, tc.clone(), norm)?
        }
    };
    let norm = trainer.norm;
    let pairs = pairs
        .iter()
        .map(|p| MelPair::new(norm.normalize(&p.clean), norm.normalize(&p.distorted)))
        .collect::<melflow::Result<Vec<_>>>()?;
    let interval = tc.checkpoint_interval;
    let out = tc.checkpoint.clone();
    trainer.run(&pairs, |step, loss, t| {
        if step % LOG_EVERY == 0 || step == 1 {
            eprintln!("step {step} loss {loss:.5}");
        }
        if interval > 0 && step % interval == 0 {
            save_checkpoint(&t.checkpoint(), &out)?;
        }
        Ok(())
    })?;
    save_checkpoint(&trainer.checkpoint(), &out)?;
    println!("step {} checkpoint {}", trainer.step(), out.display());
    Ok(())
}

pub struct RefineArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub steps: Option<usize>,
    pub config: Option<PathBuf>,
    pub mel_out: Option<PathBuf>,
}

fn flow_with_steps(cfg: &Config, steps: Option<usize>) -> Result<FlowConfig> {
    let flow = FlowConfig {
        n_steps: steps.unwrap_or(cfg.flow.n_steps),
        ..cfg.flow
    };
    flow.validate()?;
    Ok(flow)
}

fn load_refiner(cfg: &Config, checkpoint: &Path, strict: bool) -> Result<Refiner<f32>> {
    let expected = strict.then_some(&cfg.model);
    let ck = load_checkpoint::<f32>(checkpoint, expected)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let mut refiner = Refiner::from_checkpoint(&ck)?;
    refiner.max_frames = cfg.dsp.max_frames;
    Ok(refiner)
}

pub fn refine(args: &RefineArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let refiner = load_refiner(&cfg, &args.checkpoint, args.config.is_some())?;
    let fb = cfg.dsp.filterbank::<f32>()?;
    let vocoder = cfg.dsp.vocoder(&fb)?;
    let flow = flow_with_steps(&cfg, args.steps)?;
    let audio = load_canonical::<f32>(&args.input)?;
    let condition = audio_to_logmel(&audio, &fb)?;
    let mut rng = step_rng(args.seed, 0);
    let refined = refiner.refine_mel(&condition, &flow, &mut rng)?;
    let phase = match cfg.dsp.gl_phase_init {
        PhaseInit::Zero => None,
        PhaseInit::Condition => Some(stft(&audio)?),
    };
    let out = vocoder.synthesize(&refined, audio.len(), phase.as_ref())?;
    save_wav(&out, &args.output)?;
    if let Some(path) = &args.mel_out {
        std::fs::write(path, refined.to_text()).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {}", args.output.display());
    Ok(())
}

pub struct EvalArgs {
    pub manifest: PathBuf,
    pub report: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub refined_dir: Option<PathBuf>,
    pub write_refined: Option<PathBuf>,
    pub seed: u64,
    pub steps: Option<usize>,
    pub config: Option<PathBuf>,
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let manifest = PairManifest::load(&args.manifest)?;
    let fb = cfg.dsp.filterbank::<f32>()?;
    let vocoder = cfg.dsp.vocoder(&fb)?;
    let flow = flow_with_steps(&cfg, args.steps)?;
    let refiner = match &args.checkpoint {
        Some(ck) => Some(load_refiner(&cfg, ck, args.config.is_some())?),
        None => None,
    };
    if let Some(dir) = &args.write_refined {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut records = Vec::with_capacity(manifest.records.len());
    for (i, r) in manifest.records.iter().enumerate() {
        let clean = load_canonical::<f32>(&r.clean_path)?;
        let distorted = load_canonical::<f32>(&r.distorted_path)?;
        let refined = match (&refiner, &args.refined_dir) {
            (Some(refiner), _) => {
                let condition = spectral_smear(&audio_to_logmel(&distorted, &fb)?, r.spec.smear_frames);
                let mut rng = step_rng(args.seed, i as u64);
                refiner.refine_condition(&condition, &distorted, &vocoder, cfg.dsp.gl_phase_init, &flow, &mut rng)?
            }
            (None, Some(dir)) => load_canonical::<f32>(dir.join(format!("{}.wav", r.id)))?,
            (None, None) => bail!("either --checkpoint or --refined-dir is required"),
        };
        if let Some(dir) = &args.write_refined {
            save_wav(&refined, dir.join(format!("{}.wav", r.id)))?;
        }
        let rec = evaluate_pair(&r.id, &clean, &distorted, &refined, &fb).with_context(|| format!("record {}", r.id))?;
        records.push(rec);
    }
    std::fs::write(&args.report, format_report(&records))
        .with_context(|| format!("writing {}", args.report.display()))?;
    let n = records.len().max(1) as f64;
    println!(
        "{} records; mean SI-SNR distorted {:.2} dB, refined {:.2} dB",
        records.len(),
        records.iter().map(|r| r.si_snr_distorted).sum::<f64>() / n,
        records.iter().map(|r| r.si_snr_refined).sum::<f64>() / n
    );
    Ok(())
}

pub fn plot(input: &Path, output: &Path) -> Result<()> {
    let is_wav = input
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    let mel = if is_wav {
        let fb = Config::default().dsp.filterbank::<f32>()?;
        audio_to_logmel(&load_canonical::<f32>(input)?, &fb)?
    } else {
        let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
        MelSpectrogram::<f32>::from_text(&text)?
    };
    render_spectrogram_image(&mel, output)?;
    println!("wrote {} ({}x{})", output.display(), mel.n_frames(), mel.n_mels());
    Ok(())
}
