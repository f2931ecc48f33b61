//! AdamW training of the estimator on padded batches of mel pairs, with
//! bit-exact binary checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::flow::{phi_t, sample_prior, target_field, FlowConfig};
use crate::net::{BatchTensor, Estimator, EstimatorConfig, Param, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("train.{key}: {why}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps", "must be positive");
        }
        Ok(())
    }
}

/// AdamW moments and step counter. `m` and `v` mirror the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    m: ParamStore<T>,
    v: ParamStore<T>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &ParamStore<T> {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamStore<T> {
        &self.v
    }
}

/// One AdamW step with bias-corrected moments and decoupled weight decay:
/// `w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)`.
pub fn adamw_update<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::ShapeMismatch(
            "parameters, gradients and optimizer moments differ in layout".into(),
        ));
    }
    if let Some(p) = grads
        .entries()
        .iter()
        .find(|p| p.data.iter().any(|g| !g.is_finite()))
    {
        return Err(Error::NonFiniteGradient(p.name.clone()));
    }
    let c = state.config;
    state.step += 1;
    let k = state.step as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let corr1 = T::of(1.0 - c.beta1.powi(k));
    let corr2 = T::of(1.0 - c.beta2.powi(k));
    let (lr, wd, eps) = (T::of(c.lr), T::of(c.weight_decay), T::of(c.eps));

    let entries = params
        .entries_mut()
        .iter_mut()
        .zip(grads.entries())
        .zip(state.m.entries_mut().iter_mut().zip(state.v.entries_mut()));
    for ((w, g), (m, v)) in entries {
        for i in 0..w.data.len() {
            let gi = g.data[i];
            let mi = b1 * m.data[i] + one_b1 * gi;
            let vi = b2 * v.data[i] + one_b2 * gi * gi;
            m.data[i] = mi;
            v.data[i] = vi;
            let m_hat = mi / corr1;
            let v_hat = vi / corr2;
            let wi = w.data[i];
            w.data[i] = wi - lr * (m_hat / (v_hat.sqrt() + eps) + wd * wi);
        }
    }
    Ok(())
}

/// Global affine standardization of log-mel values, `(x - shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelNorm {
    pub shift: f64,
    pub scale: f64,
}

impl Default for MelNorm {
    fn default() -> Self {
        Self {
            shift: 0.0,
            scale: 1.0,
        }
    }
}

impl MelNorm {
    /// Mean and standard deviation over every cell of `mels`.
    pub fn fit<'a, T: Real>(mels: impl IntoIterator<Item = &'a MelSpectrogram<T>>) -> Result<Self> {
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        for mel in mels {
            for v in mel.values() {
                let v = v.f64();
                n += 1;
                sum += v;
                sq += v * v;
            }
        }
        if n == 0 {
            return Err(Error::Empty("mel statistics"));
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = var.sqrt();
        Ok(Self {
            shift: mean,
            scale: if std > 1e-6 { std } else { 1.0 },
        })
    }

    pub fn normalize<T: Real>(&self, mel: &MelSpectrogram<T>) -> MelSpectrogram<T> {
        let (s, k) = (T::of(self.shift), T::of(self.scale));
        mel.map(|v| (v - s) / k)
    }

    pub fn denormalize<T: Real>(&self, mel: &MelSpectrogram<T>) -> MelSpectrogram<T> {
        let (s, k) = (T::of(self.shift), T::of(self.scale));
        mel.map(|v| v * k + s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Pair manifest to train on.
    pub manifest: PathBuf,
    /// Where checkpoints are written.
    pub checkpoint: PathBuf,
    /// Checkpoint to continue from, if any.
    pub resume_from: Option<PathBuf>,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            manifest: PathBuf::from("data/manifest.tsv"),
            checkpoint: PathBuf::from("checkpoint.bin"),
            resume_from: None,
            batch_size: 4,
            total_steps: 2000,
            seed: 0,
            checkpoint_interval: 500,
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            weight_decay: opt.weight_decay,
            eps: opt.eps,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("train.total_steps must be at least 1".into()));
        }
        self.optimizer().validate()
    }
}

/// Clean target and degraded condition of one utterance, equal frame counts.
#[derive(Debug, Clone, PartialEq)]
pub struct MelPair<T> {
    pub clean: MelSpectrogram<T>,
    pub distorted: MelSpectrogram<T>,
}

impl<T: Real> MelPair<T> {
    pub fn new(clean: MelSpectrogram<T>, distorted: MelSpectrogram<T>) -> Result<Self> {
        if !clean.same_shape(&distorted) {
            return Err(Error::ShapeMismatch(format!(
                "clean mel is {}x{}, distorted is {}x{}",
                clean.n_frames(),
                clean.n_mels(),
                distorted.n_frames(),
                distorted.n_mels()
            )));
        }
        Ok(Self { clean, distorted })
    }
}

/// Padded flow-matching batch. `x0` is kept so targets can be replayed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch<T> {
    pub xt: BatchTensor<T>,
    pub c: BatchTensor<T>,
    pub t: Vec<T>,
    pub x0: BatchTensor<T>,
    pub target: BatchTensor<T>,
}

impl<T: Real> TrainingBatch<T> {
    pub fn mask(&self) -> &[bool] {
        self.xt.mask()
    }
}

/// Pads pairs to the longest one and draws, per item, `t ~ U[0, 1]` and a
/// prior sample over its valid frames.
pub fn make_training_batch<T: Real, R: Rng + ?Sized>(
    pairs: &[&MelPair<T>],
    rng: &mut R,
    flow: &FlowConfig,
) -> Result<TrainingBatch<T>> {
    if pairs.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    flow.validate()?;
    let bins = pairs[0].clean.n_mels();
    let mut t = Vec::with_capacity(pairs.len());
    let mut cols: [Vec<Vec<T>>; 4] = Default::default();
    for pair in pairs {
        if !pair.clean.same_shape(&pair.distorted) {
            return Err(Error::ShapeMismatch("clean and distorted frame counts differ".into()));
        }
        if pair.clean.n_mels() != bins {
            return Err(Error::ShapeMismatch("pairs differ in mel bin count".into()));
        }
        let shape = [pair.clean.n_frames(), bins];
        let ti = T::of(rng.gen::<f64>());
        let x0 = sample_prior::<T, _>(&shape, rng);
        let x1 = Tensor::new(&shape, pair.clean.values().to_vec())?;
        cols[0].push(phi_t(&x0, &x1, ti, flow.sigma_min)?.into_data());
        cols[1].push(pair.distorted.values().to_vec());
        cols[3].push(target_field(&x0, &x1, flow.sigma_min)?.into_data());
        cols[2].push(x0.into_data());
        t.push(ti);
    }
    let pad = |items: &[Vec<T>]| {
        let refs: Vec<&[T]> = items.iter().map(|v| v.as_slice()).collect();
        BatchTensor::pad(&refs, bins)
    };
    Ok(TrainingBatch {
        xt: pad(&cols[0])?,
        c: pad(&cols[1])?,
        x0: pad(&cols[2])?,
        target: pad(&cols[3])?,
        t,
    })
}

/// Loss, backward pass and one AdamW update. Returns the pre-update loss.
pub fn training_step<T: Real>(
    batch: &TrainingBatch<T>,
    estimator: &mut Estimator<T>,
    opt: &mut OptimizerState<T>,
) -> Result<T> {
    let (loss, grads) = estimator.loss_and_grad(&batch.xt, &batch.c, &batch.t, &batch.target)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(opt.step() + 1));
    }
    adamw_update(estimator.params_mut(), &grads, opt)?;
    Ok(loss)
}

/// Random stream for training step `step`, independent of how many steps
/// ran before it in this process.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: EstimatorConfig,
    pub norm: MelNorm,
    pub step: u64,
    pub params: ParamStore<T>,
    pub optimizer: OptimizerState<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn estimator(&self) -> Result<Estimator<T>> {
        let mut est = Estimator::new(self.model.clone(), 0)?;
        est.set_params(self.params.clone())?;
        Ok(est)
    }
}

/// Training state: model, optimizer, normalization and step counter.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub estimator: Estimator<T>,
    pub optimizer: OptimizerState<T>,
    pub norm: MelNorm,
    pub flow: FlowConfig,
    pub config: TrainConfig,
    step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: EstimatorConfig, flow: FlowConfig, config: TrainConfig, norm: MelNorm) -> Result<Self> {
        config.validate()?;
        flow.validate()?;
        let estimator = Estimator::new(model, config.seed)?;
        let optimizer = OptimizerState::new(estimator.params(), config.optimizer());
        Ok(Self {
            estimator,
            optimizer,
            norm,
            flow,
            config,
            step: 0,
        })
    }

    pub fn resume(checkpoint: Checkpoint<T>, flow: FlowConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        flow.validate()?;
        let estimator = checkpoint.estimator()?;
        let mut optimizer = checkpoint.optimizer;
        optimizer.config = config.optimizer();
        Ok(Self {
            estimator,
            optimizer,
            norm: checkpoint.norm,
            flow,
            config,
            step: checkpoint.step,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One update on a batch drawn from `pairs`, which must already be
    /// normalized. Items are a fresh shuffle of the pairs, repeated cyclically
    /// when the batch is larger than the pair count.
    pub fn train_step(&mut self, pairs: &[MelPair<T>]) -> Result<T> {
        if pairs.is_empty() {
            return Err(Error::Empty("training pairs"));
        }
        let mut rng = step_rng(self.config.seed, self.step);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let chosen: Vec<&MelPair<T>> = (0..self.config.batch_size)
            .map(|i| &pairs[order[i % order.len()]])
            .collect();
        let batch = make_training_batch(&chosen, &mut rng, &self.flow)?;
        let loss = training_step(&batch, &mut self.estimator, &mut self.optimizer)
            .map_err(|e| match e {
                Error::NonFiniteLoss(_) => Error::NonFiniteLoss(self.step + 1),
                other => other,
            })?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs until `config.total_steps`, calling `on_step(step, loss, self)`
    /// after each update. Returns the losses of the steps run here.
    pub fn run<F>(&mut self, pairs: &[MelPair<T>], mut on_step: F) -> Result<Vec<T>>
    where
        F: FnMut(u64, T, &Self) -> Result<()>,
    {
        let mut losses = Vec::new();
        while self.step < self.config.total_steps {
            let loss = self.train_step(pairs)?;
            losses.push(loss);
            on_step(self.step, loss, self)?;
        }
        Ok(losses)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.estimator.config().clone(),
            norm: self.norm,
            step: self.step,
            params: self.estimator.params().clone(),
            optimizer: self.optimizer.clone(),
        }
    }
}

const MAGIC: &[u8; 8] = b"MELFLOW\0";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn values<T: Real>(&mut self, v: &[T]) {
        for x in v {
            self.f64(x.f64());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("invalid utf-8 string".into()))
    }
    fn values<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        (0..n).map(|_| self.f64().map(T::of)).collect()
    }
}

/// Serializes a checkpoint: header, model config, normalization, step,
/// optimizer state, then `name -> shape -> values, m, v` per parameter as
/// little-endian 64-bit floats, followed by a SHA-256 digest of the body.
pub fn encode_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&ck.model.fingerprint());
    let model = toml::to_string(&ck.model).map_err(|e| Error::Config(e.to_string()))?;
    w.str(&model);
    w.f64(ck.norm.shift);
    w.f64(ck.norm.scale);
    w.u64(ck.step);
    let o = &ck.optimizer;
    for v in [o.config.lr, o.config.beta1, o.config.beta2, o.config.weight_decay, o.config.eps] {
        w.f64(v);
    }
    w.u64(o.step);
    if !ck.params.same_layout(&o.m) || !ck.params.same_layout(&o.v) {
        return Err(Error::ShapeMismatch("optimizer moments differ from parameters".into()));
    }
    w.u32(ck.params.len() as u32);
    for ((p, m), v) in ck.params.entries().iter().zip(o.m.entries()).zip(o.v.entries()) {
        w.str(&p.name);
        w.u32(p.shape.len() as u32);
        for &d in &p.shape {
            w.u64(d as u64);
        }
        w.values(&p.data);
        w.values(&m.data);
        w.values(&v.data);
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    Ok(w.0)
}

/// Parses a checkpoint. With `expected`, the stored model config must have
/// the same fingerprint.
pub fn decode_checkpoint<T: Real>(bytes: &[u8], expected: Option<&EstimatorConfig>) -> Result<Checkpoint<T>> {
    if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptCheckpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let fingerprint = r.str()?;
    if let Some(cfg) = expected {
        if cfg.fingerprint() != fingerprint {
            return Err(Error::ConfigMismatch {
                expected: cfg.fingerprint(),
                found: fingerprint,
            });
        }
    }
    let model: EstimatorConfig =
        toml::from_str(&r.str()?).map_err(|e| Error::CorruptCheckpoint(format!("model config: {e}")))?;
    if model.fingerprint() != fingerprint {
        return Err(Error::CorruptCheckpoint("model config disagrees with its fingerprint".into()));
    }
    let norm = MelNorm {
        shift: r.f64()?,
        scale: r.f64()?,
    };
    let step = r.u64()?;
    let config = AdamWConfig {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        weight_decay: r.f64()?,
        eps: r.f64()?,
    };
    let opt_step = r.u64()?;
    let count = r.u32()? as usize;
    let (mut ps, mut ms, mut vs) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..count {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= body.len() / 8)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("bad shape for `{name}`")))?;
        let entry = |data| Param {
            name: name.clone(),
            shape: shape.clone(),
            data,
        };
        ps.push(entry(r.values(n)?));
        ms.push(entry(r.values(n)?));
        vs.push(entry(r.values(n)?));
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    let params = ParamStore::from_entries(ps);
    let reference = Estimator::<T>::new(model.clone(), 0)?;
    if !reference.params().same_layout(&params) {
        return Err(Error::CorruptCheckpoint("parameter table does not fit the model".into()));
    }
    Ok(Checkpoint {
        model,
        norm,
        step,
        params,
        optimizer: OptimizerState {
            config,
            m: ParamStore::from_entries(ms),
            v: ParamStore::from_entries(vs),
            step: opt_step,
        },
    })
}

pub fn save_checkpoint<T: Real>(ck: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ck)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    expected: Option<&EstimatorConfig>,
) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        ParamStore::from_entries(vec![Param {
            name: "w".into(),
            shape: vec![values.len()],
            data: values.to_vec(),
        }])
    }

    #[test]
    fn zero_gradient_at_zero_weight_is_a_fixed_point() {
        let mut p = store(&[0.0]);
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        adamw_update(&mut p, &store(&[0.0]), &mut st).unwrap();
        assert_eq!(p.flat(0), 0.0);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(&[0.0]);
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        adamw_update(&mut p, &store(&[1.0]), &mut st).unwrap();
        let expected = -1e-4 * (1.0 / (1.0 + 1e-8));
        assert!((p.flat(0) - expected).abs() < 1e-18);
    }

    #[test]
    fn decay_without_gradient_is_geometric() {
        let mut p = store(&[1.0, -2.0]);
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        let g = store(&[0.0, 0.0]);
        for _ in 0..50 {
            adamw_update(&mut p, &g, &mut st).unwrap();
        }
        let f = (1.0f64 - 1e-4 * 0.01).powi(50);
        assert!((p.flat(0) - f).abs() < 1e-14);
        assert!((p.flat(1) + 2.0 * f).abs() < 1e-14);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = store(&[0.0]);
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        match adamw_update(&mut p, &store(&[f64::NAN]), &mut st) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.flat(0), 0.0);
        assert_eq!(st.step(), 0);
    }

    #[test]
    fn norm_round_trip() {
        let mel = MelSpectrogram::new(vec![1.0f64, 3.0, 5.0, 7.0], 2, 2).unwrap();
        let norm = MelNorm::fit([&mel]).unwrap();
        assert!((norm.shift - 4.0).abs() < 1e-12);
        assert!((norm.scale - 5f64.sqrt()).abs() < 1e-12);
        let back = norm.denormalize(&norm.normalize(&mel));
        for (a, b) in back.values().iter().zip(mel.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn step_streams_differ() {
        let a: u64 = step_rng(1, 0).gen();
        let b: u64 = step_rng(1, 1).gen();
        let c: u64 = step_rng(1, 0).gen();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
