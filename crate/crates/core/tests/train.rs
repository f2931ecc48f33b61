use melflow::dsp::MelSpectrogram;
use melflow::flow::{cfm_loss, phi_t, target_field, FlowConfig};
use melflow::net::{Estimator, EstimatorConfig};
use melflow::train::*;
use melflow::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(n_mels: usize) -> EstimatorConfig {
    EstimatorConfig {
        n_blocks: 1,
        model_dim: 16,
        n_heads: 2,
        conv_kernel: 3,
        ff_mult: 2,
        time_embed_dim: 8,
        n_mels,
        head_channels: 4,
        leaky_slope: 0.01,
    }
}

fn random_mel(frames: usize, bins: usize, rng: &mut ChaCha8Rng) -> MelSpectrogram<f64> {
    MelSpectrogram::new((0..frames * bins).map(|_| rng.gen_range(-2.0..2.0)).collect(), frames, bins).unwrap()
}

fn random_pairs(lengths: &[usize], bins: usize, seed: u64) -> Vec<MelPair<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lengths
        .iter()
        .map(|&f| MelPair::new(random_mel(f, bins, &mut rng), random_mel(f, bins, &mut rng)).unwrap())
        .collect()
}

#[test]
fn batch_pads_to_the_longest_pair() {
    let pairs = random_pairs(&[50, 94], 128, 1);
    let refs: Vec<&MelPair<f64>> = pairs.iter().collect();
    let b = make_training_batch(&refs, &mut ChaCha8Rng::seed_from_u64(0), &FlowConfig::default()).unwrap();
    assert_eq!(b.xt.frames(), 94);
    assert_eq!(b.xt.batch(), 2);
    assert_eq!(b.item_mask_count(0), 50);
    assert_eq!(b.item_mask_count(1), 94);
    // padded cells hold zeros in every tensor
    for tensor in [&b.xt, &b.c, &b.x0, &b.target] {
        assert!(tensor.item(0)[50 * 128..].iter().all(|&v| v == 0.0));
    }
}

trait MaskCount {
    fn item_mask_count(&self, i: usize) -> usize;
}

impl MaskCount for TrainingBatch<f64> {
    fn item_mask_count(&self, i: usize) -> usize {
        self.xt.item_mask(i).iter().filter(|&&m| m).count()
    }
}

#[test]
fn batch_is_reproducible_from_the_seed() {
    let pairs = random_pairs(&[12, 9, 12], 16, 2);
    let refs: Vec<&MelPair<f64>> = pairs.iter().collect();
    let draw = |seed| make_training_batch(&refs, &mut ChaCha8Rng::seed_from_u64(seed), &FlowConfig::default()).unwrap();
    let (a, b, c) = (draw(5), draw(5), draw(6));
    assert_eq!(a, b);
    assert_ne!(a.t, c.t);
}

#[test]
fn targets_replay_from_the_stored_prior_draw() {
    let pairs = random_pairs(&[10, 7], 16, 3);
    let refs: Vec<&MelPair<f64>> = pairs.iter().collect();
    for sigma_min in [0.0, 1e-4] {
        let flow = FlowConfig {
            sigma_min,
            ..Default::default()
        };
        let b = make_training_batch(&refs, &mut ChaCha8Rng::seed_from_u64(4), &flow).unwrap();
        for (i, p) in pairs.iter().enumerate() {
            let f = p.clean.n_frames();
            let x0 = Tensor::new(&[f, 16], b.x0.item(i)[..f * 16].to_vec()).unwrap();
            let x1 = Tensor::new(&[f, 16], p.clean.values().to_vec()).unwrap();
            let target = target_field(&x0, &x1, sigma_min).unwrap();
            assert_eq!(target.data(), &b.target.item(i)[..f * 16]);
            let xt = phi_t(&x0, &x1, b.t[i], sigma_min).unwrap();
            assert_eq!(xt.data(), &b.xt.item(i)[..f * 16]);
            assert_eq!(&b.c.item(i)[..f * 16], p.distorted.values());
        }
    }
}

#[test]
fn batch_errors() {
    let flow = FlowConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(make_training_batch::<f64, _>(&[], &mut rng, &flow), Err(Error::Empty(_))));
    let a = random_mel(5, 8, &mut rng);
    let b = random_mel(6, 8, &mut rng);
    assert!(MelPair::new(a, b).is_err());
}

#[test]
fn step_loss_is_the_pre_update_loss() {
    let pairs = random_pairs(&[8, 8], 8, 5);
    let refs: Vec<&MelPair<f64>> = pairs.iter().collect();
    let batch = make_training_batch(&refs, &mut ChaCha8Rng::seed_from_u64(1), &FlowConfig::default()).unwrap();
    let mut est = Estimator::<f64>::new(tiny(8), 3).unwrap();
    let before = est.clone();
    let mut opt = OptimizerState::new(est.params(), AdamWConfig::default());
    let loss = training_step(&batch, &mut est, &mut opt).unwrap();
    let y = before.forward(&batch.xt, &batch.c, &batch.t).unwrap();
    assert_eq!(loss, cfm_loss(y.values(), batch.target.values(), batch.mask()).unwrap());
    assert_ne!(est.params(), before.params());
    assert_eq!(opt.step(), 1);
}

#[test]
fn fixed_batch_overfits_within_200_steps() {
    let pairs = random_pairs(&[16, 16], 16, 6);
    let refs: Vec<&MelPair<f64>> = pairs.iter().collect();
    let batch = make_training_batch(&refs, &mut ChaCha8Rng::seed_from_u64(2), &FlowConfig::default()).unwrap();
    let mut est = Estimator::<f64>::new(tiny(16), 4).unwrap();
    let cfg = AdamWConfig {
        lr: 1e-3,
        ..Default::default()
    };
    let mut opt = OptimizerState::new(est.params(), cfg);
    let first = training_step(&batch, &mut est, &mut opt).unwrap();
    let mut last = first;
    for _ in 1..200 {
        last = training_step(&batch, &mut est, &mut opt).unwrap();
    }
    assert!(last < 0.2 * first, "loss {first} -> {last}");
}

fn trainer(total_steps: u64, seed: u64) -> Trainer<f64> {
    let config = TrainConfig {
        total_steps,
        batch_size: 3,
        seed,
        lr: 1e-3,
        ..Default::default()
    };
    Trainer::new(tiny(8), FlowConfig::default(), config, MelNorm { shift: -4.0, scale: 2.0 }).unwrap()
}

#[test]
fn identical_seeds_give_identical_traces() {
    let pairs = random_pairs(&[6, 9, 4], 8, 7);
    let a = trainer(6, 1).run(&pairs, |_, _, _| Ok(())).unwrap();
    let b = trainer(6, 1).run(&pairs, |_, _, _| Ok(())).unwrap();
    let c = trainer(6, 2).run(&pairs, |_, _, _| Ok(())).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let pairs = random_pairs(&[6, 5], 8, 8);
    let mut t = trainer(3, 3);
    t.run(&pairs, |_, _, _| Ok(())).unwrap();
    let ck = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint::<f64>(&path, Some(&tiny(8))).unwrap();
    assert_eq!(back, ck);
    for (a, b) in back.params.entries().iter().zip(ck.params.entries()) {
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(encode_checkpoint(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn mismatched_config_is_rejected() {
    let ck = trainer(1, 0).checkpoint();
    let bytes = encode_checkpoint(&ck).unwrap();
    let other = EstimatorConfig {
        n_blocks: 2,
        ..tiny(8)
    };
    assert!(matches!(
        decode_checkpoint::<f64>(&bytes, Some(&other)),
        Err(Error::ConfigMismatch { .. })
    ));
    assert!(decode_checkpoint::<f64>(&bytes, None).is_ok());
}

#[test]
fn damaged_checkpoint_is_rejected() {
    let bytes = encode_checkpoint(&trainer(1, 0).checkpoint()).unwrap();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    assert!(matches!(decode_checkpoint::<f64>(&flipped, None), Err(Error::CorruptCheckpoint(_))));
    assert!(matches!(
        decode_checkpoint::<f64>(&bytes[..bytes.len() - 5], None),
        Err(Error::CorruptCheckpoint(_))
    ));
    assert!(matches!(decode_checkpoint::<f64>(b"not a checkpoint", None), Err(Error::CorruptCheckpoint(_))));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let pairs = random_pairs(&[7, 5, 6, 7], 8, 9);
    let (k, extra) = (4, 10);
    let straight = trainer(k + extra, 11).run(&pairs, |_, _, _| Ok(())).unwrap();

    let mut first = trainer(k, 11);
    first.run(&pairs, |_, _, _| Ok(())).unwrap();
    let bytes = encode_checkpoint(&first.checkpoint()).unwrap();
    let ck = decode_checkpoint::<f64>(&bytes, Some(&tiny(8))).unwrap();
    assert_eq!(ck.step, k);
    let config = TrainConfig {
        total_steps: k + extra,
        ..first.config.clone()
    };
    let mut resumed = Trainer::resume(ck, FlowConfig::default(), config).unwrap();
    let tail = resumed.run(&pairs, |_, _, _| Ok(())).unwrap();
    assert_eq!(tail.len() as u64, extra);
    assert_eq!(tail[..], straight[k as usize..]);
    assert_eq!(resumed.step(), k + extra);
}

#[test]
fn non_finite_loss_reports_the_step() {
    let mut pairs = random_pairs(&[5, 5], 8, 10);
    let mut t = trainer(10, 0);
    t.train_step(&pairs).unwrap();
    t.train_step(&pairs).unwrap();
    for p in &mut pairs {
        p.clean.values_mut()[3] = f64::NAN;
    }
    match t.train_step(&pairs) {
        Err(Error::NonFiniteLoss(step)) => assert_eq!(step, 3),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}
