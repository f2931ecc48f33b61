use std::path::Path;

use melflow::simulate::*;
use melflow::Error;

fn specs() -> Vec<DegradationSpec> {
    vec![
        DegradationSpec {
            snr_db: 5.0,
            ..Default::default()
        },
        DegradationSpec {
            snr_db: 12.0,
            seed: 9,
            ..Default::default()
        },
    ]
}

fn build(root: &Path, seed: u64) -> PairManifest {
    write_tone_set(root.join("src"), 3, 0.4).unwrap();
    build_dataset(
        root.join("src"),
        root.join("out"),
        &specs(),
        seed,
        &NoiseSource::Synthetic(NoiseKind::White),
    )
    .unwrap()
}

#[test]
fn three_files_by_two_specs_give_six_records() {
    let dir = tempfile::tempdir().unwrap();
    let m = build(dir.path(), 0);
    assert_eq!(m.records.len(), 6);
    let ids: Vec<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["tone_00_00", "tone_00_01", "tone_01_00", "tone_01_01", "tone_02_00", "tone_02_01"]);
    assert_eq!(PairManifest::load(dir.path().join("out/manifest.tsv")).unwrap(), m);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    let (ma, mb, mc) = (build(a.path(), 4), build(b.path(), 4), build(c.path(), 5));
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a.path().join("out/manifest.tsv")), read(&b.path().join("out/manifest.tsv")));
    for ((ra, rb), rc) in ma.records.iter().zip(&mb.records).zip(&mc.records) {
        assert_eq!(read(&ra.distorted_path), read(&rb.distorted_path));
        assert_ne!(read(&ra.distorted_path), read(&rc.distorted_path));
    }
}

#[test]
fn measured_snr_and_length_match_each_record() {
    let dir = tempfile::tempdir().unwrap();
    for r in build(dir.path(), 1).records {
        let clean = load_canonical::<f64>(&r.clean_path).unwrap();
        let dist = load_canonical::<f64>(&r.distorted_path).unwrap();
        assert_eq!(clean.len(), dist.len());
        let s: f64 = clean.samples().iter().map(|x| x * x).sum();
        let n: f64 = clean
            .samples()
            .iter()
            .zip(dist.samples())
            .map(|(c, d)| (d - c).powi(2))
            .sum();
        let snr = 10.0 * (s / n).log10();
        assert!((snr - r.spec.snr_db).abs() < 0.1, "{}: {snr} dB", r.id);
    }
}

#[test]
fn empty_source_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("src")).unwrap();
    let r = build_dataset(
        dir.path().join("src"),
        dir.path().join("out"),
        &specs(),
        0,
        &NoiseSource::Synthetic(NoiseKind::Pink),
    );
    assert!(matches!(r, Err(Error::Empty(_))));
}

#[test]
fn recorded_noise_directory_is_used() {
    let dir = tempfile::tempdir().unwrap();
    write_tone_set(dir.path().join("src"), 1, 0.3).unwrap();
    let noise_dir = dir.path().join("noise");
    std::fs::create_dir(&noise_dir).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    melflow::dsp::save_wav(&pink_noise::<f64, _>(5000, 24_000, &mut rng).scaled(0.2), noise_dir.join("n.wav"))
        .unwrap();
    let noise = NoiseSource::<f64>::from_dir(&noise_dir).unwrap();
    let m = build_dataset(dir.path().join("src"), dir.path().join("out"), &specs(), 0, &noise).unwrap();
    assert_eq!(m.records.len(), 2);
}
