use std::path::Path;
use std::process::{Command, Output};

fn melflow(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_melflow"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("running melflow")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = r#"
[model]
n_blocks = 1
model_dim = 16
n_heads = 2
conv_kernel = 3
ff_mult = 2
time_embed_dim = 8
head_channels = 4

[train]
manifest = "data/manifest.tsv"
checkpoint = "run/ck.bin"
batch_size = 2
total_steps = 3
checkpoint_interval = 2
lr = 1e-3

[simulate]
out_dir = "data"
synth_clips = 2
synth_seconds = 0.3

[[simulate.specs]]
snr_db = 5.0
"#;

#[test]
fn unknown_config_key_is_a_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nbatch_sise = 3\n").unwrap();
    let out = melflow(&["train", "--config", "bad.toml"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("batch_sise"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("melflow: "));
}

#[test]
fn missing_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = melflow(&["plot", "nothing.wav", "x.png"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing.wav"));
}

#[test]
fn simulate_train_refine_eval_plot() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("run.toml"), TINY).unwrap();
    std::fs::create_dir(root.join("run")).unwrap();

    let out = ok(&melflow(&["simulate", "--config", "run.toml"], root));
    assert!(out.contains("wrote 2 pairs"), "{out}");
    let manifest = std::fs::read_to_string(root.join("data/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
    assert!(root.join("data/distorted/tone_00_00.wav").exists());

    let out = ok(&melflow(&["train", "--config", "run.toml"], root));
    assert!(out.contains("step 3"), "{out}");
    let ck = std::fs::read(root.join("run/ck.bin")).unwrap();

    // training is reproducible from the config alone
    ok(&melflow(&["train", "--config", "run.toml"], root));
    assert_eq!(std::fs::read(root.join("run/ck.bin")).unwrap(), ck);

    // resuming from step 3 runs on to the new total
    let resumed = TINY.replace("total_steps = 3", "total_steps = 5\nresume_from = \"run/ck.bin\"");
    std::fs::write(root.join("resume.toml"), resumed).unwrap();
    let out = ok(&melflow(&["train", "--config", "resume.toml"], root));
    assert!(out.contains("step 5"), "{out}");

    let refine = |name: &str| {
        ok(&melflow(
            &[
                "refine",
                "data/distorted/tone_00_00.wav",
                name,
                "--checkpoint",
                "run/ck.bin",
                "--steps",
                "4",
                "--config",
                "run.toml",
                "--mel-out",
                "refined.mel",
            ],
            root,
        ));
        std::fs::read(root.join(name)).unwrap()
    };
    let a = refine("a.wav");
    let b = refine("b.wav");
    assert_eq!(a, b);
    let refined = melflow::dsp::load_wav::<f64>(root.join("a.wav")).unwrap();
    let distorted = melflow::dsp::load_wav::<f64>(root.join("data/distorted/tone_00_00.wav")).unwrap();
    assert_eq!(refined.len(), distorted.len());
    assert_eq!(refined.sample_rate(), 24_000);

    ok(&melflow(
        &[
            "eval",
            "data/manifest.tsv",
            "report.tsv",
            "--checkpoint",
            "run/ck.bin",
            "--steps",
            "4",
            "--config",
            "run.toml",
            "--write-refined",
            "refined",
        ],
        root,
    ));
    let report = std::fs::read_to_string(root.join("report.tsv")).unwrap();
    let records: Vec<_> = report
        .lines()
        .map(|l| melflow::eval::EvalRecord::parse_line(l).unwrap())
        .collect();
    assert_eq!(records.len(), 2);
    assert!(root.join("refined/tone_01_00.wav").exists());

    // scoring the clean files against themselves hits the cap
    std::fs::create_dir(root.join("oracle")).unwrap();
    for id in ["tone_00", "tone_01"] {
        std::fs::copy(
            root.join(format!("data/clean/{id}.wav")),
            root.join(format!("oracle/{id}_00.wav")),
        )
        .unwrap();
    }
    ok(&melflow(
        &["eval", "data/manifest.tsv", "oracle.tsv", "--refined-dir", "oracle"],
        root,
    ));
    for line in std::fs::read_to_string(root.join("oracle.tsv")).unwrap().lines() {
        let r = melflow::eval::EvalRecord::parse_line(line).unwrap();
        assert_eq!(r.si_snr_refined, 100.0);
        assert_eq!(r.lsd_refined, 0.0);
        assert!(r.si_snr_distorted < 10.0);
    }

    ok(&melflow(&["plot", "a.wav", "a.png"], root));
    ok(&melflow(&["plot", "refined.mel", "mel.png"], root));
    let frames = 7200 / 256 + 1;
    for png in ["a.png", "mel.png"] {
        let img = image_dims(&root.join(png));
        assert_eq!(img, (frames, 128));
    }
}

/// Width and height from a PNG's IHDR chunk.
fn image_dims(path: &Path) -> (u32, u32) {
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    let be = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
    (be(16), be(20))
}
