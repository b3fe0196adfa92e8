use std::path::Path;
use std::process::Command;

use geco::audio::read_wav;
use geco::cli::checkpoint::Checkpoint;
use geco::cli::commands::{load_examples, read_manifest};

const TINY: [&str; 12] = [
    "--set",
    "splits.train=6",
    "--set",
    "splits.val=1",
    "--set",
    "splits.test=2",
    "--set",
    "training.separator.epochs=1",
    "--set",
    "training.geco.epochs=1",
    "--set",
    "training.finetune.epochs=1",
];

fn geco(out: &Path, args: &[&str]) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_geco"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(TINY)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&o.stdout).into_owned() + &String::from_utf8_lossy(&o.stderr);
    (o.status.code().unwrap(), text)
}

#[test]
fn stages_out_of_order_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["train-sep", "train-geco", "finetune"] {
        let (code, text) = geco(dir.path(), &[cmd]);
        assert_eq!(code, 3, "{cmd}: {text}");
        assert!(text.contains("ordering error"), "{text}");
    }
    let (code, _) = geco(dir.path(), &["eval", "--mode", "sep_only"]);
    assert_eq!(code, 3);
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = geco(dir.path(), &["simulate", "--set", "bridge.c=0"]);
    assert_eq!(code, 2, "{text}");
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[bridge]\nunknown_key = 1\n").unwrap();
    let (code, _) = geco(dir.path(), &["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 2);
    let (code, _) = geco(dir.path(), &["no-such-command"]);
    assert_eq!(code, 2);
}

#[test]
fn simulate_is_deterministic_and_guarded() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(geco(a.path(), &["simulate", "--seed", "4"]).0, 0);
    assert_eq!(geco(b.path(), &["simulate", "--seed", "4"]).0, 0);
    for split in ["train", "val", "test"] {
        let ma = read_manifest(&a.path().join(format!("data/{split}.jsonl"))).unwrap();
        let mb = read_manifest(&b.path().join(format!("data/{split}.jsonl"))).unwrap();
        assert_eq!(ma, mb);
    }
    let (code, text) = geco(a.path(), &["simulate", "--seed", "4"]);
    assert_eq!(code, 2, "{text}");
    assert_eq!(geco(a.path(), &["simulate", "--seed", "5", "--force"]).0, 0);
    let mc = read_manifest(&a.path().join("data/train.jsonl")).unwrap();
    let mb = read_manifest(&b.path().join("data/train.jsonl")).unwrap();
    assert_ne!(mc[0].sha256, mb[0].sha256);

    let ex = load_examples(&b.path().join("data/train.jsonl")).unwrap();
    assert_eq!(ex.len(), 6);
    for (e, row) in ex.iter().zip(&mb) {
        assert_eq!(e.num_samples(), row.num_samples);
        assert_eq!(e.sources.len(), 2);
        // Quantized sources plus noise reproduce the quantized mixture.
        let err = e.reconstruction_error();
        assert!(err < 3.0 / 32768.0, "{err}");
    }
}

#[test]
fn full_pipeline_on_a_tiny_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for cmd in ["simulate", "train-sep", "train-geco", "finetune"] {
        let (code, text) = geco(out, &[cmd]);
        assert_eq!(code, 0, "{cmd}: {text}");
    }
    let sep = Checkpoint::load(&out.join("separator.ckpt")).unwrap();
    let model = sep.to_separator().unwrap();
    assert_eq!(sep.meta["complete"], true);
    let again = Checkpoint::from_bytes(&sep.to_bytes()).unwrap();
    assert_eq!(again.to_separator().unwrap(), model);
    let geco_ck = Checkpoint::load(&out.join("geco.ckpt")).unwrap();
    assert_eq!(geco_ck.ema.as_deref(), Some(geco_ck.params.as_slice()));
    assert!(out.join("finetune.report.jsonl").exists());
    assert!(out.join("geco.config.toml").exists());

    let test = read_manifest(&out.join("data/test.jsonl")).unwrap();
    let mix = out.join("data").join(&test[0].mixture);
    let (code, text) = geco(out, &["separate", mix.to_str().unwrap(), "--mode", "fastgeco"]);
    assert_eq!(code, 0, "{text}");
    let files: Vec<_> = text.lines().filter(|l| l.ends_with(".wav")).collect();
    assert_eq!(files.len(), 2);
    for f in files {
        let w = read_wav(f).unwrap();
        assert_eq!(w.len(), test[0].num_samples);
        assert!(w.samples.iter().all(|v| v.abs() <= 1.0));
    }

    for mode in ["sep_only", "geco", "fastgeco", "geco_one_step"] {
        let (code, text) = geco(out, &["eval", "--mode", mode]);
        assert_eq!(code, 0, "{mode}: {text}");
        let csv = std::fs::read_to_string(out.join(format!("eval_{mode}.csv"))).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 4 + 2);
        let col = |l: &str| l.split(',').nth(6).unwrap().parse::<f64>().unwrap();
        let mean = lines[1..5].iter().map(|l| col(l)).sum::<f64>() / 4.0;
        assert!(lines[5].starts_with("mean,"));
        assert!((col(lines[5]) - mean).abs() < 1e-9);
    }
}

#[test]
fn separate_rejects_wrong_sample_rate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(geco(out, &["simulate"]).0, 0);
    assert_eq!(geco(out, &["train-sep"]).0, 0);
    let wav = out.join("x16k.wav");
    let w = geco::audio::Waveform::new(vec![0.1; 1600], 16000).unwrap();
    geco::audio::write_wav(&wav, &w).unwrap();
    let (code, text) = geco(out, &["separate", wav.to_str().unwrap(), "--mode", "sep_only"]);
    assert_eq!(code, 1);
    assert!(text.contains("format error at byte 24"), "{text}");
}
