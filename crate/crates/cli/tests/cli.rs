use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn avsync(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avsync")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = avsync(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(avsync(&["bogus"]).status.code(), Some(2));
    assert_eq!(avsync(&["synth", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn validation_errors_exit_with_one_and_structured_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = avsync(&["--out", p(&dir.path().join("o")), "eval", "--corpus", "/definitely/missing.json", "--syncers", "/nowhere"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"]["message"].as_str().unwrap().contains("nowhere"));
}

#[test]
fn synth_is_seeded_and_persists_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["--seed", "7", "--threads", "1", "--out", p(d), "synth", "--clips", "3", "--frames", "50"]);
    }
    assert_eq!(fs::read(a.join("corpus.bin")).unwrap(), fs::read(b.join("corpus.bin")).unwrap());
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["config"]["seed"], 7);
    assert_eq!(cfg["config"]["n_clips"], 3);
}

#[test]
fn config_file_overlays_preset_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("spec.json");
    fs::write(&cfg, r#"{"n_clips": 2, "frames": 60, "g_head": 0.0}"#).unwrap();
    let out = dir.path().join("o");
    ok(&["--config", p(&cfg), "--out", p(&out), "synth", "--frames", "45"]);
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["config"]["n_clips"], 2);
    assert_eq!(resolved["config"]["frames"], 45);
    assert_eq!(resolved["config"]["g_head"], 0.0);
    assert_eq!(resolved["config"]["g_lip"], 1.0);
}

fn write_wav(path: &Path, rate: u32, seconds: f64) {
    let spec = hound::WavSpec { channels: 1, sample_rate: rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for i in 0..(rate as f64 * seconds) as usize {
        let t = i as f64 / rate as f64;
        w.write_sample(((t * 440.0 * std::f64::consts::TAU).sin() * 8000.0) as i16).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn features_pairs_wav_with_keypoints() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("a.wav");
    write_wav(&wav, 16_000, 1.0);
    let kp = dir.path().join("kp.json");
    let frames: Vec<Vec<f64>> = (0..20).map(|t| (0..60).map(|c| (t * c) as f64 * 1e-3).collect()).collect();
    fs::write(&kp, serde_json::to_string(&frames).unwrap()).unwrap();
    let out = dir.path().join("o");
    ok(&["--out", p(&out), "features", "--wav", p(&wav), "--keypoints", p(&kp)]);
    let mfcc: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("mfcc.json")).unwrap()).unwrap();
    assert_eq!(mfcc["frames"].as_array().unwrap().len(), 98);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("corpus.json")).unwrap()).unwrap();
    assert_eq!(manifest["clips"].as_array().unwrap().len(), 1);

    let bad = dir.path().join("b.wav");
    write_wav(&bad, 8_000, 1.0);
    assert_eq!(avsync(&["--out", p(&dir.path().join("o2")), "features", "--wav", p(&bad)]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["--out", p(dir.path()), "gradcheck", "--instances", "1"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(!text.contains("FAIL"), "{text}");
    assert!(dir.path().join("gradcheck.json").exists());
}

#[test]
fn pipeline_end_to_end_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    ok(&["--seed", "3", "--out", p(&d("data")), "synth", "--clips", "10", "--frames", "200"]);
    let corpus = d("data").join("corpus.json");
    ok(&["--seed", "3", "--out", p(&d("sync")), "train-syncers", "--corpus", p(&corpus), "--max-steps", "20"]);
    let syncers = d("sync").join("syncers");
    for l in 1..=4 {
        assert!(syncers.join(format!("syncer_l{l}.ckpt")).exists());
    }
    let gen_cfg = d("gen.json");
    fs::write(&gen_cfg, r#"{"batch_size": 2, "val_every": 2, "val_clips": 2}"#).unwrap();
    for run in ["gen", "gen2"] {
        ok(&["--seed", "3", "--config", p(&gen_cfg), "--out", p(&d(run)), "train-gen", "--corpus", p(&corpus), "--syncers", p(&syncers), "--iterations", "3"]);
    }
    let log = fs::read_to_string(d("gen").join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert_eq!(log, fs::read_to_string(d("gen2").join("train_log.jsonl")).unwrap());
    for key in ["\"iter\"", "\"l_d\"", "\"l_gf\"", "\"l_gs\"", "\"l_rec\"", "\"l_av\"", "\"lr_gen\""] {
        assert!(log.lines().next().unwrap().contains(key), "{key} missing");
    }
    assert!(d("gen").join("confidence_level4.csv").exists());

    ok(&["--out", p(&d("roll")), "rollout", "--generator", p(&d("gen").join("generator.ckpt")), "--corpus", p(&corpus), "--frames", "120"]);
    for run in ["eval", "eval2"] {
        let out = ok(&[
            "--out", p(&d(run)), "eval", "--corpus", p(&corpus), "--syncers", p(&syncers),
            "--generated", p(&d("roll").join("rollout.json")), "--range", "4",
        ]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("Generated"));
    }
    let report = fs::read(d("eval").join("report.json")).unwrap();
    assert_eq!(report, fs::read(d("eval2").join("report.json")).unwrap());
    let rep: serde_json::Value = serde_json::from_slice(&report).unwrap();
    assert_eq!(rep["rows"].as_array().unwrap().len(), 3);
}
