use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mpsenet::data::{Manifest, ManifestEntry, Split};
use mpsenet::dsp::Waveform;
use mpsenet::wav::{read_wav, write_wav, WavEncoding};
use mpsenet_cli::{resolve_train_config, TrainArgs};

fn mpsenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpsenet")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/smoke")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_manifest_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = mpsenet(&["train", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("paths.manifest"), "{}", stderr(&o));

    let gone = dir.path().join("nope.jsonl");
    let o = mpsenet(&["train", "--out", s(dir.path()), "--manifest", s(&gone)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("paths.manifest"), "{}", stderr(&o));
}

#[test]
fn configuration_mistakes_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = smoke().join("corpus/manifest.jsonl");
    let o = mpsenet(&["train", "--out", s(dir.path()), "--manifest", s(&manifest), "--ablation", "w/o-everything"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 1.0\n").unwrap();
    let o = mpsenet(&["train", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let o = mpsenet(&["train", "--config", s(&dir.path().join("absent.toml"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = mpsenet(&["train", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

fn args() -> TrainArgs {
    TrainArgs {
        config: None,
        seed: None,
        ablations: Vec::new(),
        oracle: None,
        manifest: Some("m.jsonl".into()),
        out: Some("out".into()),
        checkpoint: None,
        epochs: None,
        max_steps: None,
        quiet: true,
    }
}

#[test]
fn ablation_flag_maps_to_the_table_configuration() {
    let cfg = resolve_train_config(&TrainArgs {
        ablations: vec!["w/o-phase-decoder".into()],
        ..args()
    })
    .unwrap();
    assert!(cfg.model.disable_phase_decoder);
    let untouched = resolve_train_config(&args()).unwrap();
    assert_eq!(cfg.loss, untouched.loss);
    assert_eq!(cfg.model.compression_c, untouched.model.compression_c);
}

#[test]
fn command_line_overrides_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "seed = 3\n[train]\nepochs = 7\nmax_steps = 9\n").unwrap();
    let cfg = resolve_train_config(&TrainArgs {
        config: Some(file.clone()),
        epochs: Some(2),
        ..args()
    })
    .unwrap();
    assert_eq!((cfg.seed, cfg.train.epochs, cfg.train.max_steps), (3, 2, Some(9)));
    assert_eq!(cfg.train.batch_size, 4);
}

#[test]
fn enhance_preserves_length_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let ck = smoke().join("generator.ckpt");
    let input = smoke().join("corpus/noisy_testset/p_test_000.wav");
    let (a, b) = (dir.path().join("a.wav"), dir.path().join("b.wav"));
    for out in [&a, &b] {
        let o = mpsenet(&["enhance", "--checkpoint", s(&ck), "--input", s(&input), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let (noisy, enhanced) = (read_wav(&input).unwrap(), read_wav(&a).unwrap());
    assert_eq!(enhanced.len(), noisy.len());
    assert_eq!(enhanced.sample_rate(), 16_000);
    let echo = std::fs::read_to_string(dir.path().join("a.config.toml")).unwrap();
    assert!(echo.contains("base_channels = 16"), "{echo}");
}

#[test]
fn enhance_resamples_other_rates_and_restores_them() {
    let dir = tempfile::tempdir().unwrap();
    let noisy = read_wav(smoke().join("corpus/noisy_testset/p_test_001.wav")).unwrap();
    let up = mpsenet::data::resample(&noisy, 22_050).unwrap();
    let input = dir.path().join("in.wav");
    write_wav(&input, &up, WavEncoding::Pcm16).unwrap();
    let out = dir.path().join("out.wav");
    let ck = smoke().join("generator.ckpt");
    let o = mpsenet(&["enhance", "--checkpoint", s(&ck), "--input", s(&input), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let back = read_wav(&out).unwrap();
    let original = read_wav(&input).unwrap();
    assert_eq!((back.len(), back.sample_rate()), (original.len(), 22_050));
}

#[test]
fn enhance_reports_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"RIFF....not a wav").unwrap();
    let ck = smoke().join("generator.ckpt");
    let o = mpsenet(&["enhance", "--checkpoint", s(&ck), "--input", s(&junk), "--out", s(&dir.path().join("o.wav"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = mpsenet(&["enhance", "--checkpoint", s(&junk), "--input", s(&junk), "--out", s(&dir.path().join("o.wav"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

fn read_report(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("report.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn passthrough_of_clean_audio_hits_the_ssnr_ceiling() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = smoke().join("corpus");
    let entries = ["p_test_000", "p_test_001"]
        .iter()
        .map(|id| {
            let clean = corpus.join(format!("clean_testset/{id}.wav"));
            ManifestEntry {
                clean_path: clean.clone(),
                noisy_path: Some(clean),
                noise_path: None,
                snr_db: None,
                split: Split::Test,
            }
        })
        .collect();
    let manifest = dir.path().join("m.jsonl");
    Manifest { entries }.save(&manifest).unwrap();
    let out = dir.path().join("report");
    let o = mpsenet(&["eval", "--passthrough", "--manifest", s(&manifest), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_report(&out);
    let clips: Vec<_> = rows.iter().filter(|r| r["record"] == "clip").map(|r| &r["clip"]).collect();
    assert_eq!(clips.len(), 2);
    for c in &clips {
        assert_eq!(c["ssnr_db"].as_f64(), Some(35.0), "{c}");
    }
}

#[test]
fn eval_report_means_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = smoke().join("corpus/manifest.jsonl");
    let ck = smoke().join("generator.ckpt");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = mpsenet(&["eval", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["report.jsonl", "report.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rows = read_report(&a);
    let clips: Vec<_> = rows.iter().filter(|r| r["record"] == "clip").map(|r| &r["clip"]).collect();
    let summary = rows.iter().find(|r| r["record"] == "summary").unwrap();
    for key in ["ssnr_db", "si_sdr_db", "oracle_score"] {
        let mean = clips.iter().map(|c| c[key].as_f64().unwrap()).sum::<f64>() / clips.len() as f64;
        let reported = summary[format!("mean_{key}")].as_f64().unwrap();
        assert!((mean - reported).abs() < 1e-12, "{key}: {mean} vs {reported}");
    }
    let o = mpsenet(&["eval", "--manifest", s(&manifest), "--out", s(&a)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn synth_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = mpsenet(&["synth-data", "--out", s(out), "--clips", "8", "--test-clips", "1", "--seconds", "0.25"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let m = Manifest::load(a.join("manifest.jsonl")).unwrap();
    assert_eq!(m.split(Split::Train).count(), 8);
    for e in &m.entries {
        let rel = e.noisy_path.as_ref().unwrap().strip_prefix(&a).unwrap();
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap());
    }
}

#[test]
fn spectrogram_is_written_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let input = smoke().join("corpus/clean_testset/p_test_000.wav");
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    for out in [&a, &b] {
        let o = mpsenet(&["spectrogram", "--input", s(&input), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert!(!bytes.is_empty());
    assert_eq!(bytes, std::fs::read(&b).unwrap());
}

#[test]
fn inspect_reports_counts() {
    let o = mpsenet(&["inspect"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("generator parameters: 2046476"), "{text}");
    let ck = smoke().join("generator.ckpt");
    let o = mpsenet(&["inspect", "--checkpoint", s(&ck)]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("generator parameters: 137756"));
}

#[test]
fn short_clips_survive_enhancement() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("short.wav");
    let w = Waveform::new((0..90).map(|i| (i as f64 * 0.3).sin() * 0.2).collect(), 16_000).unwrap();
    write_wav(&input, &w, WavEncoding::Float32).unwrap();
    let out = dir.path().join("o.wav");
    let ck = smoke().join("generator.ckpt");
    let o = mpsenet(&["enhance", "--checkpoint", s(&ck), "--input", s(&input), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_wav(&out).unwrap().len(), 90);
}
