use std::path::Path;
use std::process::{Command, Output};

use fuselab::synth::Corpus;
use fuselab::train::{Ablation, CompareNet, ModelConfig};
use fuselab::volgrid::{read_channels, read_labels};

fn fuselab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fuselab")).args(args).env_remove("FUSELAB_THREADS").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = fuselab(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn small_corpus(dir: &Path, seed: &str) {
    ok(&["synth-gen", "--dims", "16", "--classes", "3", "--count", "3", "--train", "2", "--seed", seed, "--out", dir.to_str().unwrap()]);
}

#[test]
fn synth_gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_corpus(&a, "7");
    small_corpus(&b, "7");
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.iter().any(|n| n == "manifest.json"));
    assert_eq!(names.len(), 3 * 2 + 2);
    for name in names {
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
    let corpus = Corpus::load(&a).unwrap();
    assert_eq!((corpus.spec.seed, corpus.spec.side, corpus.subjects.len()), (7, 16, 3));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("corpus.cfg");
    std::fs::write(&cfg, "# small corpus\nside = 12\ncount = 2\ntrain = 1\nnum_classes = 2\n").unwrap();
    let out = tmp.path().join("c");
    ok(&["synth-gen", "--config", cfg.to_str().unwrap(), "--dims", "10", "--out", out.to_str().unwrap()]);
    let corpus = Corpus::load(&out).unwrap();
    assert_eq!((corpus.spec.side, corpus.spec.count, corpus.spec.num_classes), (10, 2, 2));
    let snapshot: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("synth-gen.config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["settings"]["side"], 10);
    assert_eq!(snapshot["settings"]["count"], 2);
}

#[test]
fn refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("c");
    small_corpus(&dir, "1");
    let again = fuselab(&["synth-gen", "--dims", "16", "--count", "3", "--train", "2", "--out", dir.to_str().unwrap()]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["synth-gen", "--dims", "16", "--count", "3", "--train", "2", "--force", "--out", dir.to_str().unwrap()]);
}

#[test]
fn segment_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_corpus(&data, "3");
    let corpus = Corpus::load(&data).unwrap();
    let config = ModelConfig {
        mode: Ablation::ClassificationOnly,
        num_classes: 3,
        radius: 3,
        hidden: 4,
        base_channels: 2,
        levels: 2,
        embed_dim: 3,
        sigma: 1.0,
    };
    let model = CompareNet::init(config, 11).unwrap();
    assert_eq!(model.alpha(), 0.0);
    let ckpt = tmp.path().join("model.vgp");
    model.save(&ckpt).unwrap();

    let out = tmp.path().join("seg");
    let image = |i: usize| data.join(format!("vol{i:03}_image.vgf"));
    ok(&[
        "segment",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--target",
        image(2).to_str().unwrap(),
        "--atlas",
        image(0).to_str().unwrap(),
        "--atlas-labels",
        data.join("vol000_labels.vgf").to_str().unwrap(),
        "--probabilities",
        "--out",
        out.to_str().unwrap(),
    ]);
    let expected = model.segment(&corpus.subjects[2].image, &corpus.subjects[0].image, &corpus.subjects[0].labels).unwrap();
    assert_eq!(read_labels(out.join("labels.vgf")).unwrap(), expected.labels);
    let probs = read_channels(out.join("probabilities.vgf")).unwrap();
    // probabilities are stored as f32
    assert_eq!(probs.dims(), expected.probabilities.dims());
    for (a, b) in probs.data().iter().zip(expected.probabilities.data()) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

#[test]
fn eval_scores_a_perfect_prediction() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_corpus(&data, "4");
    let labels = data.join("vol001_labels.vgf");
    let out = tmp.path().join("eval");
    ok(&["eval", "--pred", labels.to_str().unwrap(), "--truth", labels.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("dice.json")).unwrap()).unwrap();
    assert_eq!(report["mean"], 1.0);
}

#[test]
fn perturb_changes_only_test_images() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_corpus(&data, "5");
    let out = tmp.path().join("sick");
    ok(&[
        "perturb",
        "--manifest",
        data.to_str().unwrap(),
        "--pathology-radius-lo",
        "2",
        "--pathology-radius-hi",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    let (clean, sick) = (Corpus::load(&data).unwrap(), Corpus::load(&out).unwrap());
    for (c, s) in clean.subjects.iter().zip(&sick.subjects) {
        assert_eq!(c.labels, s.labels);
        assert_eq!(c.image == s.image, c.split == fuselab::synth::Split::Train, "{}", c.id);
    }
}

#[test]
fn bench_reports_agreement() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    let run = ok(&["bench", "--dims", "8", "--r", "3", "--features", "3", "--classes", "2", "--runs", "1", "--out", out.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&run.stdout).contains("speedup"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    assert!(report["max_abs_diff"].as_f64().unwrap() < 1e-10);
    assert_eq!(report["config"]["radius"], 3);
}

#[test]
fn missing_or_invalid_flags_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    for args in [
        vec!["segment", "--target", "t.vgf", "--out", out],
        vec!["train", "--out", out],
        vec!["eval", "--pred", "p.vgf", "--out", out],
        vec!["bench", "--dims", "many", "--out", out],
        vec!["train", "--manifest", "x", "--ablation", "bogus", "--out", out],
        vec!["frobnicate"],
    ] {
        let res = fuselab(&args);
        assert!(!res.status.success(), "{args:?} should fail");
        assert_eq!(res.status.code(), Some(2), "{args:?} is a usage error");
    }
    let missing = fuselab(&["atlas-select", "--manifest", "/nonexistent/manifest.json", "--out", out]);
    assert_eq!(missing.status.code(), Some(1));
}
