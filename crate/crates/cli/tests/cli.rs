use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ctxhead::dataio::{load_detections, load_scenes, quantize_score, save_detections};
use ctxhead::nets::ModelArchive;
use ctxhead::{BoundingBox, GroundTruth, LocalModel, SceneDetections, SceneRecord};

const SMALL: &str = r#"
[synth]
train_scenes = 80
validation_scenes = 25
test_scenes = 25

[local.sgd]
epochs = 2

[global.sgd]
epochs = 2

[pairwise]
clusters = 4

[pairwise.sgd]
epochs = 1
"#;

fn ctxhead(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxhead"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = ctxhead(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

/// Data plus all three models in `dir/out`.
fn pipeline(dir: &Path) {
    fs::write(dir.join("small.toml"), SMALL).unwrap();
    ok(dir, &["synth", "--config", "small.toml"]);
    for kind in ["local", "global"] {
        ok(dir, &["train", kind, "--data", "out/train.jsonl", "--config", "small.toml"]);
    }
    ok(
        dir,
        &["train", "pairwise", "--data", "out/train.jsonl", "--local", "out/local.model", "--config", "small.toml"],
    );
}

const MODELS: [&str; 6] = [
    "--local",
    "out/local.model",
    "--global",
    "out/global.model",
    "--pairwise",
    "out/pairwise.model",
];

fn with_models<'a>(head: &[&'a str]) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend_from_slice(&MODELS);
    v
}

#[test]
fn synth_writes_three_splits_reproducibly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        fs::write(d.path().join("c.toml"), "[synth]\ntrain_scenes = 5\nvalidation_scenes = 3\ntest_scenes = 2\n").unwrap();
        ok(d.path(), &["synth", "--config", "c.toml", "--seed", "17"]);
    }
    for f in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.path().join("out").join(f)).unwrap());
    }
    assert!(a.path().join("out/manifest-synth.json").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.toml"), "[synth]\nno_such_field = 3\n").unwrap();
    assert_eq!(code(&ctxhead(d.path(), &["synth", "--config", "bad.toml"])), 1);
    fs::write(d.path().join("bad2.toml"), "[synth]\nambiguity_rate = 1.5\n").unwrap();
    assert_eq!(code(&ctxhead(d.path(), &["synth", "--config", "bad2.toml"])), 1);
    assert_eq!(code(&ctxhead(d.path(), &["frobnicate"])), 1);
    assert_eq!(code(&ctxhead(d.path(), &["synth", "--threads", "0"])), 1);
    assert_eq!(code(&ctxhead(d.path(), &["--help"])), 0);

    let o = ctxhead(d.path(), &["train", "pairwise", "--data", "whatever.jsonl"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("local model"));
}

#[test]
fn runtime_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let o = ctxhead(d.path(), &["train", "local", "--data", "missing.jsonl"]);
    assert_eq!(code(&o), 2);
    fs::write(d.path().join("broken.jsonl"), "{not json}\n").unwrap();
    assert_eq!(code(&ctxhead(d.path(), &["train", "local", "--data", "broken.jsonl"])), 2);
}

#[test]
fn end_to_end_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    pipeline(dir);
    for kind in ["local", "global", "pairwise"] {
        let trace = fs::read_to_string(dir.join(format!("out/{kind}_trace.csv"))).unwrap();
        assert!(trace.lines().count() > 1, "{kind} trace is empty");
    }

    // local mode reports raw local scores
    ok(dir, &["detect", "--scenes", "out/test.jsonl", "--local", "out/local.model", "--mode", "local"]);
    let local = LocalModel::from_archive(&ModelArchive::from_bytes(&fs::read(dir.join("out/local.model")).unwrap()).unwrap()).unwrap();
    let scenes = load_scenes(&dir.join("out/test.jsonl")).unwrap();
    let dets = load_detections(&dir.join("out/detections.csv")).unwrap();
    for sd in &dets {
        let scene = scenes.iter().find(|s| s.scene_id == sd.scene_id).unwrap();
        for (b, s) in &sd.detections {
            let c = scene.candidates.iter().find(|c| c.bbox == *b).unwrap();
            assert_eq!(*s, quantize_score(local.score(&c.descriptor).unwrap()));
        }
    }
    let local_dets = fs::read(dir.join("out/detections.csv")).unwrap();

    // full mode with the identity combination equals local mode
    let mut args = with_models(&["detect", "--scenes", "out/test.jsonl", "--mode", "full"]);
    args.extend_from_slice(&["--alpha", "1", "--beta", "0", "--gamma", "1"]);
    ok(dir, &args);
    assert_eq!(fs::read(dir.join("out/detections.csv")).unwrap(), local_dets);

    // a mode without its model is refused
    let o = ctxhead(dir, &["detect", "--scenes", "out/test.jsonl", "--local", "out/local.model", "--mode", "full"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("pairwise"));

    // calibrate, detect with the result, evaluate
    ok(dir, &with_models(&["calibrate", "--scenes", "out/val.jsonl", "--mode", "full"]));
    ok(dir, &with_models(&["detect", "--scenes", "out/test.jsonl", "--mode", "full", "--calibration", "out/calibration.json"]));
    let first = ok(dir, &["eval", "--detections", "out/detections.csv", "--scenes", "out/test.jsonl"]);
    assert!(first.trim().starts_with("AP "));
    let ap = first.trim().trim_start_matches("AP ");
    assert_eq!(ap.split('.').nth(1).unwrap().len(), 4);
    assert_eq!(first, ok(dir, &["eval", "--detections", "out/detections.csv", "--scenes", "out/test.jsonl"]));
    let csv = fs::read_to_string(dir.join("out/pr.csv")).unwrap();
    assert!(csv.starts_with("score,tp_cum,fp_cum,precision,recall\n"));
    assert!(fs::read_to_string(dir.join("out/pr.svg")).unwrap().starts_with("<svg"));

    // the fraction 1.0 row is the unfiltered local AP
    ok(dir, &["detect", "--scenes", "out/test.jsonl", "--local", "out/local.model", "--mode", "local", "--out", "plain"]);
    let plain = ok(dir, &["eval", "--detections", "plain/detections.csv", "--scenes", "out/test.jsonl", "--out", "plain"]);
    let table = ok(
        dir,
        &["filter-bench", "--scenes", "out/test.jsonl", "--local", "out/local.model", "--global", "out/global.model", "--fractions", "1.0,0.3"],
    );
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].ends_with(plain.trim()), "{} vs {}", rows[0], plain.trim());
    let csv = fs::read_to_string(dir.join("out/filter_bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn pipeline_outputs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        pipeline(d);
        ok(d, &with_models(&["detect", "--scenes", "out/test.jsonl", "--mode", "full", "--beta", "-0.5", "--gamma", "0.7", "--threads", "2"]));
        ok(d, &["eval", "--detections", "out/detections.csv", "--scenes", "out/test.jsonl"]);
    }
    for f in [
        "local.model",
        "global.model",
        "pairwise.model",
        "local_trace.csv",
        "global_trace.csv",
        "pairwise_trace.csv",
        "detections.csv",
        "pr.csv",
    ] {
        assert_eq!(
            fs::read(a.path().join("out").join(f)).unwrap(),
            fs::read(b.path().join("out").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

fn fixture_files(dir: &Path, truth: &[(f64, bool)], dets: &[(f64, f64)]) {
    let scene = SceneRecord {
        scene_id: "fixture".into(),
        width: 200.0,
        height: 100.0,
        ground_truth: truth
            .iter()
            .map(|&(x, difficult)| GroundTruth {
                bbox: BoundingBox::new(x, 0.0, 10.0, 10.0),
                difficult,
            })
            .collect(),
        candidates: Vec::new(),
        global: Vec::new(),
    };
    ctxhead::dataio::save_scenes(&dir.join("scenes.jsonl"), &[scene]).unwrap();
    let d = SceneDetections {
        scene_id: "fixture".into(),
        detections: dets.iter().map(|&(x, s)| (BoundingBox::new(x, 0.0, 10.0, 10.0), s)).collect(),
    };
    save_detections(&dir.join("dets.csv"), &[d]).unwrap();
}

#[test]
fn eval_fixtures() {
    let d = tempfile::tempdir().unwrap();
    fixture_files(d.path(), &[(0.0, false), (50.0, false)], &[(0.0, 0.9), (100.0, 0.8), (50.0, 0.7)]);
    assert_eq!(ok(d.path(), &["eval", "--detections", "dets.csv", "--scenes", "scenes.jsonl"]).trim(), "AP 0.8333");
    fixture_files(d.path(), &[(0.0, false), (50.0, false)], &[(0.0, 0.9), (50.0, 0.7)]);
    assert_eq!(ok(d.path(), &["eval", "--detections", "dets.csv", "--scenes", "scenes.jsonl"]).trim(), "AP 1.0000");
}

#[test]
fn verify_suites() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(d.path(), &["verify", "--suite", "eval-fixtures"]);
    assert!(out.lines().all(|l| l.starts_with("PASS")));
    let out = ok(d.path(), &["verify", "--suite", "inference-oracle"]);
    assert!(out.contains("1000 instances"));

    let o = ctxhead(d.path(), &["verify", "--suite", "gradcheck", "--corrupt-param", "3"]);
    assert_eq!(code(&o), 2);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("FAIL gradcheck/end-to-end") && text.contains("fe[3]"), "{text}");
}
