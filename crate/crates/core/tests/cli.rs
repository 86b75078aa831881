mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use facesvm::imageio::{Dataset, WeightedSample};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facesvm"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn faces(dir: &Path) -> PathBuf {
    common::write_manifest(dir, &common::synthetic_faces(6, 6, 14, 12, 51))
}

#[test]
fn missing_manifest_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&["evaluate", "--manifest", "/nonexistent/m.csv", "--seed", "1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["fit-extractor", "--manifest", "/nonexistent/m.csv", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_requires_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let m = faces(dir.path());
    let o = run(&["evaluate", "--manifest", s(&m), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_flag_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let m = faces(dir.path());
    let out = dir.path().join("o");
    for args in [
        vec!["fit-extractor", "--manifest", s(&m), "--out", s(&out), "--variant", "ica"],
        vec!["evaluate", "--manifest", s(&m), "--out", s(&out), "--seed", "1", "--kernel", "sigmoid"],
        vec!["evaluate", "--manifest", s(&m), "--out", s(&out), "--seed", "1", "--c-grid", "2^4..2^1"],
        vec!["evaluate", "--manifest", s(&m), "--out", s(&out), "--seed", "x"],
    ] {
        assert_eq!(run(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn projection_wider_than_image_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = faces(dir.path());
    let o = run(&["fit-extractor", "--manifest", s(&m), "--d", "13", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("width 12"));
}

#[test]
fn single_class_svm_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic_faces(1, 6, 8, 8, 52);
    let m = common::write_manifest(dir.path(), &data);
    let out = dir.path().join("o");
    let o = run(&["fit-extractor", "--manifest", s(&m), "--d", "3", "--out", s(&out)]);
    assert!(o.status.success());
    let p = out.join("pipeline.txt");
    let o = run(&["train", "--manifest", s(&m), "--pipeline", s(&p), "--c-grid", "1", "--sigma-grid", "1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let m = faces(dir.path());
    let out = dir.path().join("o");
    let o = run(&["fit-extractor", "--manifest", s(&m), "--variant", "wpca2d", "--d", "4", "--out", s(&out)]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("2DPCA: d=4") && stdout.contains("captured variance"));
    let p = out.join("pipeline.txt");
    assert!(fs::read_to_string(&p).unwrap().starts_with("PIPELINE v1"));

    let o = run(&["extract", "--manifest", s(&m), "--pipeline", s(&p), "--out", s(&out)]);
    assert!(o.status.success());
    let feats = fs::read_to_string(out.join("features.csv")).unwrap();
    assert_eq!(feats.lines().count(), 37);

    let o = run(&[
        "train", "--manifest", s(&m), "--pipeline", s(&p), "--kernel", "rbf",
        "--c-grid", "2^0..2^3", "--sigma-grid", "0.5,2", "--seed", "3", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("selected C="));
    let model = out.join("model.txt");
    assert!(fs::read_to_string(&model).unwrap().starts_with("SVM_OVA v1"));

    let o = run(&["predict", "--manifest", s(&m), "--pipeline", s(&p), "--model", s(&model), "--out", s(&out)]);
    assert!(o.status.success());
    let preds = fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert!(preds.starts_with("path,label,predicted\n"));

    let o = run(&["cms", "--manifest", s(&m), "--pipeline", s(&p), "--model", s(&model), "--max-rank", "3", "--out", s(&out)]);
    assert!(o.status.success());
    let cms = fs::read_to_string(out.join("cms.csv")).unwrap();
    assert_eq!(cms.lines().count(), 4);
}

#[test]
fn knn_training_writes_knn_model() {
    let dir = tempfile::tempdir().unwrap();
    let m = faces(dir.path());
    let out = dir.path().join("o");
    assert!(run(&["fit-extractor", "--manifest", s(&m), "--variant", "pca", "--k-final", "10", "--out", s(&out)]).status.success());
    let o = run(&["train", "--manifest", s(&m), "--pipeline", s(&out.join("pipeline.txt")), "--classifier", "knn", "--k", "1", "--out", s(&out)]);
    assert!(o.status.success());
    assert!(fs::read_to_string(out.join("model.txt")).unwrap().starts_with("KNN v1"));
}

#[test]
fn evaluate_is_deterministic_and_reads_config() {
    let dir = tempfile::tempdir().unwrap();
    let m = faces(dir.path());
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "variant = \"wpca2d\"\nd = 4\nc_grid = \"2^0..2^4\"\nsigma_grid = \"0.5,1,2\"\nseed = 99\n").unwrap();
    let mut outputs = Vec::new();
    for tag in ["a", "b"] {
        let out = dir.path().join(tag);
        let o = run(&["evaluate", "--config", s(&cfg), "--manifest", s(&m), "--seed", "4", "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("mean accuracy (wpca2d+svm)"));
        outputs.push((
            fs::read(out.join("accuracy.csv")).unwrap(),
            fs::read(out.join("cms.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    let acc = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert_eq!(acc.lines().count(), 5);
}

#[test]
fn inputs_are_left_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let m = faces(dir.path());
    let before: Vec<(PathBuf, Vec<u8>)> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let b = fs::read(&p).unwrap();
            (p, b)
        })
        .collect();
    let out = dir.path().join("o");
    assert!(run(&["evaluate", "--manifest", s(&m), "--classifier", "knn", "--variant", "pca", "--seed", "1", "--out", s(&out)]).status.success());
    for (p, b) in before {
        assert_eq!(fs::read(&p).unwrap(), b);
    }
    let mut produced: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    produced.sort();
    assert_eq!(produced, vec!["accuracy.csv", "cms.csv"]);
}

#[test]
fn weighted_manifest_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic_faces(4, 5, 10, 9, 53);
    let reweighted = Dataset::new(
        data.samples()
            .iter()
            .enumerate()
            .map(|(i, s)| WeightedSample {
                weight: 0.5 + (i % 3) as f64,
                ..s.clone()
            })
            .collect(),
    )
    .unwrap();
    let m = common::write_manifest(dir.path(), &reweighted);
    let o = run(&["fit-extractor", "--manifest", s(&m), "--d", "3", "--out", s(&dir.path().join("o"))]);
    assert!(o.status.success());
}
