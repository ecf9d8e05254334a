use std::path::Path;
use std::process::{Command, Output};

use voxelforge::io::write_matrix;
use voxelforge::report::ComparisonReport;
use voxelforge::DMatrix;

fn voxelforge(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxelforge"))
        .args(args)
        .current_dir(cwd)
        .env("VOXELFORGE_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const SPEC: &str = r#"{"name":"smoke","estimation_samples":400,"test_samples":100,"layer_dims":[32,32],
"rois":[{"name":"V1","linear":20,"nonlinear":20,"noise":20}],"seed":3}"#;

const MODEL: &str = r#"{"validation_samples":80,"romp":{"max_sparsity":10},
"train":{"learning_rate":0.01,"hidden_size":16,"max_epochs":60}}"#;

/// synth, two trainings and a comparison; returns the compare report path.
fn pipeline(dir: &Path) -> std::path::PathBuf {
    std::fs::write(dir.join("spec.json"), SPEC).unwrap();
    std::fs::write(dir.join("model.json"), MODEL).unwrap();
    let steps: [&[&str]; 4] = [
        &["synth", "--spec", "spec.json", "--out", "data"],
        &["train", "--model", "dnn-linear", "--dataset", "data/manifest.json", "--config", "model.json", "--seed", "11", "--out", "lin"],
        &["train", "--model", "dnn-tl", "--dataset", "data/manifest.json", "--config", "model.json", "--seed", "11", "--out", "tl"],
        &[
            "compare", "--bundle-a", "tl", "--bundle-b", "lin", "--dataset", "data/manifest.json",
            "--out", "out/compare.json", "--plots", "out/plots", "--permutations", "200", "--seed", "5",
        ],
    ];
    for step in steps {
        let out = voxelforge(step, dir);
        assert_eq!(code(&out), 0, "{step:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    dir.join("out/compare.json")
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxelforge(&["train"], dir.path());
    assert_eq!(code(&out), 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "{stderr}");
    assert!(out.stdout.is_empty());
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&voxelforge(&["--help"], dir.path())), 0);
    assert_eq!(code(&voxelforge(&["compare", "--help"], dir.path())), 0);
}

#[test]
fn unknown_model_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxelforge(&["train", "--model", "cnn", "--dataset", "m.json", "--out", "b"], dir.path());
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxelforge(&["train", "--model", "gwp", "--dataset", "nope.json", "--out", "b"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing file"));
    assert!(!dir.path().join("b").exists());
}

#[test]
fn invalid_synth_spec_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.json"), r#"{"noise_sigma": -1}"#).unwrap();
    let out = voxelforge(&["synth", "--spec", "spec.json", "--out", "d"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_voxelforge"))
        .args(["synth", "--out", "d"])
        .current_dir(dir.path())
        .env("VOXELFORGE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn gabor_extract_writes_one_row_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let images = DMatrix::from_fn(3, 16 * 16, |r, c| ((r * 7 + c) % 5) as f64 / 4.0);
    write_matrix(&images, dir.path().join("images.nenc")).unwrap();
    std::fs::write(
        dir.path().join("gabor.json"),
        r#"{"frequencies":[1,2,4],"orientations_count":4}"#,
    )
    .unwrap();
    let out = voxelforge(
        &["gabor-extract", "--images", "images.nenc", "--config", "gabor.json", "--dc-channel", "--out", "f/energies.nenc"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let features = voxelforge::io::read_matrix(dir.path().join("f/energies.nenc")).unwrap();
    assert_eq!(features.nrows(), 3);
    // 4 orientations on 1 + 4 + 16 centres, plus the luminance feature
    assert_eq!(features.ncols(), 4 * 21 + 1);
}

#[test]
fn gabor_extract_rejects_frequencies_above_nyquist() {
    let dir = tempfile::tempdir().unwrap();
    let images = DMatrix::from_element(2, 8 * 8, 0.5);
    write_matrix(&images, dir.path().join("images.nenc")).unwrap();
    std::fs::write(dir.path().join("gabor.json"), r#"{"frequencies":[1,8]}"#).unwrap();
    let out = voxelforge(
        &["gabor-extract", "--images", "images.nenc", "--config", "gabor.json", "--out", "e.nenc"],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn smoke_pipeline_produces_a_comparison_and_is_deterministic() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let a = pipeline(first.path());
    let b = pipeline(second.path());

    let report = ComparisonReport::load(&a).unwrap();
    assert_eq!(report.model_a, "dnn_tl");
    assert_eq!(report.model_b, "dnn_linear");
    assert_eq!(report.rois.len(), 1);
    assert_eq!(report.rois[0].scatter.len(), 60);
    for plot in ["V1_scatter.svg", "V1_differences.svg", "V1_curves.svg"] {
        let svg = std::fs::read_to_string(first.path().join("out/plots").join(plot)).unwrap();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"), "{plot}");
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let out = voxelforge(&["report", "--input", "out/compare.json", "--out", "rendered"], first.path());
    assert_eq!(code(&out), 0);
    let summary = std::fs::read_to_string(first.path().join("rendered/summary.txt")).unwrap();
    assert!(summary.contains("A = dnn_tl"));

    // evaluation reports render too
    let out = voxelforge(
        &["evaluate", "--bundle", "tl", "--dataset", "data/manifest.json", "--out", "eval.json"],
        first.path(),
    );
    assert_eq!(code(&out), 0);
    let out = voxelforge(&["report", "--input", "eval.json", "--out", "eval_plots"], first.path());
    assert_eq!(code(&out), 0);
    assert!(first.path().join("eval_plots/V1_curves.svg").exists());
}

#[test]
fn evaluating_against_another_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("a.json"), r#"{"estimation_samples":200,"test_samples":40,"layer_dims":[8],
"rois":[{"name":"R","linear":4}],"seed":1}"#)
    .unwrap();
    std::fs::write(p.join("b.json"), r#"{"estimation_samples":200,"test_samples":40,"layer_dims":[8],
"rois":[{"name":"R","linear":4}],"seed":2}"#)
    .unwrap();
    std::fs::write(p.join("m.json"), r#"{"validation_samples":40,"romp":{"max_sparsity":4}}"#).unwrap();
    for args in [
        &["synth", "--spec", "a.json", "--out", "da"][..],
        &["synth", "--spec", "b.json", "--out", "db"],
        &["train", "--model", "dnn-linear", "--dataset", "da/manifest.json", "--config", "m.json", "--out", "bundle"],
    ] {
        assert_eq!(code(&voxelforge(args, p)), 0, "{args:?}");
    }
    let out = voxelforge(
        &["evaluate", "--bundle", "bundle", "--dataset", "db/manifest.json", "--out", "r.json"],
        p,
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("partition mismatch"));
}
