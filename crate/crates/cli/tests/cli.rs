use std::path::Path;
use std::process::{Command, Output};

use cats_core::nifti::{read_label_volume, write_label_volume};
use cats_core::volume::{Grid3, LabelVolume};

fn cats(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cats")).args(args).env("CATS_NUM_THREADS", "1").output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn write(path: &Path, contents: &str) {
    std::fs::write(path, contents).unwrap();
}

fn make_phantoms(dir: &Path, count: usize, extents: usize, seed: u64) -> std::path::PathBuf {
    let spec = dir.join(format!("phantoms_{seed}.toml"));
    write(
        &spec,
        &format!(
            "count = {count}\nextents = [{e}, {e}, {e}]\nradius = [3.0, 5.0]\nobjects_per_volume = 1\nseed = {seed}\n",
            e = extents
        ),
    );
    let out = dir.join(format!("data_{seed}"));
    let o = cats(&["phantoms", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    out
}

fn toy_config(dir: &Path, data: &Path, name: &str, steps: u64) -> std::path::PathBuf {
    let cfg = dir.join(format!("{name}.toml"));
    write(
        &cfg,
        &format!(
            "preset = \"toy\"\noutput_dir = \"{name}\"\n\n[data]\ntrain = \"{}\"\n\n[preprocess.window]\nmode = \"fixed\"\nlo = 0.0\nhi = 1.0\n\n[train]\nmax_steps = {steps}\nval_interval = 2\nlr = 0.001\n",
            data.display()
        ),
    );
    cfg
}

#[test]
fn missing_data_directory_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), &dir.path().join("nowhere"), "run", 2);
    let o = cats(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = text(&o.stderr);
    assert!(err.contains("data.train") && err.contains("nowhere"), "{}", err);
}

#[test]
fn malformed_config_and_environment_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    write(&cfg, "output_dir = \"x\"\n[data]\ntrain = \".\"\n[train]\nlearning_rate = 0.1\n");
    let o = cats(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("learning_rate"));

    let o = Command::new(env!("CARGO_BIN_EXE_cats"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("CATS_NUM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("CATS_NUM_THREADS"));
}

#[test]
fn data_errors_exit_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_phantoms(dir.path(), 2, 16, 1);
    std::fs::remove_file(data.join("labels/phantom_001.nii.gz")).unwrap();
    let cfg = toy_config(dir.path(), &data, "run", 2);
    let o = cats(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(text(&o.stderr).contains("phantom_001"));
}

#[test]
fn desk_smoke_run_writes_checkpoints_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_phantoms(dir.path(), 2, 32, 2);
    let cfg = dir.path().join("desk.toml");
    write(
        &cfg,
        &format!(
            "preset = \"desk\"\noutput_dir = \"desk_run\"\n\n[data]\ntrain = \"{}\"\n\n[preprocess.window]\nmode = \"fixed\"\nlo = 0.0\nhi = 1.0\n\n[train]\nmax_steps = 4\nval_interval = 2\n",
            data.display()
        ),
    );
    let o = cats(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let run = dir.path().join("desk_run");
    for file in ["best.ckpt", "last.ckpt", "manifest.json", "loss.tsv"] {
        assert!(run.join(file).is_file(), "{} missing", file);
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["dataset"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["dataset"][0]["image_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["config"]["network"]["input_extents"], serde_json::json!([32, 32, 32]));
    let log = std::fs::read_to_string(run.join("loss.tsv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.lines().nth(2).unwrap().split('\t').nth(2).unwrap() != "-");
}

#[test]
fn seed_flag_gives_identical_loss_logs() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_phantoms(dir.path(), 3, 16, 3);
    let cfg = toy_config(dir.path(), &data, "seeded", 4);
    let run = |seed: &str| {
        let o = cats(&["train", "--config", cfg.to_str().unwrap(), "--seed", seed]);
        assert!(o.status.success(), "{}", text(&o.stderr));
        std::fs::read_to_string(dir.path().join("seeded/loss.tsv")).unwrap()
    };
    let (a, b, c) = (run("7"), run("7"), run("8"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let manifest = std::fs::read_to_string(dir.path().join("seeded/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 8"));
}

#[test]
fn predict_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_phantoms(dir.path(), 2, 16, 4);
    let cfg = toy_config(dir.path(), &data, "run", 2);
    assert!(cats(&["train", "--config", cfg.to_str().unwrap()]).status.success());
    let ckpt = dir.path().join("run/best.ckpt");

    let preds = dir.path().join("preds");
    std::fs::create_dir(&preds).unwrap();
    for case in ["phantom_000", "phantom_001"] {
        let input = data.join(format!("images/{case}.nii.gz"));
        let out = preds.join(format!("{case}.nii.gz"));
        let o = cats(&[
            "predict", "--ckpt", ckpt.to_str().unwrap(), "--in", input.to_str().unwrap(), "--out", out.to_str().unwrap(),
            "--window", "16,16,16", "--overlap", "0.5",
        ]);
        assert!(o.status.success(), "{}", text(&o.stderr));
        let labels = read_label_volume(&out, None).unwrap();
        assert_eq!(labels.dims(), [16; 3]);
        assert!(labels.data.data().iter().all(|&c| c < 2));
    }

    let o = cats(&["evaluate", "--pred", preds.to_str().unwrap(), "--truth", data.to_str().unwrap(), "--classes", "1"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("HD95 (mm)"));
    let first = std::fs::read(preds.join("metrics.tsv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 3);
    let again = cats(&["evaluate", "--pred", preds.to_str().unwrap(), "--truth", data.to_str().unwrap(), "--classes", "1"]);
    assert!(again.status.success());
    assert_eq!(std::fs::read(preds.join("metrics.tsv")).unwrap(), first);

    let o = cats(&[
        "predict", "--ckpt", ckpt.to_str().unwrap(), "--in", data.join("images/phantom_000.nii.gz").to_str().unwrap(),
        "--out", preds.join("x.nii.gz").to_str().unwrap(), "--window", "10,16,16",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluating_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_phantoms(dir.path(), 2, 16, 5);
    let report = dir.path().join("self.tsv");
    let labels = data.join("labels");
    let o = cats(&[
        "evaluate", "--pred", labels.to_str().unwrap(), "--truth", labels.to_str().unwrap(), "--classes", "0,1",
        "--report", report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    for line in std::fs::read_to_string(&report).unwrap().lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(&cols[2..], &["1.000000", "0.000000", "0.000000"], "{}", line);
    }
}

#[test]
fn evaluate_reports_missing_and_mismatched_cases() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, truth) = (dir.path().join("pred"), dir.path().join("truth"));
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&truth).unwrap();
    let vol = |dims| LabelVolume::with_spacing(Grid3::filled(dims, 1u16), 2, [1.0; 3]).unwrap();
    write_label_volume(&vol([4, 4, 4]), pred.join("a.nii.gz")).unwrap();
    let o = cats(&["evaluate", "--pred", pred.to_str().unwrap(), "--truth", truth.to_str().unwrap(), "--classes", "1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(text(&o.stderr).contains("a.nii.gz"));

    write_label_volume(&vol([4, 4, 5]), truth.join("a.nii.gz")).unwrap();
    let o = cats(&["evaluate", "--pred", pred.to_str().unwrap(), "--truth", truth.to_str().unwrap(), "--classes", "1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(text(&o.stderr).contains("extent"));
}

#[test]
fn phantoms_are_reproducible_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = make_phantoms(dir.path(), 2, 16, 6);
    let bytes = std::fs::read(a.join("images/phantom_001.nii.gz")).unwrap();
    std::fs::remove_dir_all(&a).unwrap();
    let b = make_phantoms(dir.path(), 2, 16, 6);
    assert_eq!(std::fs::read(b.join("images/phantom_001.nii.gz")).unwrap(), bytes);
    assert!(b.join("objects.json").is_file());
}
