use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn nsad(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsad"))
        .arg("--out")
        .arg(out)
        .arg("--data-dir")
        .arg(data_dir())
        .args(args)
        .output()
        .expect("binary runs")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

const SMALL: [&str; 6] = ["-s", "draws=2", "-s", "train_size=256", "-s", "batch_size=64"];

#[test]
fn zero_table_writes_table_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = nsad(dir.path(), &["zero-table"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&dir.path().join("zero-table/zero_table.csv"));
    let values: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(values, vec![0.0, 0.0, 0.0, -1.5, 0.0, 0.0, 0.0]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("zero-table/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "zero-table");
    assert_eq!(manifest["config"]["precision"], "32");
    assert!(manifest["wall_time_s"].as_f64().unwrap() >= 0.0);
    let files: Vec<&str> = manifest["artifacts"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(files.contains(&"zero_table.csv") && files.contains(&"config.txt"));
}

#[test]
fn unknown_key_is_a_config_error_listing_keys() {
    let dir = tempfile::tempdir().unwrap();
    let o = nsad(dir.path(), &["zero-table", "-s", "precison=32"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("precison") && err.contains("valid keys") && err.contains("precision"), "{err}");

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "draws = many\n").unwrap();
    let o = nsad(dir.path(), &["--config", cfg.to_str().unwrap(), "zero-table"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_data_error_with_instructions() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_nsad"))
        .args(["--out", dir.path().to_str().unwrap(), "--data-dir", dir.path().join("none").to_str().unwrap(), "train"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train-images-idx3-ubyte") && err.contains("NSAD_DATA_DIR"), "{err}");
}

#[test]
fn sequential_tau1_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["--precision", "64", "thresholds", "-s", "tau1_shuffle=false"];
    args.extend(SMALL);
    let o = nsad(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&dir.path().join("thresholds/thresholds.csv"));
    assert_eq!(rows[0][0], "tau1");
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn infinite_threshold_gives_empty_zone_and_reruns_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["zone-volume", "-s", "tau=inf", "-s", "precision=16"];
    args.extend(SMALL);
    let o = nsad(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let first = dir.path().join("zone-volume");
    let rows = csv_rows(&first.join("volume.csv"));
    assert_eq!(rows[0][6].parse::<f64>().unwrap(), 0.0);
    assert_eq!(rows[0][7].parse::<f64>().unwrap(), 0.0);

    // Re-run from the written config into a fresh directory.
    let again = tempfile::tempdir().unwrap();
    let o = nsad(again.path(), &["--config", first.join("config.txt").to_str().unwrap(), "zone-volume"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["volume.csv", "records.csv"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(again.path().join("zone-volume").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn divergent_training_exits_4_with_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = nsad(dir.path(), &["train", "-s", "epochs=2", "-s", "train_size=256", "-s", "test_size=100", "-s", "gamma=50"]);
    assert_eq!(o.status.code(), Some(4));
    let manifest = fs::read_to_string(dir.path().join("train/manifest.json")).unwrap();
    assert!(manifest.contains("\"diverged\": true"));
    assert!(dir.path().join("train/trace.csv").exists());
}

#[test]
fn default_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let steps: [&[&str]; 5] = [
        &["zero-table"],
        &["thresholds"],
        &["zone-volume"],
        &["weight-divergence", "-s", "betas=0,1", "-s", "epochs=1", "-s", "test_size=100"],
        &["beta-sweep", "-s", "betas=0,10", "-s", "epochs=1", "-s", "precisions=32", "-s", "batchnorm_grid=false", "-s", "test_size=100"],
    ];
    for step in steps {
        let mut args = step.to_vec();
        args.extend(SMALL);
        let o = nsad(dir.path(), &args);
        assert_eq!(o.status.code(), Some(0), "{step:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(dir.path().join(step[0]).join("manifest.json").exists(), "{step:?}");
    }
    let rows = csv_rows(&dir.path().join("weight-divergence/divergence.csv"));
    // "0 vs 0" sanity series is identically zero.
    assert!(rows.iter().filter(|r| r[0] == "0 vs 0").all(|r| r[4].parse::<f64>().unwrap() == 0.0));
}
