use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use settlemap_cli::synth::{generate, SynthOptions};

fn settlemap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_settlemap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn fixture(dir: &Path) -> PathBuf {
    let opts = SynthOptions {
        size: 150,
        municipalities: 3,
        scenes_per_epoch: 2,
        negatives: 600,
        trees: 4,
        ..Default::default()
    };
    generate(dir, &opts).unwrap().config
}

/// Relative path -> bytes for every file under `root`, minus run metadata.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                if rel != Path::new("stage_summary.json") {
                    out.insert(rel, fs::read(&path).unwrap());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn summary(out: &Path) -> Vec<Value> {
    let text = fs::read_to_string(out.join("stage_summary.json")).unwrap();
    serde_json::from_str::<Value>(&text).unwrap().as_array().unwrap().clone()
}

#[test]
fn missing_epoch_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path());
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    cfg["municipalities"][1]["epochs"].as_object_mut().unwrap().remove("2017-2018");
    fs::write(&config, cfg.to_string()).unwrap();
    let out = settlemap(&["all", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing epoch 2017-2018"), "{stderr}");
    assert!(stderr.contains("Arauquita"), "{stderr}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn every_violation_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path());
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    cfg["registry"] = "nowhere.json".into();
    cfg["index_params"] = serde_json::json!({ "savi_l": 3.0 });
    cfg["sampling"]["formal_fraction"] = 0.7.into();
    fs::write(&config, cfg.to_string()).unwrap();
    let out = settlemap(&["sample", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("3 problem(s)"), "{stderr}");
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path());
    // Valid config, but the band file a manifest points at is gone.
    let victim = fs::read_dir(dir.path().join("Arauca/scenes/2015-2016"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with("_b4.bsqr"))
        .unwrap();
    fs::remove_file(victim).unwrap();
    let out = settlemap(&["composite", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn degenerate_synth_request_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = settlemap(&["synth", "--out", dir.path().to_str().unwrap(), "--size", "40"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn rerun_skips_everything_and_force_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path());
    let cfg = config.to_str().unwrap();
    let out_dir = dir.path().join("out");
    assert_eq!(settlemap(&["all", "--config", cfg]).status.code(), Some(0));
    assert!(summary(&out_dir).iter().all(|r| r["skipped"] == false));
    let first = snapshot(&out_dir);
    let mtimes: Vec<_> = first
        .keys()
        .map(|p| fs::metadata(out_dir.join(p)).unwrap().modified().unwrap())
        .collect();

    assert_eq!(settlemap(&["all", "--config", cfg]).status.code(), Some(0));
    let records = summary(&out_dir);
    assert_eq!(records.len(), 8);
    assert!(records.iter().all(|r| r["skipped"] == true), "{records:?}");
    let again: Vec<_> = first
        .keys()
        .map(|p| fs::metadata(out_dir.join(p)).unwrap().modified().unwrap())
        .collect();
    assert_eq!(mtimes, again);

    // A changed config invalidates the stamps.
    assert_eq!(settlemap(&["train", "--config", cfg, "--seed", "5"]).status.code(), Some(0));
    assert_eq!(summary(&out_dir)[0]["skipped"], false);

    assert_eq!(settlemap(&["rank", "--config", cfg, "--force"]).status.code(), Some(0));
    assert_eq!(summary(&out_dir)[0]["skipped"], false);
}

#[test]
fn all_equals_stages_in_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path());
    let cfg = config.to_str().unwrap();
    let a = dir.path().join("run_all");
    let b = dir.path().join("run_stages");
    assert_eq!(settlemap(&["all", "--config", cfg, "--out", a.to_str().unwrap()]).status.code(), Some(0));
    for stage in ["composite", "features", "sample", "train", "evaluate", "predict", "rank", "export"] {
        let out = settlemap(&[stage, "--config", cfg, "--out", b.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(sb[k] == *v, "{} differs", k.display());
    }
}

#[test]
fn artifacts_stay_inside_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path());
    let before = snapshot(dir.path());
    let out_dir = dir.path().join("elsewhere");
    let out = settlemap(&["all", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let after: BTreeMap<_, _> = snapshot(dir.path())
        .into_iter()
        .filter(|(p, _)| !p.starts_with("elsewhere"))
        .collect();
    assert_eq!(before, after);
    for expected in [
        "dataset.csv",
        "sampling_summary.json",
        "models/random_forest.json",
        "reports/evaluation.json",
        "reports/evaluation.csv",
        "features/feature_names.txt",
        "maps/Bogota/probmap.bsqr",
        "maps/Bogota/probmap.pgm",
        "maps/Bogota/grid_scores.json",
        "maps/Bogota/candidates.geojson",
    ] {
        assert!(out_dir.join(expected).is_file(), "{expected}");
    }
    let geo: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("maps/Bogota/candidates.geojson")).unwrap()).unwrap();
    assert_eq!(geo["features"].as_array().unwrap().len(), 9);
}
