// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stage-level behavior of the pipeline on the tiny fixture.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use vitprobe::fixture::{make_fixture, FixtureKind};
use vitprobe::labels::Task;
use vitprobe::pipeline::{cmd_extract, cmd_labels, cmd_train_grid, run_all, ExperimentConfig};
use vitprobe::Error;

fn fixture(dir: &Path, seed: u64, sets: &[&str]) -> ExperimentConfig {
    make_fixture(FixtureKind::TinyEncoder, seed, dir).unwrap();
    let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::load(&dir.join("config.toml"), &sets).unwrap()
}

fn report_csvs(results: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(results.join("report")).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "csv") {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
        }
    }
    out
}

fn checkpoints(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "ckpt") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn worker_count_does_not_change_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = fixture(a.path(), 21, &["workers=1"]);
    let cb = fixture(b.path(), 21, &["workers=4"]);
    run_all(&ca).unwrap();
    run_all(&cb).unwrap();
    let (x, y) = (report_csvs(&ca.results_dir), report_csvs(&cb.results_dir));
    assert!(x.len() >= 8);
    assert_eq!(x, y);
}

#[test]
fn three_layer_grid_writes_twelve_checkpoints_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), 3, &["grid.tasks=[\"depth\"]"]);
    cmd_labels(&cfg).unwrap();
    cmd_extract(&cfg).unwrap();
    let first = cmd_train_grid(&cfg).unwrap();
    let rows = &first[&Task::Depth];
    // 3 recorded layers × {linear, mlp} × {pretrained, random}.
    assert_eq!(rows.len(), 12);
    let ckpts = checkpoints(&cfg.probes_dir());
    assert_eq!(ckpts.len(), 12);
    let stamps: Vec<_> = ckpts.iter().map(|p| std::fs::metadata(p).unwrap().modified().unwrap()).collect();

    let again = cmd_train_grid(&cfg).unwrap();
    assert_eq!(again, first);
    let restamps: Vec<_> = ckpts.iter().map(|p| std::fs::metadata(p).unwrap().modified().unwrap()).collect();
    assert_eq!(stamps, restamps, "matching checkpoints are reused, not retrained");

    // Extraction is resumable too.
    let summaries = cmd_extract(&cfg).unwrap();
    assert!(summaries.iter().all(|s| s.computed == 0 && s.skipped > 0));
}

#[test]
fn a_bad_image_is_reported_after_the_rest_are_cached() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), 4, &[]);
    std::fs::write(dir.path().join("data/nyu/images/test/test03.png"), b"not a png").unwrap();
    let err = cmd_extract(&cfg).unwrap_err();
    match err {
        Error::Data(msg) => assert!(msg.contains("test03.png"), "{msg}"),
        other => panic!("unexpected error {other}"),
    }
    let cache = vitprobe::cache::FeatureCache::open(&cfg.features_dir(Task::Depth)).unwrap();
    // 24 depth images under two encoders, minus the broken one twice.
    assert_eq!(cache.len(), 2 * 23);
    assert!(cache.verify().unwrap().is_empty());
}

fn vitprobe(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vitprobe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn cli_requires_a_master_seed_for_interventions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(vitprobe(&["fixture", "tiny-encoder", "--out", d, "--seed", "5"]).status.success());
    let config = format!("{d}/config.toml");
    // The fixture config carries a seed; drop it to exercise the requirement.
    let text = std::fs::read_to_string(&config).unwrap();
    let unseeded: String = text.lines().filter(|l| !l.starts_with("master_seed")).collect::<Vec<_>>().join("\n");
    std::fs::write(&config, unseeded).unwrap();

    for stage in ["labels", "extract", "train-grid"] {
        let out = vitprobe(&[stage, "-c", &config, "--workers", "2"]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = vitprobe(&["ablate", "-c", &config]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("master seed"));

    for stage in ["ablate", "dose", "patch"] {
        let out = vitprobe(&[stage, "-c", &config, "--master-seed", "5", "--set", "interventions.pairs=2"]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = vitprobe(&["report", "-c", &config]);
    assert!(out.status.success());
    let influence: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("results/influence.json")).unwrap()).unwrap();
    assert_eq!(influence["pairs"].as_array().unwrap().len(), 2);
}

#[test]
fn report_on_an_empty_results_dir_says_so() {
    let dir = tempfile::tempdir().unwrap();
    let s = vitprobe::report::write_report(dir.path()).unwrap();
    assert!(s.is_empty());
    let md = std::fs::read_to_string(dir.path().join("report/summary.md")).unwrap();
    assert!(md.contains("Nothing to report"));
}
