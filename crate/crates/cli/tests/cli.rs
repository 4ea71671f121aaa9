use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dmad_core::feature_store::read_feature_file;
use dmad_core::memory_bank::{BankKind, MemoryBank};
use sha2::{Digest, Sha256};

fn dmad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmad"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dmad(args);
    assert!(
        out.status.success(),
        "dmad {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small dataset plus a config file next to it.
fn setup(dir: &Path, train_normal: usize) -> PathBuf {
    let spec = dir.join("spec.json");
    std::fs::write(
        &spec,
        format!(
            r#"{{"num_objects":2,"c":8,"outlier_images":4,
               "images_per_object":{{"train_normal":{train_normal},"test_normal":4,"test_anomalous":4,"seen_anomalies":0}}}}"#
        ),
    )
    .unwrap();
    let data = dir.join("data");
    ok(&["synth-gen", "--spec", p(&spec), "--out", p(&data)]);
    let cfg = data.join("run.json");
    std::fs::write(
        &cfg,
        r#"{"train":{"epochs":2,"batch_size":4},"augment":{"noise_std":0.1}}"#,
    )
    .unwrap();
    cfg
}

fn hash_dir(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.push((
                    rel,
                    hex::encode(Sha256::digest(std::fs::read(&path).unwrap())),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn deterministic_runs_hash_match() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), 12);
    let out = dir.path().join("run");
    let cfg_text = r#"{"train":{"epochs":2,"batch_size":4},"augment":{"noise_std":0.1},
        "paths":{"train_manifest":"../data/train.json","test_manifest":"../data/test.json",
                 "outlier_dir":"../data/outliers"}}"#;
    std::fs::create_dir_all(&out).unwrap();
    let run_cfg = out.join("run.json");
    std::fs::write(&run_cfg, cfg_text).unwrap();

    let mut hashes = Vec::new();
    for _ in 0..2 {
        for cmd in ["build-banks", "train", "eval"] {
            ok(&[
                cmd,
                "--config",
                p(&run_cfg),
                "--deterministic",
                "--seed",
                "3",
            ]);
        }
        let h = hash_dir(&out);
        for entry in std::fs::read_dir(&out).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                std::fs::remove_dir_all(&path).unwrap();
            } else if path != run_cfg {
                std::fs::remove_file(&path).unwrap();
            }
        }
        hashes.push(h);
    }
    let names: Vec<&str> = hashes[0].iter().map(|(n, _)| n.as_str()).collect();
    for want in [
        "banks/normal.dmbk",
        "banks/abnormal.dmbk",
        "model.dmckpt",
        "loss.csv",
        "report.json",
        "report.csv",
    ] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn anomalous_files_score_higher_and_maps_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 40);
    for cmd in ["build-banks", "train"] {
        ok(&[cmd, "--config", p(&cfg), "--epochs", "5"]);
    }
    let data = dir.path().join("data");
    let score = |rel: &str, map: Option<&Path>| -> f64 {
        let file = data.join(rel);
        let mut args = vec!["score", "--config", p(&cfg), p(&file)];
        if let Some(m) = map {
            args.extend(["--pixel-map", p(m)]);
        }
        let out = ok(&args);
        let line = out.lines().find(|l| l.starts_with("image score:")).unwrap();
        line["image score:".len()..].trim().parse().unwrap()
    };
    let map_path = dir.path().join("map.dmft");
    let normal = score("test/object_00/object_00_test_normal_000.dmft", None);
    let anomalous = score(
        "test/object_00/object_00_test_anomalous_000.dmft",
        Some(&map_path),
    );
    assert!(
        normal < anomalous,
        "normal {normal} vs anomalous {anomalous}"
    );

    let map = read_feature_file(&map_path).unwrap();
    assert_eq!(map.c, 1);
    assert_eq!((map.h0, map.w0), (map.source_h, map.source_w));
    assert_eq!((map.h0, map.w0), (64, 64));
    assert_eq!(map.image_id, "object_00_test_anomalous_000");
}

#[test]
fn inspect_bank_reports_kind_and_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let rows = ndarray::Array2::from_shape_vec((2, 2), vec![1.0f32, 10.0, 3.0, 10.0]).unwrap();
    let path = dir.path().join("b.dmbk");
    MemoryBank::new(BankKind::SeenAnomaly, rows)
        .unwrap()
        .save(&path)
        .unwrap();
    let out = ok(&["inspect-bank", p(&path)]);
    assert!(out.contains("seen_anomaly"), "{out}");
    assert!(out.contains("rows (K): 2"), "{out}");
    // per-dimension mean 2 and 10, std 1 and 0
    assert!(
        out.contains("2.000000") && out.contains("10.000000"),
        "{out}"
    );
    assert!(
        out.contains("1.000000") && out.contains("0.000000"),
        "{out}"
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("bad.dmbk");
    std::fs::write(&garbage, b"not a bank").unwrap();
    let out = dmad(&["inspect-bank", p(&garbage)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));

    let missing = dir.path().join("nope.json");
    assert_eq!(
        dmad(&["train", "--config", p(&missing)]).status.code(),
        Some(2)
    );

    let cfg = setup(dir.path(), 12);
    let out = dmad(&["eval", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("build-banks"));

    let out = dmad(&[
        "build-banks",
        "--config",
        p(&cfg),
        "--mode",
        "semi-supervised",
    ]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "no annotated anomalies to build from"
    );

    assert_eq!(dmad(&["no-such-command"]).status.code(), Some(2));
}
