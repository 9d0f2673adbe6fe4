use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use segpipe_cli::PipelineConfig;
use segpipe_core::synthetic::{self, SyntheticSpec};

fn segpipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segpipe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn defaults_match_published_constants() {
    let c = PipelineConfig::default();
    assert_eq!(c.ratios, [0.70, 0.15, 0.15]);
    assert_eq!(c.seed, 42);
    assert_eq!(c.augmentation.alpha, 0.95);
    assert_eq!(c.augmentation.min_overlap, 0.70);
    assert_eq!(c.augmentation.retries, 10);
    assert_eq!((c.loss.bce, c.loss.dice, c.loss.lovasz), (0.25, 0.50, 0.25));
    assert_eq!(c.loss.class_weights, [0.1, 0.9, 0.7]);
    assert_eq!(
        c.evaluation.iou_thresholds,
        vec![0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95]
    );

    let out = segpipe(&["config"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(PipelineConfig::from_toml(&stdout(&out)).unwrap(), c);
}

#[test]
fn config_file_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.toml");
    fs::write(&path, "seed = 7\n[augmentation]\nretries = 3\n").unwrap();
    let out = segpipe(&["config", "--config", s(&path)]);
    let c = PipelineConfig::from_toml(&stdout(&out)).unwrap();
    assert_eq!(
        (c.seed, c.augmentation.retries, c.augmentation.alpha),
        (7, 3, 0.95)
    );
    let out = segpipe(&["config", "--config", s(&path), "--seed", "9"]);
    assert_eq!(PipelineConfig::from_toml(&stdout(&out)).unwrap().seed, 9);

    fs::write(&path, "sed = 7\n").unwrap();
    assert_eq!(
        segpipe(&["config", "--config", s(&path)]).status.code(),
        Some(1)
    );
}

#[test]
fn split_writes_listings_deterministically() {
    let data = tempfile::tempdir().unwrap();
    synthetic::write_dataset(
        data.path(),
        &SyntheticSpec {
            patients: 20,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let out1 = tempfile::tempdir().unwrap();
    let out2 = tempfile::tempdir().unwrap();
    for out in [&out1, &out2] {
        let o = segpipe(&[
            "split",
            "--dataset-dir",
            s(data.path()),
            "--out-dir",
            s(out.path()),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("train"));
        for f in ["train.txt", "val.txt", "test.txt"] {
            assert!(out.path().join(f).exists());
        }
        assert!(out.path().join("train/images").is_dir());
    }
    assert_eq!(
        fs::read(out1.path().join("split_manifest.json")).unwrap(),
        fs::read(out2.path().join("split_manifest.json")).unwrap()
    );
}

#[test]
fn split_reports_malformed_label() {
    let data = tempfile::tempdir().unwrap();
    synthetic::write_dataset(data.path(), &SyntheticSpec::default(), 1).unwrap();
    let label = data.path().join("labels/000_HC.txt");
    let mut text = fs::read_to_string(&label).unwrap();
    text.push_str("1 0.5 0.5 0.6\n");
    fs::write(&label, &text).unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = segpipe(&[
        "split",
        "--dataset-dir",
        s(data.path()),
        "--out-dir",
        s(out.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("000_HC.txt"), "{err}");
    let line = text.lines().count();
    assert!(err.contains(&format!("line {line}")), "{err}");

    let o = segpipe(&[
        "split",
        "--dataset-dir",
        "/nonexistent/dir",
        "--out-dir",
        s(out.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn augment_census_and_idempotency() {
    let train = tempfile::tempdir().unwrap();
    synthetic::write_dataset(
        train.path(),
        &SyntheticSpec {
            patients: 12,
            ..Default::default()
        },
        5,
    )
    .unwrap();
    let before = snapshot(train.path());
    let o = segpipe(&["augment", "--train-dir", s(train.path()), "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let after = snapshot(train.path());
    for (k, v) in &before {
        assert_eq!(after.get(k), Some(v), "{k} modified");
    }
    let marker: serde_json::Value =
        serde_json::from_slice(&after[".domain_augmented.json"]).unwrap();
    let new_images = after.keys().filter(|k| k.ends_with("_aug.png")).count();
    let new_labels = after.keys().filter(|k| k.ends_with("_aug.txt")).count();
    assert_eq!(new_images, new_labels);
    assert_eq!(
        marker["augmented_images"].as_array().unwrap().len(),
        new_images
    );
    assert!(new_images > 0);
    assert!(stdout(&o).contains(&format!("new images {new_images}")));

    let o = segpipe(&["augment", "--train-dir", s(train.path())]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(snapshot(train.path()), after);
}

#[test]
fn augment_is_independent_of_worker_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        synthetic::write_dataset(
            d.path(),
            &SyntheticSpec {
                patients: 12,
                ..Default::default()
            },
            8,
        )
        .unwrap();
    }
    assert_eq!(
        segpipe(&["augment", "--train-dir", s(a.path()), "--jobs", "1"])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        segpipe(&["augment", "--train-dir", s(b.path()), "--jobs", "4"])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
}

#[test]
fn augment_io_failure_exits_2() {
    let train = tempfile::tempdir().unwrap();
    let records = synthetic::write_dataset(
        train.path(),
        &SyntheticSpec {
            patients: 12,
            ..Default::default()
        },
        5,
    )
    .unwrap();
    // Occupy every possible output path with a directory.
    for r in &records {
        fs::create_dir_all(
            train
                .path()
                .join("images")
                .join(format!("{}_aug.png", r.image_id)),
        )
        .unwrap();
    }
    let o = segpipe(&["augment", "--train-dir", s(train.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(
        segpipe(&["augment", "--train-dir", "/nonexistent/train"])
            .status
            .code(),
        Some(2)
    );
}

fn write_predictions_from_labels(gt_dir: &Path, path: &Path) {
    let mut lines = String::new();
    for entry in fs::read_dir(gt_dir.join("labels")).unwrap() {
        let p = entry.unwrap().path();
        let id = p.file_stem().unwrap().to_str().unwrap().to_string();
        for line in fs::read_to_string(&p).unwrap().lines() {
            let mut parts = line.split_whitespace();
            let class: usize = parts.next().unwrap().parse().unwrap();
            let coords: Vec<f64> = parts.map(|v| v.parse().unwrap()).collect();
            let json = format!(
                "{{\"image_id\":\"{id}\",\"class_id\":{class},\"confidence\":0.9,\"polygon\":{coords:?}}}\n"
            );
            lines.push_str(&json);
        }
    }
    fs::write(path, lines).unwrap();
}

#[test]
fn evaluate_self_is_perfect_and_empty_is_zero() {
    let gt = tempfile::tempdir().unwrap();
    synthetic::write_dataset(
        gt.path(),
        &SyntheticSpec {
            patients: 6,
            brain_only: 0.2,
            ..Default::default()
        },
        2,
    )
    .unwrap();
    let preds = gt.path().join("preds.jsonl");
    write_predictions_from_labels(gt.path(), &preds);
    let out = tempfile::tempdir().unwrap();
    let o = segpipe(&[
        "evaluate",
        "--gt-dir",
        s(gt.path()),
        "--predictions",
        s(&preds),
        "--out-dir",
        s(out.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["report.json", "report.txt", "ap_per_threshold.csv"] {
        assert!(out.path().join(f).exists());
    }
    let json = fs::read_to_string(out.path().join("report.json")).unwrap();
    let report: segpipe_core::metrics::MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(report.macro_avg.mdsc, 1.0);
    assert_eq!(report.macro_avg.map50_95, 1.0);

    fs::write(&preds, "").unwrap();
    let o = segpipe(&[
        "evaluate",
        "--gt-dir",
        s(gt.path()),
        "--predictions",
        s(&preds),
        "--out-dir",
        s(out.path()),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let json = fs::read_to_string(out.path().join("report.json")).unwrap();
    let report: segpipe_core::metrics::MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(
        (report.macro_avg.map50, report.macro_avg.map50_95),
        (0.0, 0.0)
    );
    assert_eq!(
        (report.macro_avg.precision, report.macro_avg.recall),
        (0.0, 0.0)
    );
}

#[test]
fn evaluate_rejects_bad_predictions() {
    let gt = tempfile::tempdir().unwrap();
    synthetic::write_dataset(gt.path(), &SyntheticSpec::default(), 2).unwrap();
    let preds = gt.path().join("preds.jsonl");
    let out = tempfile::tempdir().unwrap();
    for body in [
        "{\"image_id\":\"nope\",\"class_id\":0,\"confidence\":0.5,\"polygon\":[0,0,1,0,1,1]}\n",
        "{\"image_id\":\n",
    ] {
        fs::write(&preds, body).unwrap();
        let o = segpipe(&[
            "evaluate",
            "--gt-dir",
            s(gt.path()),
            "--predictions",
            s(&preds),
            "--out-dir",
            s(out.path()),
        ]);
        assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    }
}

#[test]
fn evaluate_reproduces_brain_row_counts() {
    // 568 brain ground truths; 558 found, 10 missed, 36 extra detections.
    let gt = tempfile::tempdir().unwrap();
    fs::create_dir_all(gt.path().join("labels")).unwrap();
    let mut dims = BTreeMap::new();
    let mut preds = String::new();
    let left = "0.000000 0.000000 0.500000 0.000000 0.500000 1.000000 0.000000 1.000000";
    for i in 0..568 {
        let id = format!("img{i:04}");
        fs::write(
            gt.path().join("labels").join(format!("{id}.txt")),
            format!("0 {left}\n"),
        )
        .unwrap();
        dims.insert(id.clone(), [4, 4]);
        if i < 558 {
            preds.push_str(&format!(
                "{{\"image_id\":\"{id}\",\"class_id\":0,\"confidence\":0.9,\"polygon\":[0,0,0.5,0,0.5,1,0,1]}}\n"
            ));
        }
        if i < 36 {
            preds.push_str(&format!(
                "{{\"image_id\":\"{id}\",\"class_id\":0,\"confidence\":0.4,\"polygon\":[0.5,0,1,0,1,1,0.5,1]}}\n"
            ));
        }
    }
    fs::write(
        gt.path().join("dimensions.json"),
        serde_json::to_string(&dims).unwrap(),
    )
    .unwrap();
    let pred_path = gt.path().join("preds.jsonl");
    fs::write(&pred_path, preds).unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = segpipe(&[
        "evaluate",
        "--gt-dir",
        s(gt.path()),
        "--predictions",
        s(&pred_path),
        "--out-dir",
        s(out.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let row = text.lines().find(|l| l.starts_with("Brain")).unwrap();
    let cols: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(&cols[1..4], &["0.939", "0.982", "0.960"], "{row}");
    assert_eq!(&cols[8..11], &["558", "36", "10"]);
}

#[test]
fn losscheck_exit_codes() {
    let o = segpipe(&["losscheck", "--trials", "100"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(
        segpipe(&["losscheck", "--trials", "3", "--inject-sign-flip"])
            .status
            .code(),
        Some(3)
    );
    assert_eq!(
        segpipe(&["losscheck", "--trials", "0"]).status.code(),
        Some(1)
    );
}

#[test]
fn optdemo_selection_and_curves() {
    let out = tempfile::tempdir().unwrap();
    let o = segpipe(&["optdemo", "--out-dir", s(out.path())]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("MuSGD lr=0.01 "), "{}", stdout(&o));
    let loss: Vec<f64> = fs::read_to_string(out.path().join("loss.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(loss.len(), 201);
    assert!(loss[200] < 0.1 * loss[0]);
    assert!(out.path().join("lr.csv").exists());

    let o = segpipe(&["optdemo", "--batch", "128", "--out-dir", s(out.path())]);
    assert!(
        stdout(&o).starts_with("AdamW lr=0.001429 "),
        "{}",
        stdout(&o)
    );
    assert_eq!(
        segpipe(&["optdemo", "--problem", "saddle", "--out-dir", s(out.path())])
            .status
            .code(),
        Some(1)
    );
    let again = tempfile::tempdir().unwrap();
    segpipe(&["optdemo", "--out-dir", s(again.path())]);
    segpipe(&["optdemo", "--out-dir", s(out.path())]);
    assert_eq!(
        fs::read(out.path().join("loss.csv")).unwrap(),
        fs::read(again.path().join("loss.csv")).unwrap()
    );
}

#[test]
fn bad_flags_are_validation_failures() {
    assert_eq!(segpipe(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(segpipe(&["--help"]).status.code(), Some(0));
}
