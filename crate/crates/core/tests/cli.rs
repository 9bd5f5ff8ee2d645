use std::fs;
use std::path::Path;

use pointspot::annotations::{read_annotations, write_annotations, AnnotationLine};
use pointspot::geometry::central_point;
use pointspot::pipeline::{read_predictions, write_predictions, PredictionLine};
use pointspot::seqcodec::Prediction;

mod common;
use common::{path, pointspot, TINY_CONFIG};

fn setup(dir: &Path, count: usize) {
    fs::write(dir.join("tiny.toml"), TINY_CONFIG).unwrap();
    let out = pointspot(&[
        "synth",
        "--config",
        path(&dir.join("tiny.toml")),
        "--out",
        path(&dir.join("data")),
        "--count",
        &count.to_string(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn report(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn ground_truth_as_predictions_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), 8);
    let ann = dir.path().join("data/annotations.jsonl");
    let gt = read_annotations(&ann).unwrap();
    assert!(gt.iter().any(|l| !l.instances.is_empty()));
    let lines: Vec<PredictionLine> = gt
        .iter()
        .map(|l| PredictionLine {
            image: l.image.clone(),
            predictions: l
                .instances
                .iter()
                .map(|i| Prediction { point: Some(central_point(&i.polygon)), transcript: i.transcript.clone(), score: 1.0 })
                .collect(),
        })
        .collect();
    let preds = dir.path().join("preds.jsonl");
    write_predictions(&preds, &lines).unwrap();
    let out = dir.path().join("report.json");
    let o = pointspot(&["eval", "--data", path(&ann), "--predictions", path(&preds), "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(&out);
    assert_eq!(r["hmean"], 1.0);
    assert_eq!(r["fp"], 0);
    assert_eq!(r["fn"], 0);
}

#[test]
fn empty_scene_yields_empty_predictions() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), 2);
    let cfg = dir.path().join("tiny.toml");
    let data = dir.path().join("data");
    let ann = data.join("annotations.jsonl");
    let o = pointspot(&["train", "--config", path(&cfg), "--data", path(&ann), "--out", path(&dir.path().join("run")), "--max-steps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let blank = AnnotationLine { image: "blank.pgm".into(), instances: vec![] };
    image::GrayImage::new(16, 16).save(data.join("blank.pgm")).unwrap();
    let blank_ann = data.join("blank.jsonl");
    write_annotations(&blank_ann, &[blank]).unwrap();
    let preds = dir.path().join("preds.jsonl");
    let o = pointspot(&[
        "infer",
        "--config",
        path(&cfg),
        "--checkpoint",
        path(&dir.path().join("run/final")),
        "--data",
        path(&blank_ann),
        "--out",
        path(&preds),
        "--threshold",
        "1.0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = read_predictions(&preds).unwrap();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0].image, "blank.pgm");
    assert!(lines[0].predictions.is_empty());

    let out = dir.path().join("report.json");
    let o = pointspot(&["eval", "--data", path(&blank_ann), "--predictions", path(&preds), "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(&out);
    assert_eq!((r["tp"].as_u64(), r["fp"].as_u64(), r["fn"].as_u64()), (Some(0), Some(0), Some(0)));
}

#[test]
fn malformed_annotation_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), 3);
    let ann = dir.path().join("data/annotations.jsonl");
    let mut text: Vec<String> = fs::read_to_string(&ann).unwrap().lines().map(String::from).collect();
    text[1] = text[1].replace("\"instances\"", "\"instancez\"");
    fs::write(&ann, text.join("\n")).unwrap();
    let o = pointspot(&["eval", "--data", path(&ann), "--predictions", path(&ann), "--out", path(&dir.path().join("r.json"))]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("annotations.jsonl:2:"), "{}", msg);
}

#[test]
fn config_problems_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (TINY_CONFIG.replacen("version = 1", "version = 2", 1), "version"),
        (TINY_CONFIG.replacen("d_model", "d_modle", 1), "d_modle"),
        (TINY_CONFIG.replacen("version = 1\n", "", 1), "version"),
    ];
    for (i, (text, needle)) in cases.iter().enumerate() {
        let cfg = dir.path().join(format!("c{}.toml", i));
        fs::write(&cfg, text).unwrap();
        let o = pointspot(&["synth", "--config", path(&cfg), "--out", path(&dir.path().join("d")), "--count", "1"]);
        assert_eq!(o.status.code(), Some(1));
        assert!(stderr(&o).contains(needle), "{}", stderr(&o));
    }
}

#[test]
fn missing_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = pointspot(&[
        "eval",
        "--data",
        path(&dir.path().join("nope.jsonl")),
        "--predictions",
        path(&dir.path().join("nope.jsonl")),
        "--out",
        path(&dir.path().join("r.json")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: "));
}

#[test]
fn seed_flag_and_environment_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = pointspot(&["synth", "--config", path(&cfg), "--out", path(&a), "--count", "4", "--seed", "9"]);
    assert!(o.status.success());
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_pointspot"))
        .args(["synth", "--config", path(&cfg), "--out", path(&b), "--count", "4"])
        .env("POINTSPOT_SEED", "9")
        .output()
        .unwrap();
    assert!(o.status.success());
    for f in ["annotations.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}
