use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stagekit::swa::{Tensor, TensorArchive};

fn stagekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stagekit"))
        .args(args)
        .output()
        .expect("run stagekit")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    if let Some(parent) = p.parent() {
        fs::create_dir_all(parent).unwrap();
    }
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const GT: &str = r#"{
  "images": [{"id": 1, "width": 64, "height": 64}, {"id": 2, "width": 64, "height": 64}],
  "annotations": [
    {"image_id": 1, "category_id": 1, "bbox": [4, 4, 20, 20], "mask": {"size": [64, 64], "runs": [260, 4, 3832]}},
    {"image_id": 2, "category_id": 1, "bbox": [30, 30, 50, 40], "mask": {"size": [64, 64], "runs": [0, 1, 4095]}}
  ]
}"#;

const PERFECT: &str = r#"{
  "images": [{"id": 1, "width": 64, "height": 64}, {"id": 2, "width": 64, "height": 64}],
  "detections": [
    {"image_id": 1, "category_id": 1, "score": 0.9, "bbox": [4, 4, 20, 20], "mask": {"size": [64, 64], "runs": [260, 4, 3832]}, "source_id": "a"},
    {"image_id": 2, "category_id": 1, "score": 0.8, "bbox": [30, 30, 50, 40], "mask": {"size": [64, 64], "runs": [0, 1, 4095]}, "source_id": "a"}
  ]
}"#;

#[test]
fn help_for_every_subcommand() {
    let o = stagekit(&["--help"]);
    assert_eq!(code(&o), 0);
    for sub in ["evaluate", "ensemble", "swa-average", "pipeline", "validate"] {
        assert!(stdout(&o).contains(sub), "{sub} missing from top-level help");
        let o = stagekit(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub} --help");
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
}

#[test]
fn bad_arguments_are_validation_errors() {
    assert_eq!(code(&stagekit(&["evaluate", "--gt", "x.json"])), 1);
    assert_eq!(code(&stagekit(&["frobnicate"])), 1);
}

#[test]
fn evaluate_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let gt = write(dir.path(), "gt.json", GT);
    let pred = write(dir.path(), "pred.json", PERFECT);
    let cls = write(
        dir.path(),
        "cls.json",
        r#"{"outputs": [{"image_id": 1, "probs": [0.9, 0.1]}, {"image_id": 2, "probs": [0.2, 0.8]}]}"#,
    );
    let labels = write(
        dir.path(),
        "labels.json",
        r#"{"labels": [{"image_id": 1, "class": 0}, {"image_id": 2, "class": 1}]}"#,
    );
    let out = dir.path().join("report.json");
    let o = stagekit(&[
        "evaluate",
        "--gt",
        s(&gt),
        "--pred",
        s(&pred),
        "--mask",
        "--cls-pred",
        s(&cls),
        "--cls-labels",
        s(&labels),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("mAP@0.5:0.95                   100.0         100.0"), "{text}");
    assert!(text.contains("Accuracy                    100.0000    100.0000"), "{text}");
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["detection"]["AP@0.5"], 100.0);
    assert_eq!(report["segmentation"]["AR@0.5:0.95"], 100.0);
    assert_eq!(fs::read_to_string(dir.path().join("report.txt")).unwrap(), text);
}

#[test]
fn evaluate_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let gt = write(dir.path(), "gt.json", GT);
    let missing = dir.path().join("nope.json");
    let o = stagekit(&["evaluate", "--gt", s(&gt), "--pred", s(&missing)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.json"));

    let broken = write(dir.path(), "broken.json", "{\"images\": [");
    let o = stagekit(&["evaluate", "--gt", s(&gt), "--pred", s(&broken)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));

    let bad = write(
        dir.path(),
        "bad.json",
        &PERFECT.replace("\"score\": 0.9", "\"score\": 1.5"),
    );
    let o = stagekit(&["evaluate", "--gt", s(&gt), "--pred", s(&bad)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("detections[0]"), "{}", stderr(&o));

    let no_masks = write(dir.path(), "boxes.json", &PERFECT.replace("\"mask\"", "\"unused\""));
    let o = stagekit(&["evaluate", "--gt", s(&gt), "--pred", s(&no_masks), "--mask"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn validate_reports_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "pred.json", PERFECT);
    let o = stagekit(&["validate", s(&good)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("2 images, 2 detections"));

    let gt = write(dir.path(), "gt.json", GT);
    assert_eq!(code(&stagekit(&["validate", "--gt", s(&gt)])), 0);

    let bad = write(
        dir.path(),
        "bad.json",
        &PERFECT
            .replace("\"score\": 0.9", "\"score\": -1")
            .replace("\"image_id\": 2, \"category_id\": 1, \"score\"", "\"image_id\": 7, \"category_id\": 1, \"score\""),
    );
    let o = stagekit(&["validate", s(&bad)]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("detections[0]") && err.contains("detections[1]"), "{err}");
}

fn two_model_files(dir: &Path) -> (PathBuf, PathBuf) {
    let a = write(
        dir,
        "a.json",
        r#"{"images": [{"id": 1, "width": 100, "height": 100}],
            "detections": [{"image_id": 1, "category_id": 1, "score": 0.9, "bbox": [0, 0, 10, 10], "source_id": "a"}]}"#,
    );
    let b = write(
        dir,
        "b.json",
        r#"{"images": [{"id": 1, "width": 100, "height": 100}],
            "detections": [{"image_id": 1, "category_id": 1, "score": 0.7, "bbox": [50, 50, 60, 60], "source_id": "b"}]}"#,
    );
    (a, b)
}

#[test]
fn ensemble_strategies_and_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = two_model_files(dir.path());
    let out = dir.path().join("fused.json");

    let o = stagekit(&["ensemble", "--out", s(&out), "--cluster-iou", "0", s(&a), s(&b)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("cluster_iou"), "{}", stderr(&o));
    assert!(!out.exists());

    let o = stagekit(&["ensemble", "--out", s(&out), "--strategy", "unanimous", s(&a), s(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fused: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(fused["detections"].as_array().unwrap().len(), 0);
    assert_eq!(fused["images"].as_array().unwrap().len(), 1);

    let o = stagekit(&["ensemble", "--out", s(&out), "--merge", "weighted_average", s(&a), s(&b)]);
    assert_eq!(code(&o), 0);
    let first = fs::read(&out).unwrap();
    let fused: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(fused["detections"].as_array().unwrap().len(), 2);
    assert_eq!(fused["detections"][0]["source_id"], "ensemble");

    // swapping the input order leaves the output bytes unchanged
    let o = stagekit(&["ensemble", "--out", s(&out), "--merge", "weighted_average", s(&b), s(&a)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&out).unwrap(), first);
}

fn archive(w: &[f32], bias_shape: Vec<usize>) -> Vec<u8> {
    let n: usize = bias_shape.iter().product();
    let mut a = TensorArchive::new();
    a.insert("layer.weight", Tensor::new("layer.weight", vec![2, 2], w.to_vec()).unwrap())
        .unwrap();
    a.insert("layer.bias", Tensor::new("layer.bias", bias_shape, vec![0.25; n]).unwrap())
        .unwrap();
    a.to_bytes()
}

#[test]
fn swa_average_cli() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.swa");
    let b = dir.path().join("b.swa");
    let c = dir.path().join("c.swa");
    fs::write(&a, archive(&[1.0, 2.0, 3.0, 4.0], vec![2])).unwrap();
    fs::write(&b, archive(&[3.0, 4.0, 5.0, 6.0], vec![2])).unwrap();
    fs::write(&c, archive(&[3.0, 4.0, 5.0, 6.0], vec![3])).unwrap();
    let out = dir.path().join("avg.swa");

    let o = stagekit(&["swa-average", "--out", s(&out), s(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&out).unwrap(), fs::read(&a).unwrap());
    let sidecar = dir.path().join("avg.swa.manifest.json");
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(&sidecar).unwrap()).unwrap();
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 1);
    assert_eq!(manifest["inputs"][0]["sha256"], manifest["output"]["sha256"]);

    let o = stagekit(&["swa-average", "--out", s(&out), s(&a), s(&b)]);
    assert_eq!(code(&o), 0);
    let avg = TensorArchive::from_bytes(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(avg.get("layer.weight").unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);

    let before = fs::read(&out).unwrap();
    let o = stagekit(&["swa-average", "--out", s(&out), s(&a), s(&c)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("layer.bias"), "{}", stderr(&o));
    assert_eq!(fs::read(&out).unwrap(), before);

    let junk = write(dir.path(), "junk.swa", "not an archive");
    assert_eq!(code(&stagekit(&["swa-average", "--out", s(&out), s(&junk)])), 2);
}

fn pipeline_fixture(dir: &Path) -> PathBuf {
    write(dir, "frames.json", r#"{"images": [{"id": 1, "width": 64, "height": 48}, {"id": 2, "width": 64, "height": 48}]}"#);
    write(
        dir,
        "cls/identity.json",
        r#"{"outputs": [{"image_id": 1, "probs": [0.8, 0.2]}, {"image_id": 2, "probs": [0.3, 0.7]}]}"#,
    );
    write(
        dir,
        "cls/hflip.json",
        r#"{"outputs": [{"image_id": 1, "probs": [0.6, 0.4]}, {"image_id": 2, "probs": [0.1, 0.9]}]}"#,
    );
    write(
        dir,
        "det/a.json",
        r#"{"images": [{"id": 1, "width": 64, "height": 48}, {"id": 2, "width": 64, "height": 48}],
            "detections": [
              {"image_id": 1, "category_id": 1, "score": 0.9, "bbox": [4, 4, 20, 20], "source_id": "a"},
              {"image_id": 2, "category_id": 1, "score": 0.9, "bbox": [4, 4, 20, 20], "source_id": "a"}]}"#,
    );
    // rot90 view: frames are 48 x 64; (4,4,20,20) maps to (28,4,44,20)
    write(
        dir,
        "det/a_rot90.json",
        r#"{"images": [{"id": 1, "width": 48, "height": 64}, {"id": 2, "width": 48, "height": 64}],
            "detections": [{"image_id": 1, "category_id": 1, "score": 0.8, "bbox": [28, 4, 44, 20], "source_id": "a"}]}"#,
    );
    write(
        dir,
        "gt.json",
        r#"{"images": [{"id": 1, "width": 64, "height": 48}, {"id": 2, "width": 64, "height": 48}],
            "annotations": [{"image_id": 1, "category_id": 1, "bbox": [4, 4, 20, 20]}]}"#,
    );
    write(
        dir,
        "labels.json",
        r#"{"labels": [{"image_id": 1, "class": 0}, {"image_id": 2, "class": 1}]}"#,
    );
    write(
        dir,
        "pipeline.json",
        r#"{
          "frames": "frames.json",
          "classification_inputs": [
            {"view": {"kind": "identity"}, "file": "cls/identity.json"},
            {"view": {"kind": "hflip"}, "file": "cls/hflip.json"}
          ],
          "gate_rule": {"rule": "argmax"},
          "grounding_inputs": [{"source": "a", "views": [
            {"view": {"kind": "identity"}, "file": "det/a.json"},
            {"view": {"kind": "rot90"}, "file": "det/a_rot90.json"}
          ]}],
          "evaluation": {"gt": "gt.json", "cls_labels": "labels.json"}
        }"#,
    )
}

#[test]
fn pipeline_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = pipeline_fixture(dir.path());
    let out = dir.path().join("out");

    let o = stagekit(&["pipeline", "--config", s(&config), "--dry-run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("1 of 2 images gated in"));
    assert!(!out.exists());

    let o = stagekit(&["--threads", "2", "pipeline", "--config", s(&config)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let names = ["predictions.json", "gates.json", "report.json", "report.txt", "manifest.json"];
    let first: Vec<Vec<u8>> = names.iter().map(|n| fs::read(out.join(n)).unwrap()).collect();

    let preds: serde_json::Value = serde_json::from_slice(&first[0]).unwrap();
    let dets = preds["detections"].as_array().unwrap();
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0]["image_id"], 1);
    assert_eq!(dets[0]["score"], 0.9);
    let report: serde_json::Value = serde_json::from_slice(&first[2]).unwrap();
    assert_eq!(report["detection"]["AP@0.5"], 100.0);
    assert_eq!(report["classification"]["accuracy"], 100.0);
    let manifest: serde_json::Value = serde_json::from_slice(&first[4]).unwrap();
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 7);
    assert_eq!(manifest["inputs"][1]["path"], "cls/identity.json");

    let o = stagekit(&["pipeline", "--config", s(&config)]);
    assert_eq!(code(&o), 0);
    let second: Vec<Vec<u8>> = names.iter().map(|n| fs::read(out.join(n)).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn pipeline_failures_leave_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = pipeline_fixture(dir.path());
    fs::remove_file(dir.path().join("det/a_rot90.json")).unwrap();
    let o = stagekit(&["pipeline", "--config", s(&config)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("a_rot90.json"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());

    let o = stagekit(&["pipeline", "--config", s(&dir.path().join("missing.json"))]);
    assert_eq!(code(&o), 2);

    let text = fs::read_to_string(&config).unwrap();
    fs::write(&config, text.replace("\"gate_rule\"", "\"gate\"")).unwrap();
    let o = stagekit(&["pipeline", "--config", s(&config)]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("gate"), "{err}");
}
