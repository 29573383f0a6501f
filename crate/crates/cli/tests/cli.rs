use std::path::Path;
use std::process::{Command, Output};

use primsketch::export::{read_dxf, read_svg};
use serde_json::Value;

fn primsketch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_primsketch")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = primsketch(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["gen-data", "--count", "10", "--seed", "1", "--out", s(&a)]);
    ok(&["gen-data", "--count", "10", "--seed", "1", "--out", s(&b)]);
    ok(&["gen-data", "--count", "10", "--seed", "2", "--out", s(&c)]);
    let read = |d: &Path| std::fs::read(d.join("corpus.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let v: Value = serde_json::from_slice(&read(&a)).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 10);
}

#[test]
fn render_writes_five_hand_samples_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--count", "2", "--seed", "4", "--out", s(dir.path())]);
    let corpus = dir.path().join("corpus.json");
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    ok(&["render", "--corpus", s(&corpus), "--mode", "hand", "--seed", "7", "--out", s(&r1)]);
    ok(&["render", "--corpus", s(&corpus), "--mode", "hand", "--seed", "7", "--out", s(&r2)]);
    let ids: Vec<String> = serde_json::from_slice::<Value>(&std::fs::read(&corpus).unwrap()).unwrap().as_array().unwrap()
        .iter()
        .map(|r| r["id"].as_str().unwrap().to_string())
        .collect();
    for id in ids {
        for k in 0..5 {
            let f = format!("{id}/s{k}.png");
            assert_eq!(std::fs::read(r1.join(&f)).unwrap(), std::fs::read(r2.join(&f)).unwrap());
        }
        assert!(!r1.join(format!("{id}/s5.png")).exists());
    }
}

#[test]
fn eval_with_oracle_reports_perfect_scores() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--count", "6", "--seed", "3", "--out", s(dir.path())]);
    let corpus = dir.path().join("corpus.json");
    let csv = dir.path().join("rows.csv");
    let out = ok(&["eval", "--oracle", "--corpus", s(&corpus), "--csv", s(&csv)]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["precision"], 1.0);
    assert_eq!(report["recall"], 1.0);
    assert_eq!(report["type_acc"], 1.0);
    assert_eq!(report["images"], 6);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 7);
}

#[test]
fn train_eval_infer_and_ablate_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--count", "4", "--seed", "5", "--out", s(dir.path())]);
    let corpus = dir.path().join("corpus.json");
    let renders = dir.path().join("renders");
    ok(&["render", "--corpus", s(&corpus), "--mode", "precise", "--out", s(&renders)]);

    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "train", "--corpus", s(&corpus), "--renders", s(&renders), "--preset", "smoke", "--overfit",
            "--max-steps", "3", "--batch-size", "2", "--val-every", "2", "--seed", "11", "--out", s(&out),
        ]);
        out
    };
    let (t1, t2) = (run("t1"), run("t2"));
    for f in ["model.ckpt", "best.ckpt", "history.jsonl", "config.json"] {
        assert_eq!(std::fs::read(t1.join(f)).unwrap(), std::fs::read(t2.join(f)).unwrap(), "{f}");
    }
    let history = std::fs::read_to_string(t1.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().filter(|l| l.contains("\"step\"") && l.contains("\"lr\"")).count(), 3);

    let ckpt = t1.join("model.ckpt");
    let out = ok(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--renders", s(&renders)]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["images"], 4);

    let id = serde_json::from_slice::<Value>(&std::fs::read(&corpus).unwrap()).unwrap()[0]["id"].as_str().unwrap().to_string();
    let image = renders.join(format!("{id}/s0.png"));
    let out = ok(&["infer", "--checkpoint", s(&ckpt), "--image", s(&image), "--threshold", "0.0"]);
    let resp: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(resp["primitives"].as_array().unwrap().len(), 20);

    let exported = dir.path().join("out.svg");
    let detections = dir.path().join("detections.json");
    std::fs::write(&detections, &out.stdout).unwrap();
    ok(&["export", "--input", s(&detections), "--format", "svg", "--out", s(&exported)]);
    assert_eq!(read_svg(&std::fs::read(&exported).unwrap()).unwrap().len(), 20);

    let out = ok(&[
        "ablate", "--corpus", s(&corpus), "--renders", s(&renders), "--preset", "smoke", "--overfit",
        "--max-steps", "2", "--batch-size", "2", "--groups", "0,1,3",
    ]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["sweep"], "groups");
    let keys: Vec<&String> = v["reports"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["0", "1", "3"]);
    assert!(v["reports"]["3"]["type_acc"].is_number());
}

#[test]
fn export_writes_scaled_dxf() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("p.json");
    std::fs::write(&input, r#"[{"kind":"line","params":[0,0,1,0,0,0]},{"kind":"circle","params":[0.5,0.5,0.25,0,0,0]}]"#).unwrap();
    let out = ok(&["export", "--input", s(&input), "--format", "dxf", "--seed", "0"]);
    let entities = read_dxf(&out.stdout).unwrap();
    assert_eq!(entities.len(), 2);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("\r\n11\r\n100.0\r\n"));
    assert!(text.contains("\r\n40\r\n25.0\r\n"));
}

#[test]
fn usage_errors_exit_with_status_2() {
    let cases: [&[&str]; 5] = [
        &[],
        &["no-such-command"],
        &["gen-data", "--out", "x"],
        &["eval", "--corpus", "c.json"],
        &["eval", "--corpus", "c.json", "--oracle", "--checkpoint", "m.ckpt"],
    ];
    for args in cases {
        assert_eq!(primsketch(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_failures_exit_nonzero_with_a_message() {
    let out = primsketch(&["eval", "--oracle", "--corpus", "/definitely/missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}
