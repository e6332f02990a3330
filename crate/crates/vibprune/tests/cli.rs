use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = "\
task.kind = majority_pair
task.size = 400
model.width = 16
model.layers = 2
model.heads = 2
model.ffn_dim = 32
teacher.epochs = 3
prune.epochs = 2
finetune.epochs = 1
";

fn vibprune(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("run.cfg");
    Command::new(env!("CARGO_BIN_EXE_vibprune"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = vibprune(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_command_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("run.cfg"), CONFIG).unwrap();

    let t = ok(dir, &["train-teacher"]);
    assert!(t["val_accuracy"].as_f64().unwrap() > 0.5);
    for f in ["data.vibd", "teacher.vibp", "teacher.json", "metrics.jsonl"] {
        assert!(dir.join(f).exists(), "{f}");
    }

    let p = ok(dir, &["prune", "--variant", "faster", "--target", "0.5", "--set", "prune.lr_gates=0.02"]);
    assert_eq!(p["target"], 0.5);
    assert!(p["steps"].as_u64().unwrap() > 0);

    let f = ok(dir, &["finetune"]);
    assert!(f["hard_sparsity"].as_f64().unwrap() >= 0.0);

    let side = ok(dir, &["extract"]);
    assert_eq!(side, json(&dir.join("dense.json")));

    let e = ok(dir, &["eval"]);
    assert_eq!(e["params"], side["params"]);
    assert_eq!(e["flops"], side["flops"]);
    let acc = e["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    ok(dir, &["analyze"]);
    let pattern = json(&dir.join("analysis/pattern.json"));
    assert_eq!(pattern["width_kept"], side["d_kept"]);
    let js = json(&dir.join("analysis/head_js.json"));
    let m = js["matrix"].as_array().unwrap();
    for (i, row) in m.iter().enumerate() {
        assert_eq!(row[i], 0.0);
    }

    // every training step appended one metrics line
    let lines = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    for l in lines.lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        assert!(v.get("phase").is_some(), "{l}");
    }
}

#[test]
fn gradcheck_passes_its_thresholds() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("run.cfg"), "").unwrap();
    let v = ok(tmp.path(), &["gradcheck"]);
    for (name, err) in v.as_object().unwrap() {
        assert!(err.as_f64().unwrap() < vibprune::cli::gradcheck_threshold(name), "{name}: {err}");
    }
    assert!(v.get("kl_term").is_some() && v.get("total").is_some());
}

#[test]
fn errors_name_their_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("run.cfg"), "model.wdith = 3\n").unwrap();
    let out = vibprune(dir, &["train-teacher"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("config error") && err.contains("model.wdith"), "{err}");

    std::fs::write(dir.join("run.cfg"), "").unwrap();
    let out = vibprune(dir, &["extract"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
}
