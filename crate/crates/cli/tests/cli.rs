use std::path::Path;
use std::process::{Command, Output};

use bttf_core::params::sha256_hex;
use serde_json::Value;

fn bttf_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bttf-lab"))
        .args(args)
        .env("BTTF_LAB_QUIET", "1")
        .env_remove("BTTF_LAB_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn digests(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "manifest.json" {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, sha256_hex(&std::fs::read(&path).unwrap())));
            }
        }
    }
    out.sort();
    out
}

const TINY_DATA: [&str; 4] = ["--set", "train_per_class=4", "--set", "test_per_class=2"];

fn gen_tiny(out: &Path) {
    let mut args = vec!["gen-data", "--out", p(out)];
    args.extend(TINY_DATA);
    ok(&bttf_lab(&args));
}

/// Data plus a one-epoch classifier, frame classifier, and denoiser.
fn tiny_checkpoints(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = root.join("data");
    let ck = root.join("ck");
    gen_tiny(&data);
    ok(&bttf_lab(&["train", "classifier", "--data", p(&data), "--out", p(&ck), "--set", "train.epochs=1"]));
    ok(&bttf_lab(&[
        "train", "classifier", "--data", p(&data), "--out", p(&ck), "--set", "train.epochs=1", "--set", "kind=frame",
    ]));
    ok(&bttf_lab(&[
        "train", "denoiser", "--data", p(&data), "--out", p(&ck), "--set", "train.epochs=1", "--set", "train.width_mult=8",
    ]));
    (data, ck)
}

#[test]
fn invalid_speed_is_a_validation_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = bttf_lab(&["gen-data", "--out", p(dir.path()), "--set", "speed=0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("speed"));
}

#[test]
fn unknown_override_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = bttf_lab(&["gen-data", "--out", p(dir.path()), "--set", "sped=3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen_tiny(a.path());
    gen_tiny(b.path());
    let (da, db) = (digests(a.path()), digests(b.path()));
    assert_eq!(da.iter().filter(|(f, _)| f.ends_with(".bvid")).count(), 4 * (4 + 2));
    assert_eq!(da, db);
    let m = read_json(&a.path().join("manifest.json"));
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["config"]["train_per_class"], 4);
}

#[test]
fn unknown_method_lists_valid_methods() {
    let dir = tempfile::tempdir().unwrap();
    let out = bttf_lab(&[
        "explain", "--method", "dvce", "--input", "x.bvid", "--target", "0", "--checkpoints", p(dir.path()), "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for m in ["bttf", "pgd", "cg-frame", "cg-video-mid", "cg-video"] {
        assert!(err.contains(m), "{err}");
    }
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    gen_tiny(&data);
    let input = data.join("test/000000.bvid");
    let out = bttf_lab(&[
        "explain", "--method", "pgd", "--input", p(&input), "--target", "1", "--checkpoints", p(&root.path().join("none")),
        "--out", p(&root.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn training_resume_explain_and_evaluate() {
    let root = tempfile::tempdir().unwrap();
    let (data, ck) = tiny_checkpoints(root.path());

    let meta = read_json(&ck.join("classifier.json"));
    let steps = meta["step"].as_u64().unwrap();
    assert!(steps > 0);
    let log = std::fs::read_to_string(ck.join("classifier.log.jsonl")).unwrap();
    for line in log.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "split", "loss", "accuracy"] {
            assert!(v.get(key).is_some(), "{line}");
        }
    }
    assert!(log.lines().any(|l| l.contains("\"test\"")));
    ok(&bttf_lab(&["train", "classifier", "--data", p(&data), "--out", p(&ck), "--set", "train.epochs=1", "--resume"]));
    assert_eq!(read_json(&ck.join("classifier.json"))["step"].as_u64().unwrap(), 2 * steps);

    let input = data.join("test/000000.bvid");
    let bad = bttf_lab(&[
        "explain", "--method", "pgd", "--input", p(&input), "--target", "9", "--checkpoints", p(&ck), "--out",
        p(&root.path().join("bad")),
    ]);
    assert_eq!(bad.status.code(), Some(2));

    for method in ["bttf", "pgd", "cg-frame", "cg-video-mid", "cg-video"] {
        let out = root.path().join(method);
        ok(&bttf_lab(&[
            "explain", "--method", method, "--input", p(&input), "--target", "1", "--checkpoints", p(&ck), "--out",
            p(&out), "--set", "bttf.cfe_iters=1", "--set", "bttf.max_depth=2", "--set", "pgd.steps=3",
        ]));
        for f in ["cfe.bvid", "cfe_grid.ppm", "result.json", "trace.jsonl", "manifest.json"] {
            assert!(out.join(f).exists(), "{method}: {f}");
        }
        let r = read_json(&out.join("result.json"));
        assert_eq!(r["method"], method);
        assert_eq!(r["target"], 1);
        assert_eq!(r["valid"], r["predicted"] == 1);
    }
    let trace = std::fs::read_to_string(root.path().join("bttf/trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 2 + 1);

    let list = serde_json::json!({ "entries": [ { "path": p(&input) }, { "path": p(&data.join("test/000001.bvid")) } ] });
    let lpath = root.path().join("list.json");
    std::fs::write(&lpath, list.to_string()).unwrap();
    let ev = root.path().join("eval");
    ok(&bttf_lab(&["evaluate", "--originals", p(&lpath), "--counterfactuals", p(&lpath), "--checkpoints", p(&ck), "--out", p(&ev)]));
    let rep = read_json(&ev.join("report.json"));
    assert_eq!(rep["ssim"].as_f64().unwrap(), 1.0);
    assert_eq!(rep["flip_rate"].as_f64().unwrap(), 1.0);
    assert!(rep["fid"].as_f64().unwrap().abs() < 1e-9);
    assert!(rep["fvd"].as_f64().unwrap().abs() < 1e-9);
    assert!(rep["extractor"].is_object());
    assert_eq!(std::fs::read_to_string(ev.join("samples.jsonl")).unwrap().lines().count(), 2);
}
