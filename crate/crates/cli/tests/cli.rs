use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn ria(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ria")).args(args).env("IA_THREADS", "1").output().expect("spawn ria")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, clips: &str, seed: &str) -> Output {
    ria(&["gen-data", "--clips", clips, "--seed", seed, "--out", dir.to_str().unwrap()])
}

#[test]
fn gen_data_prints_manifest_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = gen(&a, "18", "1");
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("wrote 18 clips"), "{text}");
    assert!(text.contains("LH-NP  1"), "{text}");
    assert!(gen(&b, "18", "1").status.success());
    for f in ["dataset.ialt", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn too_few_clips_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let out = gen(tmp.path(), "5", "1");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_flags_and_missing_files() {
    assert_eq!(ria(&["train", "--bogus"]).status.code(), Some(2));
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope");
    let out = ria(&["train", "--data", missing.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"tau": -1.0}"#).unwrap();
    let out = ria(&["gen-data", "--clips", "18", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_ria")).args(["gradcheck", "--only", "tensor.tanh"]).env("IA_THREADS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_filter_and_fault_injection() {
    let out = ria(&["gradcheck", "--only", "softquant"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let names: Vec<&str> = text.lines().filter(|l| l.ends_with("ok")).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["softquant.states", "softquant.latents"]);

    let out = ria(&["gradcheck", "--only", "softquant", "--inject-fault", "softquant.latents"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("softquant.latents"));

    assert_eq!(ria(&["gradcheck", "--only", "no_such_target"]).status.code(), Some(2));
}

#[test]
fn train_with_zero_lr_keeps_loss_and_eval_reports() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert!(gen(&data, "18", "3").status.success());
    let out = ria(&["train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(), "--steps", "5", "--lr", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(run.join("metrics.json")).unwrap()).unwrap();
    let (i, f) = (m["initial"]["total"].as_f64().unwrap(), m["final"]["total"].as_f64().unwrap());
    assert!((i - f).abs() <= 1e-12);
    assert_eq!(m["losses"].as_array().unwrap().len(), 5);
    assert_eq!(m["config_digest"].as_str().unwrap().len(), 64);

    let ev = tmp.path().join("ev");
    let ckpt = run.join("checkpoint.ialt");
    let out = ria(&["eval", "--data", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert!(out.status.success());
    let e: serde_json::Value = serde_json::from_slice(&fs::read(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(e["clips"].as_array().unwrap().len(), 1);

    let out = ria(&["eval", "--data", data.to_str().unwrap(), "--checkpoint", "/nonexistent/ckpt.ialt"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn resume_continues_where_the_run_stopped() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, "18", "4").status.success());
    let d = data.to_str().unwrap();
    let full = tmp.path().join("full");
    let half = tmp.path().join("half");
    let rest = tmp.path().join("rest");
    assert!(ria(&["train", "--data", d, "--out", full.to_str().unwrap(), "--steps", "8"]).status.success());
    assert!(ria(&["train", "--data", d, "--out", half.to_str().unwrap(), "--steps", "4"]).status.success());
    let ck = half.join("checkpoint.ialt");
    let out = ria(&["train", "--data", d, "--out", rest.to_str().unwrap(), "--steps", "8", "--resume", ck.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(fs::read(full.join("checkpoint.ialt")).unwrap(), fs::read(rest.join("checkpoint.ialt")).unwrap());
}

#[test]
fn ablate_reports_five_variants() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, "18", "5").status.success());
    let out_dir = tmp.path().join("ab");
    let out = ria(&["train", "--ablate", "--data", data.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--steps", "3"]);
    assert!(out.status.success());
    let r: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("ablation.json")).unwrap()).unwrap();
    let v = r["variants"].as_array().unwrap();
    assert_eq!(v.len(), 5);
    assert!(v.iter().all(|x| x["steps"] == 3));
}
