use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vclip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vclip"))
        .args(args)
        .env("VCLIP_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vclip(args);
    assert!(
        out.status.success(),
        "vclip {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn metric(path: &Path, name: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    v.as_array()
        .unwrap()
        .iter()
        .find(|r| r["metric"] == name)
        .unwrap_or_else(|| panic!("{name} missing from {}", path.display()))["value"]
        .as_f64()
        .unwrap()
}

#[test]
fn generate_train_and_evaluate_every_task() {
    let t = tempfile::tempdir().unwrap();
    let c = t.path().join("corpus");
    let run = t.path().join("run");
    ok(&["gen-corpus", "--out", s(&c)]);
    for f in ["manifest.json", "features.bin", "transcript.jsonl", "topics.jsonl", "run_manifest.json"] {
        assert!(c.join(f).exists(), "{f}");
    }
    ok(&["pretrain", "--corpus", s(&c), "--out", s(&run), "--epochs", "2"]);
    let ckpt = run.join("latest.vclp");
    assert!(ckpt.exists());

    let eval = c.join("eval");
    for (task, file, m) in [
        ("retrieval", "retrieval.jsonl", "R@1"),
        ("qa", "qa.jsonl", "accuracy"),
        ("segmentation", "labels.json", "frame_accuracy"),
        ("localization", "steps.jsonl", "average_step_recall"),
    ] {
        let out = t.path().join(format!("{task}.json"));
        let stdout = ok(&[
            "eval", "--checkpoint", s(&ckpt), "--task", task, "--data", s(&eval.join(file)), "--out", s(&out),
        ]);
        assert!(stdout.contains(m), "{stdout}");
        let v = metric(&out, m);
        assert!((0.0..=1.0).contains(&v), "{task} {m} = {v}");
        assert!(t.path().join(format!("{task}.manifest.json")).exists());
    }
}

#[test]
fn reruns_reproduce_every_hash() {
    let t = tempfile::tempdir().unwrap();
    let mut manifests = Vec::new();
    for i in 0..2 {
        let c = t.path().join(format!("c{i}"));
        let run = t.path().join(format!("r{i}"));
        ok(&["gen-corpus", "--out", s(&c), "--seed", "7"]);
        ok(&["pretrain", "--corpus", s(&c), "--out", s(&run), "--epochs", "1", "--seed", "3"]);
        let m: serde_json::Value = serde_json::from_slice(&fs::read(run.join("run_manifest.json")).unwrap()).unwrap();
        manifests.push((fs::read(c.join("features.bin")).unwrap(), m["outputs"].clone(), m["inputs"].clone()));
    }
    assert_eq!(manifests[0], manifests[1]);
    assert!(manifests[0].1["latest.vclp"].is_string());
}

#[test]
fn impossible_combinations_exit_nonzero() {
    let t = tempfile::tempdir().unwrap();
    let c = t.path().join("c");
    ok(&["gen-corpus", "--out", s(&c)]);
    let cfg = t.path().join("k.json");
    fs::write(&cfg, r#"{"retrieval": {"k": 150}}"#).unwrap();
    let out = vclip(&[
        "pretrain", "--corpus", s(&c), "--out", s(&t.path().join("r")), "--config", s(&cfg), "--retrieval-mode", "sample_2k",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sample_2k"));

    let bad_mode = vclip(&["pretrain", "--corpus", s(&c), "--out", s(&t.path().join("r")), "--pooling", "max"]);
    assert!(!bad_mode.status.success());
    let bad_task = vclip(&["eval", "--checkpoint", "x", "--task", "captioning", "--data", "y"]);
    assert!(!bad_task.status.success());
    let missing = vclip(&["eval", "--checkpoint", "/nonexistent.vclp", "--task", "qa", "--data", s(&c.join("eval/qa.jsonl"))]);
    assert!(!missing.status.success());
}

#[test]
fn untrained_checkpoint_scores_near_chance() {
    let t = tempfile::tempdir().unwrap();
    let c = t.path().join("c");
    let run = t.path().join("r");
    ok(&["gen-corpus", "--out", s(&c)]);
    let cfg = t.path().join("frozen.json");
    fs::write(&cfg, r#"{"optimizer": {"lr": 0.0, "end_lr": 0.0}}"#).unwrap();
    ok(&["pretrain", "--corpus", s(&c), "--out", s(&run), "--epochs", "1", "--config", s(&cfg)]);
    let out = t.path().join("m.json");
    ok(&[
        "eval", "--checkpoint", s(&run.join("latest.vclp")), "--task", "retrieval",
        "--data", s(&c.join("eval/retrieval.jsonl")), "--out", s(&out),
    ]);
    // 50 candidates, so chance R@1 is 0.02
    assert!(metric(&out, "R@1") < 0.1);
}

#[test]
fn resume_finishes_an_interrupted_run_identically() {
    let t = tempfile::tempdir().unwrap();
    let c = t.path().join("c");
    ok(&["gen-corpus", "--out", s(&c)]);
    let whole = t.path().join("whole");
    let cut = t.path().join("cut");
    for dir in [&whole, &cut] {
        ok(&["pretrain", "--corpus", s(&c), "--out", s(dir), "--epochs", "2", "--keep-epoch-checkpoints"]);
    }
    // roll the second run back to the end of its first epoch
    fs::copy(cut.join("ckpt-000.vclp"), cut.join("latest.vclp")).unwrap();
    fs::remove_file(cut.join("ckpt-001.vclp")).unwrap();
    ok(&["pretrain", "--corpus", s(&c), "--out", s(&cut), "--resume"]);
    assert_eq!(fs::read(whole.join("latest.vclp")).unwrap(), fs::read(cut.join("latest.vclp")).unwrap());
    assert_eq!(fs::read(whole.join("ckpt-001.vclp")).unwrap(), fs::read(cut.join("ckpt-001.vclp")).unwrap());

    let clash = vclip(&["pretrain", "--corpus", s(&c), "--out", s(&cut), "--resume", "--seed", "4"]);
    assert!(!clash.status.success());
}
