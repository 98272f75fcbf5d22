use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_focusloop")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn mite_from_reports() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("b.json"), r#"{"accuracy_pct": 79.06, "mean_total_visual_tokens": 4455}"#).unwrap();
    // fraction form is accepted too
    std::fs::write(dir.path().join("c.json"), r#"{"accuracy": 0.8953, "mean_total_visual_tokens": 4489}"#).unwrap();
    let (b, c) = (path(dir.path(), "b.json"), path(dir.path(), "c.json"));
    assert_eq!(ok(&["mite", "--baseline", &b, "--candidate", &c]), "30.79\n");

    // equal token counts leave MITE undefined
    let out = run(&["--json", "mite", "--baseline", &b, "--candidate", &b]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(err["error"]["message"].as_str().unwrap().len() > 0);
}

#[test]
fn structured_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let empty = path(dir.path(), "empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    std::fs::write(dir.path().join("s.json"), r#"["<answer>x</answer>"]"#).unwrap();
    let policy = format!("scripted:{}", path(dir.path(), "s.json"));

    let out = run(&["--json", "eval", "--manifest", &empty, "--policy", &policy]);
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["error"]["kind"], "harness");

    let out = run(&["eval", "--manifest", &empty, "--policy", "bogus:thing"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = run(&["eval", "--manifest", &path(dir.path(), "missing.jsonl"), "--policy", &policy]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_synth_is_reproducible_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["train-synth", "--iters", "15", "--cold-start-tasks", "40", "--eval-episodes", "20"];
    for (name, threads) in [("a", "1"), ("b", "3")] {
        let out = path(dir.path(), name);
        let mut args = common.to_vec();
        args.extend(["--parallel", threads, "--out", &out]);
        ok(&args);
    }
    for file in ["train_log.jsonl", "policy.json", "evaluation.json"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let log = std::fs::read_to_string(dir.path().join("a/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 15);

    // the trained table drives a synthetic manifest through eval and replay
    let manifest = path(dir.path(), "m.jsonl");
    ok(&["synth-manifest", "--levels", "224,2560", "--per-level", "4", "--out", &manifest]);
    let policy = format!("synth:{}", path(dir.path(), "a/policy.json"));
    let eval_dir = path(dir.path(), "eval");
    let report: Value =
        serde_json::from_str(&ok(&["--json", "eval", "--manifest", &manifest, "--policy", &policy, "--greedy", "--out", &eval_dir]))
            .unwrap();
    assert_eq!(report["n"], 8);
    let trace = ok(&["replay", "--trajectories", &path(dir.path(), "eval/trajectories.jsonl")]);
    assert_eq!(trace.matches("== ").count(), 8);
    assert!(trace.contains("=> answered"));
}

#[test]
fn replay_shows_root_frame_regions() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = path(dir.path(), "m.jsonl");
    ok(&["synth-manifest", "--levels", "448", "--per-level", "2", "--seed", "3", "--out", &manifest]);
    let zoom = |b: &str| format!(r#"<think>z</think><tool_call>{{\"name\":\"image_zoom_in_tool\",\"arguments\":{{\"bbox_2d\":{b}}}}}</tool_call>"#);
    let script = format!(r#"["{}", "{}", "<think>ok</think><answer>red</answer>"]"#, zoom("[100,100,300,300]"), zoom("[1,1,3,3]"));
    std::fs::write(dir.path().join("s.json"), script).unwrap();
    let out = path(dir.path(), "e");
    ok(&["eval", "--manifest", &manifest, "--policy", &format!("scripted:{}", path(dir.path(), "s.json")), "--out", &out]);
    let jsonl = path(dir.path(), "e/trajectories.jsonl");
    let first_id = std::fs::read_to_string(&jsonl).unwrap().lines().next().map(|l| {
        serde_json::from_str::<Value>(l).unwrap()["id"].as_str().unwrap().to_string()
    });
    let trace = ok(&["replay", "--trajectories", &jsonl, "--id", first_id.as_deref().unwrap()]);
    assert_eq!(trace.matches("== ").count(), 1);
    // the second crop is inside a 2x view whose origin is (100, 100)
    assert!(trace.contains("zoom [1, 1, 3, 3] (root [100, 100, 102, 102])"), "{trace}");

    let out = run(&["replay", "--trajectories", &jsonl, "--id", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn forge_overrides_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("forge.toml"), "sources = 3\nseed = 1\n").unwrap();
    let out = path(dir.path(), "f");
    let stats: Value = serde_json::from_str(&ok(&[
        "--json",
        "forge",
        "--config",
        &path(dir.path(), "forge.toml"),
        "--sources",
        "5",
        "--out",
        &out,
    ]))
    .unwrap();
    let corpus = std::fs::read_to_string(dir.path().join("f/corpus.jsonl")).unwrap();
    assert_eq!(stats["total"].as_u64().unwrap() as usize, corpus.lines().count());
    assert_eq!(stats["total"], 35);
}

#[test]
fn sweep_reports_the_trend() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = path(dir.path(), "m.jsonl");
    ok(&["synth-manifest", "--levels", "224,448,2560", "--per-level", "3", "--out", &manifest]);
    std::fs::write(dir.path().join("s.json"), r#"["<think>x</think><answer>red</answer>"]"#).unwrap();
    let policy = format!("scripted:{}", path(dir.path(), "s.json"));
    let table: Value = serde_json::from_str(&ok(&["--json", "sweep", "--manifest", &manifest, "--policy", &policy])).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 3);
    assert!(table["rows"].as_array().unwrap().iter().all(|r| r["mean_zoom_calls"] == 0.0));
}

#[test]
fn rendered_manifest_resolves_from_anywhere() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_focusloop"))
        .current_dir(dir.path())
        .args(["synth-manifest", "--levels", "224", "--per-level", "2", "--render-dir", "runs/img", "--out", "runs/m.jsonl"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(dir.path().join("runs/img")).unwrap().count(), 2);
    std::fs::write(dir.path().join("s.json"), r#"["<think>x</think><answer>red</answer>"]"#).unwrap();
    let report: Value = serde_json::from_str(&ok(&[
        "--json",
        "eval",
        "--manifest",
        &path(dir.path(), "runs/m.jsonl"),
        "--policy",
        &format!("scripted:{}", path(dir.path(), "s.json")),
    ]))
    .unwrap();
    assert_eq!(report["errors"], 0);
}
