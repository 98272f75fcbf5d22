use std::collections::{BTreeMap, HashMap};

use focusloop_core::agar::DefaultMatcher;
use focusloop_core::exec::Execution;
use focusloop_core::grpo::{cold_start_fit, expert_demonstrations, TabularPolicy};
use focusloop_core::harness::*;
use focusloop_core::policy::{ScriptBook, ScriptedPolicy};
use focusloop_core::synthenv::agent::SynthAgent;
use focusloop_core::synthenv::{SynthEnv, RESOLUTION_LEVELS};
use focusloop_core::trajectory::{ImageRef, StepRecord};

const DIRECT: &str = "<think>The sign is readable.</think>\n<answer>red</answer>";
const ZOOM: &str = "<think>Too small, zooming.</think>\n<tool_call>{\"name\":\"image_zoom_in_tool\",\"arguments\":{\"bbox_2d\":[0,0,320,240]}}</tool_call>";
const ZOOM_ANSWER: &str = "<think>Now visible.</think>\n<answer>red</answer>";

fn entry(id: &str, gold: &str, w: u32, h: u32) -> ManifestEntry {
    ManifestEntry {
        id: id.into(),
        image: ImageRef::detached(format!("img-{id}"), w, h).unwrap(),
        query: "What colour is the sign?".into(),
        gold: gold.into(),
        resolution: w.max(h),
    }
}

fn scripts(pairs: &[(&str, &[&str])]) -> ScriptBook {
    let by: HashMap<String, ScriptedPolicy> = pairs
        .iter()
        .map(|(id, s)| (format!("img-{id}"), ScriptedPolicy::new(s.iter().copied()).unwrap()))
        .collect();
    ScriptBook::new(by, None)
}

#[test]
fn three_of_four_correct() {
    let manifest = vec![entry("a", "red", 640, 480), entry("b", "red", 640, 480), entry("c", "red", 1280, 960), entry("d", "blue", 640, 480)];
    let policy = scripts(&[("a", &[DIRECT]), ("b", &[ZOOM, ZOOM_ANSWER]), ("c", &[DIRECT]), ("d", &[DIRECT])]);
    let run = run_manifest(&policy, &manifest, &EvalOptions::default(), &DefaultMatcher).unwrap();
    let o = &run.report.overall;
    assert_eq!((o.n, o.correct, o.errors), (4, 3, 0));
    assert_eq!(o.accuracy, 0.75);
    assert_eq!(o.accuracy_pct, 75.0);
    assert_eq!(o.mean_zoom_calls, 0.25);
    // 640x480 is 23x18 patches; a 320x240 crop zoomed x2 is the same size
    assert_eq!(o.mean_added_visual_tokens, 414.0 / 4.0);
    assert_eq!(o.mean_total_visual_tokens, (3.0 * 414.0 + 46.0 * 35.0 + 414.0) / 4.0);
    assert_eq!(run.report.per_resolution[&640].n, 3);
    assert_eq!(run.report.per_resolution[&1280].accuracy, 1.0);
}

#[test]
fn direct_only_policy_never_zooms() {
    let manifest: Vec<_> = (0..5).map(|i| entry(&format!("e{i}"), "red", 448, 448)).collect();
    let policy = ScriptBook::new(HashMap::new(), Some(ScriptedPolicy::new([DIRECT]).unwrap()));
    let run = run_manifest(&policy, &manifest, &EvalOptions::default(), &DefaultMatcher).unwrap();
    assert_eq!(run.report.overall.mean_zoom_calls, 0.0);
    assert_eq!(run.report.overall.mean_added_visual_tokens, 0.0);
    assert_eq!(run.report.overall.mean_total_visual_tokens, 256.0);
}

#[test]
fn manifest_errors() {
    let p = ScriptedPolicy::new([DIRECT]).unwrap();
    assert!(matches!(run_manifest(&p, &[], &EvalOptions::default(), &DefaultMatcher), Err(HarnessError::EmptyManifest)));
    let dup = vec![entry("a", "red", 10, 10), entry("a", "red", 10, 10)];
    assert!(matches!(run_manifest(&p, &dup, &EvalOptions::default(), &DefaultMatcher), Err(HarnessError::DuplicateId(_))));
    let bad = r#"{"id":"x","image":{"id":"i","width":4,"height":4},"query":"q","gold":"g","resolution":4,"extra":1}"#;
    assert!(matches!(read_manifest(bad, None), Err(HarnessError::Manifest { line: 1, .. })));
    let missing = r#"{"id":"x","image":"nope/missing.png","query":"q","gold":"g","resolution":4}"#;
    assert!(matches!(read_manifest(missing, None), Err(HarnessError::Manifest { line: 1, .. })));
}

#[test]
fn failures_inside_and_outside_the_episode() {
    let mut missing = entry("c", "red", 640, 480);
    missing.image = ImageRef::from_path_with_dims("img-c", "/nonexistent/c.png", 640, 480).unwrap();
    let manifest = vec![entry("a", "red", 640, 480), entry("b", "red", 640, 480), missing];
    // b's script runs out after the zoom: scored, wrong; c cannot be decoded: errored
    let policy = scripts(&[("a", &[DIRECT]), ("b", &[ZOOM]), ("c", &[DIRECT])]);
    let run = run_manifest(&policy, &manifest, &EvalOptions::default(), &DefaultMatcher).unwrap();
    let o = &run.report.overall;
    assert_eq!((o.n, o.errors, o.correct), (3, 1, 1));
    assert_eq!(o.accuracy, 0.5);
    assert_eq!(o.mean_zoom_calls, 0.5);
    assert!(matches!(&run.records[2], EvalRecord::Errored { id, .. } if id == "c"));
    let back = records_from_jsonl(&run.records_jsonl()).unwrap();
    assert_eq!(back, run.records);
    assert_eq!(report_from_records(&back), run.report);
}

/// Recompute the headline fields from the raw JSONL without going through
/// the library's report code.
fn recompute(jsonl: &str) -> BTreeMap<&'static str, f64> {
    let (mut n, mut correct, mut zooms, mut added, mut base) = (0u64, 0u64, 0u64, 0u64, 0u64);
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v.get("error").is_some() {
            continue;
        }
        n += 1;
        correct += v["correct"].as_bool().unwrap() as u64;
        base += v["base_visual_tokens"].as_u64().unwrap();
        for step in v["trajectory"]["steps"].as_array().unwrap() {
            let obj = step.as_object().unwrap();
            let kind = obj.get("kind").or_else(|| obj.get("type")).and_then(|k| k.as_str()).unwrap_or_default();
            if kind == "tool_call" {
                zooms += 1;
            }
            if let Some(t) = obj.get("added_visual_tokens") {
                added += t.as_u64().unwrap();
            }
        }
    }
    let n = n as f64;
    BTreeMap::from([
        ("accuracy", correct as f64 / n),
        ("mean_zoom_calls", zooms as f64 / n),
        ("mean_added_visual_tokens", added as f64 / n),
        ("mean_total_visual_tokens", (base + added) as f64 / n),
    ])
}

fn expert_agent() -> SynthAgent {
    let env = SynthEnv::default();
    let demos = expert_demonstrations(&env, 200, 1);
    let (fit, _) = cold_start_fit(&TabularPolicy::for_env(&env), &demos, 300, 1.0).unwrap();
    SynthAgent::new(env, fit).greedy(true)
}

#[test]
fn runs_are_byte_identical_and_recomputable() {
    let env = SynthEnv::default();
    let manifest = synth_manifest(&env.config, &RESOLUTION_LEVELS, 8, 5, None).unwrap();
    assert_eq!(manifest.len(), 56);
    let agent = SynthAgent::new(env.clone(), TabularPolicy::for_env(&env));
    let opts = EvalOptions { seed: 9, ..EvalOptions::default() };
    let a = run_manifest(&agent, &manifest, &opts, &DefaultMatcher).unwrap();
    let b = run_manifest(&agent, &manifest, &EvalOptions { execution: Execution::Sequential, ..opts }, &DefaultMatcher).unwrap();
    assert_eq!(a.records_jsonl(), b.records_jsonl());
    assert_eq!(a.report_json(), b.report_json());

    let want = recompute(&a.records_jsonl());
    assert!(want["mean_zoom_calls"] > 0.0);
    let o = &a.report.overall;
    assert_eq!(o.accuracy, want["accuracy"]);
    assert_eq!(o.mean_zoom_calls, want["mean_zoom_calls"]);
    assert_eq!(o.mean_added_visual_tokens, want["mean_added_visual_tokens"]);
    assert_eq!(o.mean_total_visual_tokens, want["mean_total_visual_tokens"]);
    // a different seed changes sampled behaviour
    let c = run_manifest(&agent, &manifest, &EvalOptions { seed: 10, ..opts }, &DefaultMatcher).unwrap();
    assert_ne!(a.records_jsonl(), c.records_jsonl());
}

#[test]
fn rendered_manifest_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let env = SynthEnv::default();
    let manifest = synth_manifest(&env.config, &[224, 1024], 2, 3, Some(dir.path())).unwrap();
    let text = write_manifest(&manifest);
    let back = read_manifest(&text, Some(dir.path())).unwrap();
    assert_eq!(back, manifest);
    let run = run_manifest(&expert_agent(), &back, &EvalOptions::default(), &DefaultMatcher).unwrap();
    assert_eq!(run.report.overall.accuracy, 1.0);
    let traj = match &run.records[0] {
        EvalRecord::Scored { trajectory, .. } => trajectory,
        other => panic!("{other:?}"),
    };
    assert!(traj.steps.iter().any(|s| matches!(s, StepRecord::Observation { image, .. } if image.has_pixels())));
}

#[test]
fn published_mite_row() {
    let acc_base = [37.7, 41.36, 52.88, 62.3, 69.11, 79.58, 79.06];
    let acc_adapt = [39.27, 43.98, 53.93, 60.21, 75.39, 87.96, 89.53];
    let tok_base = [54.0, 127.0, 244.0, 549.0, 1282.0, 4307.0, 4455.0];
    let tok_adapt = [107.0, 176.0, 280.0, 590.0, 1303.0, 4340.0, 4489.0];
    let published = [3.0, 5.4, 2.9, -5.1, 29.9, 25.4, 30.8];
    for i in 0..7 {
        let m = compute_mite((acc_base[i], tok_base[i]), (acc_adapt[i], tok_adapt[i])).unwrap();
        let direct = (acc_adapt[i] - acc_base[i]) / (tok_adapt[i] - tok_base[i]) * 100.0;
        assert!((m - direct).abs() < 1e-12);
        assert!((m - published[i]).abs() <= 0.1 + 1e-9, "column {i}: {m}");
    }
    assert!(matches!(compute_mite((50.0, 100.0), (60.0, 100.0)), Err(HarnessError::Undefined)));
    let forward = compute_mite((37.7, 54.0), (39.27, 107.0)).unwrap();
    let backward = compute_mite((39.27, 107.0), (37.7, 54.0)).unwrap();
    assert!((forward - backward).abs() < 1e-12);
}

/// Pearson correlation of ranks for distinct values, written directly.
fn spearman_distinct(xs: &[f64], ys: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter().map(|x| v.iter().filter(|y| *y < x).count() as f64 + 1.0).collect()
    };
    let (rx, ry) = (rank(xs), rank(ys));
    let n = xs.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn spearman_against_closed_form() {
    use rand::{seq::SliceRandom, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let xs: Vec<f64> = (0..9).map(f64::from).collect();
    for _ in 0..200 {
        let mut ys = xs.clone();
        ys.shuffle(&mut rng);
        assert!((spearman(&xs, &ys) - spearman_distinct(&xs, &ys)).abs() < 1e-12);
    }
    assert_eq!(spearman(&xs, &[1.0; 9]), 0.0);
    let zooms = [2.5, 2.1, 1.7, 1.4, 1.0, 0.6, 0.53];
    let levels: Vec<f64> = RESOLUTION_LEVELS.iter().map(|&l| l as f64).collect();
    assert!((spearman(&levels, &zooms) + 1.0).abs() < 1e-12);
}

#[test]
fn sweep_of_the_expert_agent() {
    let env = SynthEnv::default();
    let manifests: BTreeMap<u32, Vec<ManifestEntry>> = RESOLUTION_LEVELS
        .iter()
        .map(|&l| (l, synth_manifest(&env.config, &[l], 10, 2, None).unwrap()))
        .collect();
    let agent = expert_agent();
    let opts = EvalOptions::default();
    let table = resolution_sweep(&agent, &manifests, None, &opts, &DefaultMatcher).unwrap();
    assert_eq!(table.rows.len(), 7);
    assert!(table.zoom_rank_correlation < -0.8, "{}", table.zoom_rank_correlation);
    assert!(table.rows.iter().all(|r| r.accuracy_pct == 100.0 && r.mite.is_none()));

    // against a direct-only baseline, extra tokens buy accuracy
    let direct = ScriptBook::new(HashMap::new(), Some(ScriptedPolicy::new(["<think>x</think>\n<answer>none</answer>"]).unwrap()));
    let baseline: BTreeMap<u32, Breakdown> = manifests
        .iter()
        .map(|(&l, m)| (l, run_manifest(&direct, m, &opts, &DefaultMatcher).unwrap().report.overall))
        .collect();
    let table = resolution_sweep(&agent, &manifests, Some(&baseline), &opts, &DefaultMatcher).unwrap();
    assert!(table.rows[0].mite.unwrap() > 0.0);
    assert!(table.rows[6].mite.is_none());

    let one: BTreeMap<_, _> = manifests.into_iter().take(1).collect();
    assert!(matches!(resolution_sweep(&agent, &one, None, &opts, &DefaultMatcher), Err(HarnessError::TooFewLevels(1))));
}
