use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use focusloop_core::agar::DefaultMatcher;
use focusloop_core::dataforge::*;
use focusloop_core::exec::Execution;
use focusloop_core::focus::EngineConfig;
use focusloop_core::protocol::{classify_format, parse_output, Segment, Shape, ToolCallPayload};
use focusloop_core::synthenv::{make_task, SynthEnvConfig, RESOLUTION_LEVELS};
use focusloop_core::trajectory::{ImageRef, Region, StepRecord, Terminal, Trajectory};
use focusloop_core::Mode;

const LEVELS: [u32; 7] = RESOLUTION_LEVELS;

struct Always(&'static str);
impl AnswerOracle for Always {
    fn ask(&self, _: &ImageRef, _: &str, _: usize) -> Result<OracleAnswer, String> {
        Ok(OracleAnswer::answerable(self.0))
    }
}

/// Answerable once the longer side reaches `min_level`.
struct FromLevel(u32);
impl AnswerOracle for FromLevel {
    fn ask(&self, image: &ImageRef, _: &str, _: usize) -> Result<OracleAnswer, String> {
        Ok(if image.width().max(image.height()) >= self.0 {
            OracleAnswer::answerable("red")
        } else {
            OracleAnswer::unanswerable()
        })
    }
}

struct Alternating;
impl AnswerOracle for Alternating {
    fn ask(&self, _: &ImageRef, _: &str, repeat: usize) -> Result<OracleAnswer, String> {
        Ok(if repeat % 2 == 0 { OracleAnswer::answerable("red") } else { OracleAnswer::unanswerable() })
    }
}

struct Broken;
impl AnswerOracle for Broken {
    fn ask(&self, _: &ImageRef, _: &str, _: usize) -> Result<OracleAnswer, String> {
        Err("backend unavailable".into())
    }
}

fn source() -> ImageRef {
    ImageRef::detached("photo", 4000, 3000).unwrap()
}

fn probe(oracles: &[&dyn AnswerOracle], repeats: usize) -> ProbeResult {
    probe_answerability(oracles, &source(), "What colour is the sign?", "red", &LEVELS, repeats, &DefaultMatcher, Execution::Parallel)
        .unwrap()
}

#[test]
fn unanimous_oracle_is_direct_everywhere() {
    let r = probe(&[&Always("Red")], 5);
    assert_eq!(r.repeats, 5);
    assert!(r.levels.iter().all(|p| p.category == ProbeCategory::DirectAnswerable));
}

#[test]
fn threshold_oracle_splits_at_its_level() {
    let r = probe(&[&FromLevel(1024)], 5);
    for p in &r.levels {
        let want = if p.level >= 1024 { ProbeCategory::DirectAnswerable } else { ProbeCategory::NeedsZoom };
        assert_eq!(p.category, want, "level {}", p.level);
    }
}

#[test]
fn inconsistent_judgments_are_discarded() {
    let r = probe(&[&Alternating], 5);
    assert!(r.levels.iter().all(|p| p.category == ProbeCategory::Discarded && p.reason.is_some()));
    // a single repeat cannot disagree with itself
    assert!(probe(&[&Alternating], 1).levels.iter().all(|p| p.category == ProbeCategory::DirectAnswerable));
    // two internally consistent oracles that disagree with each other
    let r = probe(&[&Always("red"), &FromLevel(1024)], 3);
    assert_eq!(r.category_at(224), Some(ProbeCategory::Discarded));
    assert_eq!(r.category_at(2560), Some(ProbeCategory::DirectAnswerable));
}

#[test]
fn wrong_answers_count_as_not_answerable() {
    let r = probe(&[&Always("blue")], 5);
    assert!(r.levels.iter().all(|p| p.category == ProbeCategory::NeedsZoom));
}

#[test]
fn oracle_failure_discards_with_reason() {
    let r = probe(&[&Broken], 5);
    for p in &r.levels {
        assert_eq!(p.category, ProbeCategory::Discarded);
        assert!(p.reason.as_deref().unwrap().contains("backend unavailable"));
    }
}

#[test]
fn probe_preconditions() {
    let img = source();
    let m = DefaultMatcher;
    let e = Execution::Sequential;
    assert!(matches!(probe_answerability(&[&Always("a")], &img, "q", "a", &LEVELS, 0, &m, e), Err(ForgeError::NoRepeats)));
    assert!(matches!(probe_answerability(&[&Always("a")], &img, "q", "a", &[], 5, &m, e), Err(ForgeError::NoLevels)));
    assert!(matches!(probe_answerability(&[], &img, "q", "a", &LEVELS, 5, &m, e), Err(ForgeError::NoOracles)));
}

#[test]
fn resizing_keeps_aspect_and_tags_level() {
    let r = resize_to_level(&source(), 224).unwrap();
    assert_eq!((r.width(), r.height(), r.id()), (224, 168, "photo@224"));
}

/// Toolset that finds the target on its second attempt and records every
/// argument it is shown.
#[derive(Default)]
struct Scripted {
    seen: Mutex<Vec<String>>,
    rounds: AtomicUsize,
    reject_all: bool,
    bad_region: bool,
}

impl AgentToolset for Scripted {
    fn locate(&self, view: &SearchView<'_>, description: &str, hint: Option<Region>) -> Result<Region, String> {
        self.seen.lock().unwrap().push(format!("locate {description} {hint:?} {}", view.image.id()));
        if self.bad_region {
            return Ok(Region::new(600, 400, 900, 700));
        }
        self.rounds.fetch_add(1, Ordering::SeqCst);
        Ok(Region::new(0, 0, 320, 240))
    }
    fn understand(&self, view: &SearchView<'_>, query: &str) -> Result<OracleAnswer, String> {
        self.seen.lock().unwrap().push(format!("understand {query} {}", view.image.id()));
        Ok(if view.chain.len() >= 2 { OracleAnswer::answerable("GOLD-7") } else { OracleAnswer::unanswerable() })
    }
    fn adjust_bbox(&self, region: Region, view: &SearchView<'_>, instruction: &str) -> Result<Region, String> {
        self.seen.lock().unwrap().push(format!("adjust {region:?} {instruction} {}", view.image.id()));
        Ok(Region::new(100, 100, 300, 250))
    }
    fn verify(&self, candidate: &str, gold: &str) -> Result<Verdict, String> {
        Ok(if !self.reject_all && candidate == gold {
            Verdict::Accept
        } else {
            Verdict::Reject { feedback: "not quite".into() }
        })
    }
}

fn photo() -> ImageRef {
    ImageRef::detached("scene", 640, 480).unwrap()
}

#[test]
fn search_finds_target_on_second_step() {
    let tools = Scripted::default();
    let t = agent_search(&tools, &photo(), "What is the code?", "GOLD-7", 6, Mode::Strict, &EngineConfig::default())
        .unwrap()
        .unwrap();
    assert_eq!(t.zoom_calls(), 2);
    assert_eq!(t.terminal, Terminal::Answered { answer: "GOLD-7".into() });
    assert_eq!(t.tool_regions().collect::<Vec<_>>(), vec![Region::new(0, 0, 320, 240), Region::new(100, 100, 300, 250)]);
    t.validate().unwrap();
    // the gold answer only ever reached verify
    assert!(tools.seen.lock().unwrap().iter().all(|s| !s.contains("GOLD-7")));
}

#[test]
fn always_reject_hits_the_step_limit() {
    let tools = Scripted { reject_all: true, ..Scripted::default() };
    // understand answers from the second round on, and every answer is rejected
    match agent_search(&tools, &photo(), "q", "GOLD-7", 4, Mode::Strict, &EngineConfig::default()).unwrap() {
        Err(SearchFailure::StepLimit { rounds, trajectory }) => {
            assert_eq!(rounds, 4);
            assert_eq!(trajectory.zoom_calls(), 4);
            assert_eq!(trajectory.terminal, Terminal::StepLimit);
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        agent_search(&tools, &photo(), "q", "g", 0, Mode::Strict, &EngineConfig::default()),
        Err(ForgeError::NoSteps)
    ));
}

#[test]
fn out_of_bounds_region_is_a_tool_error_in_strict_mode() {
    let tools = Scripted { bad_region: true, ..Scripted::default() };
    match agent_search(&tools, &photo(), "q", "g", 3, Mode::Strict, &EngineConfig::default()).unwrap() {
        Err(SearchFailure::ToolError { tool, trajectory, .. }) => {
            assert_eq!(tool, "locate");
            assert_eq!(trajectory.zoom_calls(), 0);
        }
        other => panic!("{other:?}"),
    }
    // lenient mode clamps and carries on
    let t = agent_search(&tools, &photo(), "q", "g", 1, Mode::Lenient, &EngineConfig::default()).unwrap();
    let traj = t.unwrap_err();
    assert!(matches!(traj, SearchFailure::StepLimit { .. }));
    assert!(matches!(traj.trajectory().steps[1], StepRecord::ToolCall { clamped: true, .. }));
}

struct FlakyOnce {
    calls: AtomicUsize,
    fail_always: bool,
}
impl AgentToolset for FlakyOnce {
    fn locate(&self, _: &SearchView<'_>, _: &str, _: Option<Region>) -> Result<Region, String> {
        if self.fail_always || self.calls.fetch_add(1, Ordering::SeqCst) == 0 {
            return Err("timeout".into());
        }
        Ok(Region::new(0, 0, 64, 64))
    }
    fn understand(&self, _: &SearchView<'_>, _: &str) -> Result<OracleAnswer, String> {
        Ok(OracleAnswer::answerable("x"))
    }
    fn adjust_bbox(&self, r: Region, _: &SearchView<'_>, _: &str) -> Result<Region, String> {
        Ok(r)
    }
    fn verify(&self, c: &str, g: &str) -> Result<Verdict, String> {
        Ok(if c == g { Verdict::Accept } else { Verdict::Reject { feedback: "no".into() } })
    }
}

#[test]
fn tool_errors_are_retried_once() {
    let cfg = EngineConfig::default();
    let once = FlakyOnce { calls: AtomicUsize::new(0), fail_always: false };
    assert!(agent_search(&once, &photo(), "q", "x", 2, Mode::Strict, &cfg).unwrap().is_ok());
    let never = FlakyOnce { calls: AtomicUsize::new(0), fail_always: true };
    match agent_search(&never, &photo(), "q", "x", 2, Mode::Strict, &cfg).unwrap() {
        Err(SearchFailure::ToolError { tool, message, .. }) => assert_eq!((tool.as_str(), message.as_str()), ("locate", "timeout")),
        other => panic!("{other:?}"),
    }
}

fn answered(zooms: &[Region], answer: &str) -> Trajectory {
    let mut t = Trajectory::new(photo(), "What is written?");
    for (i, r) in zooms.iter().enumerate() {
        t.steps.push(StepRecord::think(format!("step {i}")));
        t.steps.push(StepRecord::tool_call(*r));
        t.steps.push(StepRecord::Observation { image: ImageRef::detached(format!("v{i}"), 100, 100).unwrap(), added_visual_tokens: 16 });
    }
    t.steps.push(StepRecord::think("done"));
    t.steps.push(StepRecord::answer(answer));
    t.terminal = Terminal::Answered { answer: answer.into() };
    t
}

#[test]
fn summaries_follow_the_protocol() {
    let zooms = [Region::new(10, 10, 200, 200), Region::new(5, 5, 60, 60)];
    let s = summarize_trajectory(&answered(&zooms, "OPEN"), &identity_rewriter).unwrap();
    assert_eq!(s.matches("<tool_call>").count(), 2);
    let segs = parse_output(&s, Mode::Strict).unwrap();
    let regions: Vec<Region> = segs
        .iter()
        .filter_map(|x| match x {
            Segment::ToolCall(ToolCallPayload::Parsed(c)) => Some(c.region()),
            _ => None,
        })
        .collect();
    assert_eq!(regions, zooms);
    assert_eq!(segs.last(), Some(&Segment::Answer("OPEN".into())));
    assert_eq!(classify_format(&segs).shape, Shape::ZoomIn);

    let direct = summarize_trajectory(&answered(&[], "OPEN"), &|s: &str| s.to_uppercase()).unwrap();
    let segs = parse_output(&direct, Mode::Strict).unwrap();
    assert_eq!(classify_format(&segs).shape, Shape::Direct);
    assert_eq!(segs[0], Segment::Think("DONE".into()));

    let mut failed = answered(&zooms, "x");
    failed.terminal = Terminal::StepLimit;
    assert!(matches!(summarize_trajectory(&failed, &identity_rewriter), Err(ForgeError::NotAnswered)));
}

#[test]
fn corpus_counts_and_histogram() {
    let sample = |res, category, search| ForgeSample {
        image: photo(),
        query: "What is written?".into(),
        gold: "OPEN".into(),
        resolution: res,
        category,
        search,
    };
    let one = answered(&[Region::new(0, 0, 10, 10)], "OPEN");
    let two = answered(&[Region::new(0, 0, 10, 10), Region::new(0, 0, 5, 5)], "OPEN");
    let mut failed = one.clone();
    failed.terminal = Terminal::StepLimit;
    let samples = vec![
        sample(224, ProbeCategory::NeedsZoom, Some(two)),
        sample(224, ProbeCategory::NeedsZoom, Some(one.clone())),
        sample(224, ProbeCategory::Discarded, None),
        sample(1024, ProbeCategory::NeedsZoom, Some(failed)),
        sample(1024, ProbeCategory::DirectAnswerable, None),
        sample(2560, ProbeCategory::DirectAnswerable, None),
    ];
    let c = build_sft_corpus(&samples, &identity_rewriter).unwrap();
    assert_eq!((c.stats.total, c.stats.direct, c.stats.zoom, c.stats.dropped), (4, 2, 2, 2));
    assert!((c.stats.zoom_fraction - 0.5).abs() < 1e-12);
    assert_eq!(c.stats.turn_histogram.iter().map(|(k, v)| (*k, *v)).collect::<Vec<_>>(), vec![(1, 2), (2, 1), (3, 1)]);
    assert_eq!(c.stats.per_resolution[&224].zoom, 2);
    assert_eq!(c.stats.per_resolution[&1024].direct, 1);
    assert_eq!(c.to_jsonl().lines().count(), 4);
    for r in &c.records {
        let segs = parse_output(&r.response, Mode::Strict).unwrap();
        assert_eq!(classify_format(&segs).shape == Shape::Direct, r.category == "direct");
    }

    assert!(matches!(build_sft_corpus(&samples[2..3], &identity_rewriter), Err(ForgeError::EmptyCorpus)));
    let mut bad = samples[4].clone();
    bad.gold = " ".into();
    assert!(matches!(build_sft_corpus(&[bad], &identity_rewriter), Err(ForgeError::InvalidSample(0, _))));
}

#[test]
fn synth_pipeline_needs_less_zoom_at_higher_resolution() {
    let cfg = SynthForgeConfig { sources: 60, ..SynthForgeConfig::default() };
    let a = forge_synth_corpus(&cfg, Execution::Parallel).unwrap();
    let b = forge_synth_corpus(&cfg, Execution::Sequential).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    assert_eq!(a.stats.dropped, 0);
    let fractions: Vec<f64> = a.stats.per_resolution.values().map(|c| c.zoom_fraction()).collect();
    assert_eq!(fractions.len(), 7);
    assert!(fractions.windows(2).all(|w| w[1] <= w[0]), "{fractions:?}");
    assert_eq!(fractions[0], 1.0);
    assert_eq!(*fractions.last().unwrap(), 0.0);
}

#[test]
fn synth_oracle_reads_the_probed_level() {
    let cfg = SynthEnvConfig::default();
    let task = make_task(3, 2560, &cfg).unwrap();
    let src = ImageRef::detached(task.id(), 2560, 2560).unwrap();
    let oracle = SynthOracle { config: cfg.clone() };
    for level in LEVELS {
        let img = resize_to_level(&src, level).unwrap();
        let a = oracle.ask(&img, task.query(), 0).unwrap();
        assert_eq!(a.answerable, cfg.legibility.legible(level, 0, task.target_size), "level {level}");
    }
}
