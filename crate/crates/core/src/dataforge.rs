//! Training-data construction: answerability probing across resolutions,
//! a verifier-guided visual search agent, and SFT corpus assembly.
//!
//! Oracles and tools are traits so live model adapters and deterministic
//! mocks plug in the same way. The synthetic environment provides both.

use std::collections::BTreeMap;

use image::imageops::{resize, FilterType};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agar::AnswerMatcher;
use crate::exec::Execution;
use crate::focus::{count_visual_tokens, crop_zoom_with, EngineConfig, FocusError};
use crate::protocol::{serialize_segments, ProtocolError, Segment};
use crate::synthenv::agent::{next_zoom_region, state_after_zooms};
use crate::synthenv::{SynthEnvConfig, SynthTask};
use crate::trajectory::{FrameTransform, ImageRef, Region, StepRecord, Terminal, Trajectory, TrajectoryError};
use crate::Mode;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ForgeError {
    #[error("repeats must be >= 1")]
    NoRepeats,
    #[error("no resolution levels given")]
    NoLevels,
    #[error("no oracles given")]
    NoOracles,
    #[error("max_steps must be >= 1")]
    NoSteps,
    #[error("trajectory did not end in an answer")]
    NotAnswered,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("sample {0}: {1}")]
    InvalidSample(usize, String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Image(#[from] TrajectoryError),
}

/// What an oracle says about an image and question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAnswer {
    pub answerable: bool,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl OracleAnswer {
    pub fn answerable(answer: impl Into<String>) -> Self {
        Self {
            answerable: true,
            answer: answer.into(),
            confidence: None,
        }
    }

    pub fn unanswerable() -> Self {
        Self {
            answerable: false,
            answer: String::new(),
            confidence: None,
        }
    }
}

/// A model asked whether it can answer directly. `repeat` is the 0-based
/// repetition index, so stochastic adapters can derive per-call seeds.
pub trait AnswerOracle: Send + Sync {
    fn ask(&self, image: &ImageRef, query: &str, repeat: usize) -> Result<OracleAnswer, String>;
}

// ---------------------------------------------------------------------------
// Probing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeCategory {
    DirectAnswerable,
    NeedsZoom,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelProbe {
    pub level: u32,
    pub category: ProbeCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub levels: Vec<LevelProbe>,
    pub repeats: usize,
}

impl ProbeResult {
    pub fn category_at(&self, level: u32) -> Option<ProbeCategory> {
        self.levels.iter().find(|p| p.level == level).map(|p| p.category)
    }
}

pub const DEFAULT_REPEATS: usize = 5;

/// Resize so the longer side equals `level`. Detached images only change
/// their recorded dimensions. The id gains an `@<level>` suffix.
pub fn resize_to_level(image: &ImageRef, level: u32) -> Result<ImageRef, ForgeError> {
    let (w, h) = (image.width() as u64, image.height() as u64);
    let long = w.max(h);
    let scale = |d: u64| ((d * level as u64 + long / 2) / long).max(1) as u32;
    let (nw, nh) = (scale(w), scale(h));
    let id = format!("{}@{level}", image.id());
    Ok(match image.raster()? {
        Some(src) => ImageRef::from_raster(id, resize(&*src, nw, nh, FilterType::Triangle))?,
        None => ImageRef::detached(id, nw, nh)?,
    })
}

/// Ask every oracle `repeats` times at each level. A vote is "answerable
/// and correct". All votes true gives `DirectAnswerable`, all false gives
/// `NeedsZoom`, anything mixed (or any oracle failure) gives `Discarded`.
/// Several oracles must agree with each other as well as with themselves.
#[allow(clippy::too_many_arguments)]
pub fn probe_answerability(
    oracles: &[&dyn AnswerOracle],
    image: &ImageRef,
    query: &str,
    gold: &str,
    levels: &[u32],
    repeats: usize,
    matcher: &dyn AnswerMatcher,
    exec: Execution,
) -> Result<ProbeResult, ForgeError> {
    if repeats == 0 {
        return Err(ForgeError::NoRepeats);
    }
    if levels.is_empty() {
        return Err(ForgeError::NoLevels);
    }
    if oracles.is_empty() {
        return Err(ForgeError::NoOracles);
    }
    let probes = exec.map(levels, |_, &level| {
        let discard = |reason: String| LevelProbe {
            level,
            category: ProbeCategory::Discarded,
            reason: Some(reason),
        };
        let resized = match resize_to_level(image, level) {
            Ok(img) => img,
            Err(e) => return discard(e.to_string()),
        };
        let mut votes = Vec::with_capacity(oracles.len() * repeats);
        for oracle in oracles {
            for r in 0..repeats {
                match oracle.ask(&resized, query, r) {
                    Ok(a) => votes.push(a.answerable && !a.answer.is_empty() && matcher.matches(&a.answer, gold)),
                    Err(e) => return discard(format!("oracle failure: {e}")),
                }
            }
        }
        let category = if votes.iter().all(|&v| v) {
            ProbeCategory::DirectAnswerable
        } else if votes.iter().all(|&v| !v) {
            ProbeCategory::NeedsZoom
        } else {
            return discard("inconsistent judgments".into());
        };
        LevelProbe {
            level,
            category,
            reason: None,
        }
    });
    Ok(ProbeResult {
        levels: probes,
        repeats,
    })
}

// ---------------------------------------------------------------------------
// Search agent
// ---------------------------------------------------------------------------

/// What the tools may look at: the current view, plus the root image and
/// the frame chain leading to the view.
#[derive(Debug, Clone, Copy)]
pub struct SearchView<'a> {
    pub image: &'a ImageRef,
    pub root: &'a ImageRef,
    pub chain: &'a [FrameTransform],
    /// The zoom regions behind `chain`, each in its parent view's pixels.
    pub regions: &'a [Region],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accept,
    Reject { feedback: String },
}

/// The four tools of the search agent. Only `verify` ever sees the gold
/// answer; regions are in the pixels of `view.image`.
pub trait AgentToolset: Send + Sync {
    fn locate(&self, view: &SearchView<'_>, description: &str, hint: Option<Region>) -> Result<Region, String>;
    fn understand(&self, view: &SearchView<'_>, query: &str) -> Result<OracleAnswer, String>;
    fn adjust_bbox(&self, region: Region, view: &SearchView<'_>, instruction: &str) -> Result<Region, String>;
    fn verify(&self, candidate: &str, gold: &str) -> Result<Verdict, String>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum SearchFailure {
    /// `max_steps` rounds ended without an accepted answer.
    StepLimit { rounds: usize, trajectory: Trajectory },
    /// A tool failed twice in a row, or returned an invalid region.
    ToolError { tool: String, message: String, trajectory: Trajectory },
}

impl SearchFailure {
    pub fn trajectory(&self) -> &Trajectory {
        match self {
            SearchFailure::StepLimit { trajectory, .. } | SearchFailure::ToolError { trajectory, .. } => trajectory,
        }
    }
}

fn retry_once<T>(mut f: impl FnMut() -> Result<T, String>) -> Result<T, String> {
    f().or_else(|_| f())
}

/// Locate, zoom, read and verify until the verifier accepts or `max_steps`
/// rounds are used. Round 1 calls `locate` on the root image; after a
/// rejection the next round calls `adjust_bbox` with the verifier's feedback
/// and refines inside the current view. Each round appends a think, a tool
/// call and an observation; the accepted round adds the answer.
#[allow(clippy::too_many_arguments)]
pub fn agent_search(
    tools: &dyn AgentToolset,
    image: &ImageRef,
    query: &str,
    gold: &str,
    max_steps: usize,
    mode: Mode,
    engine: &EngineConfig,
) -> Result<Result<Trajectory, SearchFailure>, ForgeError> {
    if max_steps == 0 {
        return Err(ForgeError::NoSteps);
    }
    let mut traj = Trajectory::new(image.clone(), query);
    let mut view = image.materialized()?;
    let mut chain: Vec<FrameTransform> = Vec::new();
    let mut regions: Vec<Region> = Vec::new();
    let mut last: Option<(Region, String)> = None;

    let tool_error = |tool: &str, message: String, mut trajectory: Trajectory| {
        trajectory.terminal = Terminal::Error {
            reason: format!("ToolError: {tool}: {message}"),
        };
        Ok(Err(SearchFailure::ToolError {
            tool: tool.into(),
            message,
            trajectory,
        }))
    };

    for round in 1..=max_steps {
        let sv = SearchView {
            image: &view,
            root: image,
            chain: &chain,
            regions: &regions,
        };
        let (tool, think, request) = match &last {
            None => (
                "locate",
                format!("Looking for the region relevant to: {query}"),
                retry_once(|| tools.locate(&sv, query, None)),
            ),
            Some((prev, feedback)) => (
                "adjust_bbox",
                format!("Refining the region: {feedback}"),
                retry_once(|| tools.adjust_bbox(*prev, &sv, feedback)),
            ),
        };
        let region = match request {
            Ok(r) => r,
            Err(e) => return tool_error(tool, e, traj),
        };
        let zoomed = match crop_zoom_with(&view, region, mode, engine.zoom_factor, engine.upsample) {
            Ok(z) => z,
            Err(e @ FocusError::InvalidRegion { .. }) => return tool_error(tool, e.to_string(), traj),
            Err(e) => return Err(ForgeError::InvalidSample(round, e.to_string())),
        };
        let tokens = count_visual_tokens(zoomed.image.width(), zoomed.image.height(), engine.patch_size)
            .map_err(|e| ForgeError::InvalidSample(round, e.to_string()))?;
        traj.steps.push(StepRecord::think(think));
        traj.steps.push(StepRecord::ToolCall {
            region: zoomed.region,
            clamped: zoomed.clamped,
        });
        traj.steps.push(StepRecord::Observation {
            image: zoomed.image.clone(),
            added_visual_tokens: tokens,
        });
        chain.push(FrameTransform::zoom(zoomed.region, engine.zoom_factor));
        regions.push(zoomed.region);
        view = zoomed.image;
        // region of the new view, expressed in its own frame, for adjust
        let whole = Region::new(0, 0, view.width() as i64, view.height() as i64);

        let sv = SearchView {
            image: &view,
            root: image,
            chain: &chain,
            regions: &regions,
        };
        let answer = match retry_once(|| tools.understand(&sv, query)) {
            Ok(a) => a,
            Err(e) => return tool_error("understand", e, traj),
        };
        if !answer.answerable || answer.answer.is_empty() {
            last = Some((whole, "the target cannot be read in this view; zoom closer".into()));
            continue;
        }
        match retry_once(|| tools.verify(&answer.answer, gold)) {
            Ok(Verdict::Accept) => {
                traj.steps.push(StepRecord::think("The zoomed view answers the question."));
                traj.steps.push(StepRecord::answer(answer.answer.clone()));
                traj.terminal = Terminal::Answered { answer: answer.answer };
                return Ok(Ok(traj));
            }
            Ok(Verdict::Reject { feedback }) => last = Some((whole, feedback)),
            Err(e) => return tool_error("verify", e, traj),
        }
    }
    traj.terminal = Terminal::StepLimit;
    Ok(Err(SearchFailure::StepLimit {
        rounds: max_steps,
        trajectory: traj,
    }))
}

// ---------------------------------------------------------------------------
// Summaries and corpus
// ---------------------------------------------------------------------------

/// Render an answered trajectory as a protocol-grammar response. Think text
/// passes through `rewriter`; a think is inserted before any tool call that
/// lacks one.
pub fn summarize_trajectory(traj: &Trajectory, rewriter: &dyn Fn(&str) -> String) -> Result<String, ForgeError> {
    let Terminal::Answered { answer } = &traj.terminal else {
        return Err(ForgeError::NotAnswered);
    };
    let mut segments = Vec::new();
    for step in &traj.steps {
        match step {
            StepRecord::Think { text } => {
                let t = rewriter(text).trim().to_string();
                if !t.is_empty() {
                    segments.push(Segment::Think(t));
                }
            }
            StepRecord::ToolCall { region, .. } => {
                if !matches!(segments.last(), Some(Segment::Think(_)) | Some(Segment::ToolCall(_))) {
                    segments.push(Segment::Think("I need a closer look at this region.".into()));
                }
                segments.push(Segment::zoom(*region));
            }
            StepRecord::Observation { .. } | StepRecord::Answer { .. } => {}
        }
    }
    segments.push(Segment::Answer(answer.trim().to_string()));
    Ok(serialize_segments(&segments)?)
}

pub fn identity_rewriter(s: &str) -> String {
    s.to_string()
}

/// One probed sample at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgeSample {
    pub image: ImageRef,
    pub query: String,
    pub gold: String,
    pub resolution: u32,
    pub category: ProbeCategory,
    /// Search result for `NeedsZoom` samples.
    pub search: Option<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub image: ImageRef,
    pub query: String,
    pub response: String,
    pub category: String,
    pub resolution: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResolutionCounts {
    pub direct: usize,
    pub zoom: usize,
}

impl ResolutionCounts {
    pub fn zoom_fraction(&self) -> f64 {
        let n = self.direct + self.zoom;
        if n == 0 {
            0.0
        } else {
            self.zoom as f64 / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub direct: usize,
    pub zoom: usize,
    pub zoom_fraction: f64,
    pub per_resolution: BTreeMap<u32, ResolutionCounts>,
    /// Reasoning turns (tool calls + 1) to count.
    pub turn_histogram: BTreeMap<usize, usize>,
    /// Samples skipped: discarded probes and failed searches.
    pub dropped: usize,
}

impl CorpusStats {
    pub fn to_json(&self) -> serde_json::Value {
        let per: serde_json::Map<String, serde_json::Value> = self
            .per_resolution
            .iter()
            .map(|(l, c)| {
                (
                    l.to_string(),
                    json!({"direct": c.direct, "zoom": c.zoom, "zoom_fraction": c.zoom_fraction()}),
                )
            })
            .collect();
        let hist: serde_json::Map<String, serde_json::Value> = self
            .turn_histogram
            .iter()
            .map(|(t, n)| (t.to_string(), json!(n)))
            .collect();
        json!({
            "total": self.total,
            "direct": self.direct,
            "zoom": self.zoom,
            "zoom_fraction": self.zoom_fraction,
            "per_resolution": per,
            "turn_histogram": hist,
            "dropped": self.dropped,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftCorpus {
    pub records: Vec<SftRecord>,
    pub stats: CorpusStats,
}

impl SftCorpus {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }
}

/// Turn probed samples into SFT records. Direct samples get a direct-shape
/// response with the gold answer; zoom samples need an answered search
/// trajectory and are dropped otherwise.
pub fn build_sft_corpus(samples: &[ForgeSample], rewriter: &dyn Fn(&str) -> String) -> Result<SftCorpus, ForgeError> {
    let mut records = Vec::new();
    let mut per_resolution: BTreeMap<u32, ResolutionCounts> = BTreeMap::new();
    let mut turn_histogram = BTreeMap::new();
    let mut dropped = 0;
    for (i, s) in samples.iter().enumerate() {
        if s.query.trim().is_empty() || s.gold.trim().is_empty() {
            return Err(ForgeError::InvalidSample(i, "empty query or gold answer".into()));
        }
        let (category, response, turns) = match s.category {
            ProbeCategory::Discarded => {
                dropped += 1;
                continue;
            }
            ProbeCategory::DirectAnswerable => {
                let segments = [
                    Segment::Think(rewriter("The answer is visible without zooming.").trim().to_string()),
                    Segment::Answer(s.gold.trim().to_string()),
                ];
                ("direct", serialize_segments(&segments)?, 1)
            }
            ProbeCategory::NeedsZoom => match &s.search {
                Some(t) if matches!(t.terminal, Terminal::Answered { .. }) => {
                    ("zoom", summarize_trajectory(t, rewriter)?, t.zoom_calls() + 1)
                }
                _ => {
                    dropped += 1;
                    continue;
                }
            },
        };
        let counts = per_resolution.entry(s.resolution).or_default();
        if category == "zoom" {
            counts.zoom += 1;
        } else {
            counts.direct += 1;
        }
        *turn_histogram.entry(turns).or_insert(0) += 1;
        records.push(SftRecord {
            image: s.image.clone(),
            query: s.query.clone(),
            response,
            category: category.into(),
            resolution: s.resolution,
        });
    }
    if records.is_empty() {
        return Err(ForgeError::EmptyCorpus);
    }
    let zoom = records.iter().filter(|r| r.category == "zoom").count();
    let total = records.len();
    Ok(SftCorpus {
        stats: CorpusStats {
            total,
            direct: total - zoom,
            zoom,
            zoom_fraction: zoom as f64 / total as f64,
            per_resolution,
            turn_histogram,
            dropped,
        },
        records,
    })
}

// ---------------------------------------------------------------------------
// Synthetic adapters
// ---------------------------------------------------------------------------

fn synth_task_of(id: &str, cfg: &SynthEnvConfig) -> Result<SynthTask, String> {
    let base = id.split(['@', '/']).next().unwrap_or(id);
    SynthTask::from_id(base, cfg).map_err(|e| e.to_string())
}

/// Answers when the marker is legible at the probed image's resolution.
#[derive(Debug, Clone, Default)]
pub struct SynthOracle {
    pub config: SynthEnvConfig,
}

impl AnswerOracle for SynthOracle {
    fn ask(&self, image: &ImageRef, _query: &str, _repeat: usize) -> Result<OracleAnswer, String> {
        let task = synth_task_of(image.id(), &self.config)?;
        let level = image.width().max(image.height());
        Ok(if self.config.legibility.legible(level, 0, task.target_size) {
            OracleAnswer::answerable(task.gold_answer)
        } else {
            OracleAnswer::unanswerable()
        })
    }
}

/// Tools with perfect localisation that read the marker once it is legible.
#[derive(Debug, Clone)]
pub struct SynthToolset {
    pub config: SynthEnvConfig,
    pub zoom_factor: u32,
    pub matcher: crate::agar::DefaultMatcher,
}

impl Default for SynthToolset {
    fn default() -> Self {
        Self {
            config: SynthEnvConfig::default(),
            zoom_factor: 2,
            matcher: crate::agar::DefaultMatcher,
        }
    }
}

impl SynthToolset {
    fn target_box(&self, view: &SearchView<'_>) -> Result<Region, String> {
        let task = synth_task_of(view.root.id(), &self.config)?;
        Ok(next_zoom_region(
            &task,
            &self.config,
            view.chain,
            (view.image.width(), view.image.height()),
        ))
    }
}

impl AgentToolset for SynthToolset {
    fn locate(&self, view: &SearchView<'_>, _description: &str, _hint: Option<Region>) -> Result<Region, String> {
        self.target_box(view)
    }

    fn understand(&self, view: &SearchView<'_>, _query: &str) -> Result<OracleAnswer, String> {
        let task = synth_task_of(view.root.id(), &self.config)?;
        let depth = state_after_zooms(&task, &self.config, view.regions, self.zoom_factor).depth;
        Ok(if task.legible_at(depth, &self.config) {
            OracleAnswer::answerable(task.gold_answer)
        } else {
            OracleAnswer::unanswerable()
        })
    }

    fn adjust_bbox(&self, _region: Region, view: &SearchView<'_>, _instruction: &str) -> Result<Region, String> {
        self.target_box(view)
    }

    fn verify(&self, candidate: &str, gold: &str) -> Result<Verdict, String> {
        Ok(if self.matcher.matches(candidate, gold) {
            Verdict::Accept
        } else {
            Verdict::Reject {
                feedback: "the answer does not match; look closer at the marker".into(),
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Synthetic pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthForgeConfig {
    /// Number of source tasks.
    pub sources: usize,
    pub levels: Vec<u32>,
    pub repeats: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub env: SynthEnvConfig,
}

impl Default for SynthForgeConfig {
    fn default() -> Self {
        Self {
            sources: 50,
            levels: crate::synthenv::RESOLUTION_LEVELS.to_vec(),
            repeats: DEFAULT_REPEATS,
            max_steps: 6,
            seed: 0,
            env: SynthEnvConfig::default(),
        }
    }
}

/// Probe synthetic sources at every level, run the search agent where
/// zooming is needed, and build the corpus.
pub fn forge_synth_corpus(cfg: &SynthForgeConfig, exec: Execution) -> Result<SftCorpus, ForgeError> {
    let top = *cfg.levels.iter().max().ok_or(ForgeError::NoLevels)?;
    let oracle = SynthOracle { config: cfg.env.clone() };
    let tools = SynthToolset {
        config: cfg.env.clone(),
        ..SynthToolset::default()
    };
    let matcher = crate::agar::DefaultMatcher;
    let engine = EngineConfig::default();
    let per_source = exec.map_range(cfg.sources, |k| -> Result<Vec<ForgeSample>, ForgeError> {
        let task = crate::synthenv::make_task(crate::derive_seed(cfg.seed, &[k as u64]), top, &cfg.env)
            .map_err(|e| ForgeError::InvalidSample(k, e.to_string()))?;
        let source = ImageRef::detached(task.id(), top, top)?;
        let probe = probe_answerability(
            &[&oracle],
            &source,
            task.query(),
            &task.gold_answer,
            &cfg.levels,
            cfg.repeats,
            &matcher,
            Execution::Sequential,
        )?;
        let mut samples = Vec::with_capacity(probe.levels.len());
        for p in &probe.levels {
            let image = resize_to_level(&source, p.level)?;
            let search = match p.category {
                ProbeCategory::NeedsZoom => {
                    agent_search(&tools, &image, task.query(), &task.gold_answer, cfg.max_steps, Mode::Strict, &engine)?
                        .ok()
                }
                _ => None,
            };
            samples.push(ForgeSample {
                image,
                query: task.query().to_string(),
                gold: task.gold_answer.clone(),
                resolution: p.level,
                category: p.category,
                search,
            });
        }
        Ok(samples)
    });
    let samples: Vec<ForgeSample> = per_source
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    build_sft_corpus(&samples, &identity_rewriter)
}
