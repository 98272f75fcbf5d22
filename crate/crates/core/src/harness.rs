//! Batch evaluation over manifests, efficiency metrics and resolution
//! sweeps.
//!
//! Episodes run concurrently; everything is reduced in entry-id order so
//! reports and trajectory files are byte-stable for a given seed.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agar::AnswerMatcher;
use crate::exec::Execution;
use crate::focus::{EngineConfig, EpisodeLimits, FocusEngine};
use crate::policy::Policy;
use crate::synthenv::{make_task, render_task, SynthEnvConfig};
use crate::trajectory::{ImageRef, Terminal, Trajectory};
use crate::{derive_seed, seed_for_key, Mode};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HarnessError {
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("duplicate manifest id `{0}`")]
    DuplicateId(String),
    #[error("MITE is undefined when token counts are equal")]
    Undefined,
    #[error("a sweep needs at least 2 levels, got {0}")]
    TooFewLevels(usize),
    #[error("eval record {line}: {message}")]
    Record { line: usize, message: String },
    #[error("io: {0}")]
    Io(String),
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: ImageRef,
    pub query: String,
    pub gold: String,
    pub resolution: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    id: String,
    image: Value,
    query: String,
    gold: String,
    resolution: u32,
}

fn image_of(v: Value, base: Option<&Path>) -> Result<ImageRef, String> {
    let resolve = |p: &str| -> PathBuf {
        let p = PathBuf::from(p);
        match base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p,
        }
    };
    match v {
        Value::String(p) => ImageRef::open(p.clone(), resolve(&p)).map_err(|e| e.to_string()),
        Value::Object(mut m) => {
            if let Some(Value::String(p)) = m.get("path").cloned() {
                m.insert("path".into(), Value::String(resolve(&p).to_string_lossy().into_owned()));
            }
            serde_json::from_value(Value::Object(m)).map_err(|e| e.to_string())
        }
        _ => Err("`image` must be a path or an object".into()),
    }
}

/// Parse manifest JSONL. `image` is a path (resolved against `base`) or an
/// object `{"id", "width", "height", "path"?}`; without a path the image is
/// dimension-only.
pub fn read_manifest(text: &str, base: Option<&Path>) -> Result<Vec<ManifestEntry>, HarnessError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| HarnessError::Manifest { line: i + 1, message };
        let raw: RawEntry = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if raw.resolution == 0 {
            return Err(err("resolution must be positive".into()));
        }
        if !seen.insert(raw.id.clone()) {
            return Err(HarnessError::DuplicateId(raw.id));
        }
        out.push(ManifestEntry {
            image: image_of(raw.image, base).map_err(err)?,
            id: raw.id,
            query: raw.query,
            gold: raw.gold,
            resolution: raw.resolution,
        });
    }
    Ok(out)
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("entries serialize") + "\n")
        .collect()
}

/// Manifest of synthetic tasks, `per_level` per level. Images are rendered
/// to `render_dir` as PNG when given, otherwise dimension-only.
pub fn synth_manifest(
    cfg: &SynthEnvConfig,
    levels: &[u32],
    per_level: usize,
    seed: u64,
    render_dir: Option<&Path>,
) -> Result<Vec<ManifestEntry>, HarnessError> {
    let mut out = Vec::with_capacity(levels.len() * per_level);
    for &level in levels {
        for k in 0..per_level {
            let task_seed = derive_seed(seed, &[k as u64]);
            let task = make_task(task_seed, level, cfg).map_err(|e| HarnessError::Manifest {
                line: 0,
                message: e.to_string(),
            })?;
            let id = task.id();
            let image = match render_dir {
                Some(dir) => {
                    let img = render_task(&task, cfg);
                    let path = dir.join(format!("{id}.png"));
                    let raster = img.raster().ok().flatten().expect("rendered images carry pixels");
                    raster.save(&path).map_err(|e| HarnessError::Io(e.to_string()))?;
                    ImageRef::from_path_with_dims(id.clone(), path, level, level)
                        .map_err(|e| HarnessError::Io(e.to_string()))?
                }
                None => ImageRef::detached(id.clone(), level, level).expect("levels are positive"),
            };
            out.push(ManifestEntry {
                id,
                image,
                query: task.query().to_string(),
                gold: task.gold_answer.clone(),
                resolution: level,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// One line of the evaluation JSONL.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalRecord {
    Scored {
        id: String,
        resolution: u32,
        gold: String,
        correct: bool,
        base_visual_tokens: u64,
        trajectory: Trajectory,
    },
    Errored {
        id: String,
        resolution: u32,
        error: String,
    },
}

impl EvalRecord {
    pub fn id(&self) -> &str {
        match self {
            EvalRecord::Scored { id, .. } | EvalRecord::Errored { id, .. } => id,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            EvalRecord::Scored {
                id,
                resolution,
                gold,
                correct,
                base_visual_tokens,
                trajectory,
            } => json!({
                "id": id,
                "resolution": resolution,
                "gold": gold,
                "correct": correct,
                "base_visual_tokens": base_visual_tokens,
                "trajectory": serde_json::to_value(trajectory).expect("trajectories serialize"),
            }),
            EvalRecord::Errored { id, resolution, error } => json!({
                "id": id,
                "resolution": resolution,
                "error": error,
            }),
        }
    }

    pub fn from_json(v: &Value) -> Result<Self, String> {
        let o = v.as_object().ok_or("record must be an object")?;
        let id = o.get("id").and_then(Value::as_str).ok_or("missing `id`")?.to_string();
        let resolution = o
            .get("resolution")
            .and_then(Value::as_u64)
            .ok_or("missing `resolution`")? as u32;
        if let Some(e) = o.get("error") {
            return Ok(EvalRecord::Errored {
                id,
                resolution,
                error: e.as_str().ok_or("`error` must be a string")?.to_string(),
            });
        }
        Ok(EvalRecord::Scored {
            id,
            resolution,
            gold: o.get("gold").and_then(Value::as_str).ok_or("missing `gold`")?.to_string(),
            correct: o.get("correct").and_then(Value::as_bool).ok_or("missing `correct`")?,
            base_visual_tokens: o
                .get("base_visual_tokens")
                .and_then(Value::as_u64)
                .ok_or("missing `base_visual_tokens`")?,
            trajectory: crate::trajectory::trajectory_from_value(
                o.get("trajectory").cloned().ok_or("missing `trajectory`")?,
                Mode::Strict,
            )?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub n: usize,
    pub errors: usize,
    pub correct: usize,
    /// Fraction of scored entries answered correctly.
    pub accuracy: f64,
    /// `accuracy` in percentage points.
    pub accuracy_pct: f64,
    pub mean_zoom_calls: f64,
    pub mean_added_visual_tokens: f64,
    pub mean_total_visual_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: Breakdown,
    pub per_resolution: BTreeMap<u32, Breakdown>,
}

struct Acc {
    n: usize,
    errors: usize,
    correct: usize,
    zooms: u64,
    added: u64,
    total: u64,
}

impl Acc {
    fn new() -> Self {
        Acc { n: 0, errors: 0, correct: 0, zooms: 0, added: 0, total: 0 }
    }

    fn push(&mut self, r: &EvalRecord) {
        self.n += 1;
        match r {
            EvalRecord::Errored { .. } => self.errors += 1,
            EvalRecord::Scored {
                correct,
                base_visual_tokens,
                trajectory,
                ..
            } => {
                let added = added_tokens(trajectory);
                self.correct += *correct as usize;
                self.zooms += trajectory.zoom_calls() as u64;
                self.added += added;
                self.total += base_visual_tokens + added;
            }
        }
    }

    fn finish(&self) -> Breakdown {
        let scored = self.n - self.errors;
        // integer sums divided once: exact to recompute
        let mean = |x: u64| if scored == 0 { 0.0 } else { x as f64 / scored as f64 };
        let accuracy = mean(self.correct as u64);
        Breakdown {
            n: self.n,
            errors: self.errors,
            correct: self.correct,
            accuracy,
            accuracy_pct: if scored == 0 { 0.0 } else { self.correct as f64 * 100.0 / scored as f64 },
            mean_zoom_calls: mean(self.zooms),
            mean_added_visual_tokens: mean(self.added),
            mean_total_visual_tokens: mean(self.total),
        }
    }
}

fn added_tokens(traj: &Trajectory) -> u64 {
    traj.steps
        .iter()
        .map(|s| match s {
            crate::trajectory::StepRecord::Observation { added_visual_tokens, .. } => *added_visual_tokens,
            _ => 0,
        })
        .sum()
}

/// Aggregate records. Means are over scored entries; errored entries count
/// in `n` and `errors` only.
pub fn report_from_records(records: &[EvalRecord]) -> EvalReport {
    let mut overall = Acc::new();
    let mut per: BTreeMap<u32, Acc> = BTreeMap::new();
    for r in records {
        overall.push(r);
        let res = match r {
            EvalRecord::Scored { resolution, .. } | EvalRecord::Errored { resolution, .. } => *resolution,
        };
        per.entry(res).or_insert_with(Acc::new).push(r);
    }
    EvalReport {
        overall: overall.finish(),
        per_resolution: per.into_iter().map(|(k, a)| (k, a.finish())).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub report: EvalReport,
    /// Sorted by entry id.
    pub records: Vec<EvalRecord>,
}

impl EvalRun {
    pub fn records_jsonl(&self) -> String {
        records_to_jsonl(&self.records)
    }

    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(&self.report).expect("reports serialize") + "\n"
    }
}

pub fn records_to_jsonl(records: &[EvalRecord]) -> String {
    records.iter().map(|r| r.to_json().to_string() + "\n").collect()
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<EvalRecord>, HarnessError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let err = |message: String| HarnessError::Record { line: i + 1, message };
            let v: Value = serde_json::from_str(l).map_err(|e| err(e.to_string()))?;
            EvalRecord::from_json(&v).map_err(err)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub engine: EngineConfig,
    pub limits: EpisodeLimits,
    pub mode: Mode,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            limits: EpisodeLimits::default(),
            mode: Mode::Strict,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

/// Run one episode per entry and score it. Each episode's seed is derived
/// from the run seed and the entry id, so results do not depend on order
/// or on concurrency.
pub fn run_manifest(
    policy: &dyn Policy,
    manifest: &[ManifestEntry],
    opts: &EvalOptions,
    matcher: &dyn AnswerMatcher,
) -> Result<EvalRun, HarnessError> {
    if manifest.is_empty() {
        return Err(HarnessError::EmptyManifest);
    }
    let mut seen = HashSet::new();
    for e in manifest {
        if !seen.insert(e.id.as_str()) {
            return Err(HarnessError::DuplicateId(e.id.clone()));
        }
    }
    let engine = FocusEngine::new(opts.engine);
    let exec = if policy.concurrent_turns() {
        opts.execution
    } else {
        Execution::Sequential
    };
    let mut records = exec.map(manifest, |_, e| {
        let seed = seed_for_key(opts.seed, &e.id);
        match engine.run(policy, &e.query, &e.image, opts.limits, opts.mode, seed) {
            Ok(trajectory) => EvalRecord::Scored {
                id: e.id.clone(),
                resolution: e.resolution,
                gold: e.gold.clone(),
                correct: matches!(&trajectory.terminal, Terminal::Answered { answer } if matcher.matches(answer, &e.gold)),
                base_visual_tokens: engine.base_tokens(&e.image),
                trajectory,
            },
            Err(err) => EvalRecord::Errored {
                id: e.id.clone(),
                resolution: e.resolution,
                error: err.to_string(),
            },
        }
    });
    records.sort_by(|a, b| a.id().cmp(b.id()));
    Ok(EvalRun {
        report: report_from_records(&records),
        records,
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Accuracy gained per 100 extra visual tokens; accuracy in percentage
/// points, each side given as `(accuracy_pct, mean_total_tokens)`.
pub fn compute_mite(baseline: (f64, f64), candidate: (f64, f64)) -> Result<f64, HarnessError> {
    let d_tokens = candidate.1 - baseline.1;
    if d_tokens == 0.0 {
        return Err(HarnessError::Undefined);
    }
    Ok((candidate.0 - baseline.0) / d_tokens * 100.0)
}

pub fn mite_between(baseline: &Breakdown, candidate: &Breakdown) -> Result<f64, HarnessError> {
    compute_mite(
        (baseline.accuracy_pct, baseline.mean_total_visual_tokens),
        (candidate.accuracy_pct, candidate.mean_total_visual_tokens),
    )
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman needs paired samples");
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub level: u32,
    pub accuracy_pct: f64,
    pub mean_total_visual_tokens: f64,
    pub mean_zoom_calls: f64,
    /// Against the baseline report for this level, when one is given and
    /// defined.
    pub mite: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Rank correlation between level and mean zoom calls.
    pub zoom_rank_correlation: f64,
}

/// Evaluate one manifest per level and tabulate.
pub fn resolution_sweep(
    policy: &dyn Policy,
    manifests: &BTreeMap<u32, Vec<ManifestEntry>>,
    baseline: Option<&BTreeMap<u32, Breakdown>>,
    opts: &EvalOptions,
    matcher: &dyn AnswerMatcher,
) -> Result<SweepTable, HarnessError> {
    if manifests.len() < 2 {
        return Err(HarnessError::TooFewLevels(manifests.len()));
    }
    let mut rows = Vec::with_capacity(manifests.len());
    for (&level, entries) in manifests {
        let run = run_manifest(policy, entries, opts, matcher)?;
        let b = &run.report.overall;
        rows.push(SweepRow {
            level,
            accuracy_pct: b.accuracy_pct,
            mean_total_visual_tokens: b.mean_total_visual_tokens,
            mean_zoom_calls: b.mean_zoom_calls,
            mite: baseline
                .and_then(|m| m.get(&level))
                .and_then(|base| mite_between(base, b).ok()),
        });
    }
    let levels: Vec<f64> = rows.iter().map(|r| r.level as f64).collect();
    let zooms: Vec<f64> = rows.iter().map(|r| r.mean_zoom_calls).collect();
    Ok(SweepTable {
        zoom_rank_correlation: spearman(&levels, &zooms),
        rows,
    })
}
