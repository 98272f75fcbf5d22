//! `focusloop` command-line tool.
//!
//! Every subcommand exits with status 2 on a structured error. With
//! `--json` the result (or the error) is printed as a single JSON value on
//! stdout.

mod policy_arg;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use focusloop_core::agar::{AgarParams, DefaultMatcher, RewardKind};
use focusloop_core::dataforge::{forge_synth_corpus, SynthForgeConfig};
use focusloop_core::exec::{with_threads, Execution};
use focusloop_core::focus::{EngineConfig, EpisodeLimits};
use focusloop_core::grpo::{
    cold_start_fit, evaluate_policy, expert_demonstrations, log_to_jsonl, train_grpo, TabularPolicy, TrainConfig,
};
use focusloop_core::harness::{
    compute_mite, read_manifest, resolution_sweep, run_manifest, synth_manifest, write_manifest, Breakdown,
    EvalOptions, EvalRun, ManifestEntry,
};
use focusloop_core::synthenv::{SynthEnv, RESOLUTION_LEVELS};
use focusloop_core::trajectory::{to_root_frame, FrameTransform, StepRecord, Terminal, Trajectory};
use focusloop_core::Mode;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use policy_arg::{load_policy, PolicyOptions};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Harness(#[from] focusloop_core::harness::HarnessError),
    #[error(transparent)]
    Train(#[from] focusloop_core::grpo::GrpoError),
    #[error(transparent)]
    Forge(#[from] focusloop_core::dataforge::ForgeError),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Policy(_) => "policy",
            CliError::Harness(_) => "harness",
            CliError::Train(_) => "train",
            CliError::Forge(_) => "forge",
        }
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, contents).map_err(io)
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("values serialize") + "\n"
}

#[derive(Parser)]
#[command(name = "focusloop", version, about = "Adaptive zoom-in reasoning: evaluation, training and data tools")]
struct Cli {
    /// Print results and errors as JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a policy over a manifest and report accuracy and token use.
    Eval(EvalArgs),
    /// Evaluate per resolution level and summarise the zoom trend.
    Sweep(SweepArgs),
    /// Train a tabular policy on the synthetic environment.
    TrainSynth(TrainArgs),
    /// Build an SFT corpus with the probing and search pipeline.
    Forge(ForgeArgs),
    /// Accuracy gain per 100 extra visual tokens between two reports.
    Mite(MiteArgs),
    /// Print trajectories as a readable trace.
    Replay(ReplayArgs),
    /// Write a manifest of synthetic tasks.
    SynthManifest(SynthManifestArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Policy: scripted:<file.json>, synth:<policy.json> or endpoint:<config.toml>.
    #[arg(long)]
    policy: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 1 runs sequentially, 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    parallel: usize,
    /// Reject malformed output and out-of-bounds boxes (default).
    #[arg(long, conflicts_with = "lenient")]
    strict: bool,
    /// Repair what can be repaired and record warnings.
    #[arg(long)]
    lenient: bool,
    #[arg(long, default_value_t = 28)]
    patch_size: u32,
    #[arg(long, default_value_t = 6)]
    max_tool_calls: u32,
    #[arg(long, default_value_t = 16384)]
    max_added_tokens: u64,
    /// Synthetic policies: take the most likely action instead of sampling.
    #[arg(long)]
    greedy: bool,
    /// Endpoint policies: prompt template file with {query} and {history}.
    #[arg(long)]
    template: Option<String>,
}

impl RunArgs {
    fn options(&self) -> Result<EvalOptions, CliError> {
        if self.patch_size == 0 {
            return Err(CliError::Usage("--patch-size must be positive".into()));
        }
        Ok(EvalOptions {
            engine: EngineConfig {
                patch_size: self.patch_size,
                ..EngineConfig::default()
            },
            limits: EpisodeLimits {
                max_tool_calls: self.max_tool_calls,
                max_total_added_tokens: self.max_added_tokens,
            },
            mode: if self.lenient { Mode::Lenient } else { Mode::Strict },
            seed: self.seed,
            execution: Execution::from_threads(self.parallel),
        })
    }

    fn policy(&self) -> Result<Box<dyn focusloop_core::policy::Policy>, CliError> {
        load_policy(
            &self.policy,
            &PolicyOptions {
                greedy: self.greedy,
                template: self.template.clone(),
            },
        )
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for report.json and trajectories.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Manifest covering at least two resolution levels.
    #[arg(long)]
    manifest: PathBuf,
    /// Report whose per-resolution breakdown is the MITE baseline.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardArg {
    Agar,
    Baseline,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, value_enum, default_value = "agar")]
    reward: RewardArg,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    tasks_per_iter: usize,
    #[arg(long, default_value_t = 8)]
    group_size: usize,
    #[arg(long, default_value_t = 0.2)]
    clip_epsilon: f64,
    #[arg(long, default_value_t = 0.0)]
    kl_beta: f64,
    /// Expert tasks for the behaviour-cloning warm start (0 skips it).
    #[arg(long, default_value_t = 200)]
    cold_start_tasks: usize,
    #[arg(long, default_value_t = 20)]
    cold_start_epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    cold_start_lr: f64,
    /// Episodes per level for the final evaluation (0 skips it).
    #[arg(long, default_value_t = 200)]
    eval_episodes: usize,
    #[arg(long, default_value_t = 0)]
    parallel: usize,
    /// Directory for train_log.jsonl, policy.json and evaluation.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ForgeArgs {
    /// TOML or JSON pipeline config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sources: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    parallel: usize,
    /// Directory for corpus.jsonl and stats.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MiteArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    candidate: PathBuf,
    /// Compare the per-resolution entries for this level.
    #[arg(long)]
    level: Option<u32>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Evaluation records or bare trajectories, one per line.
    #[arg(long)]
    trajectories: PathBuf,
    /// Only this record id.
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args)]
struct SynthManifestArgs {
    /// Comma-separated levels; all seven by default.
    #[arg(long, value_delimiter = ',')]
    levels: Vec<u32>,
    #[arg(long, default_value_t = 10)]
    per_level: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Render PNGs here and reference them from the manifest.
    #[arg(long)]
    render_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, CliError> {
    let text = read_text(path)?;
    Ok(read_manifest(&text, path.parent())?)
}

fn breakdown_line(label: &str, b: &Breakdown) -> String {
    format!(
        "{label:>8}  n={:<5} err={:<3} acc={:>6.2}%  zoom={:>5.2}  +tok={:>8.1}  tok={:>8.1}",
        b.n, b.errors, b.accuracy_pct, b.mean_zoom_calls, b.mean_added_visual_tokens, b.mean_total_visual_tokens
    )
}

fn eval(args: &EvalArgs, as_json: bool) -> Result<String, CliError> {
    let manifest = load_manifest(&args.manifest)?;
    let opts = args.run.options()?;
    let policy = args.run.policy()?;
    let run: EvalRun = with_threads(args.run.parallel, || run_manifest(&*policy, &manifest, &opts, &DefaultMatcher))?;
    if let Some(dir) = &args.out {
        write_file(&dir.join("trajectories.jsonl"), &run.records_jsonl())?;
        write_file(&dir.join("report.json"), &run.report_json())?;
    }
    if as_json {
        return Ok(run.report_json());
    }
    let mut out = breakdown_line("overall", &run.report.overall) + "\n";
    for (level, b) in &run.report.per_resolution {
        out += &(breakdown_line(&level.to_string(), b) + "\n");
    }
    Ok(out)
}

fn sweep(args: &SweepArgs, as_json: bool) -> Result<String, CliError> {
    let mut by_level: BTreeMap<u32, Vec<ManifestEntry>> = BTreeMap::new();
    for e in load_manifest(&args.manifest)? {
        by_level.entry(e.resolution).or_default().push(e);
    }
    let baseline: Option<BTreeMap<u32, Breakdown>> = match &args.baseline {
        Some(p) => {
            let v: Value = read_json(p)?;
            let per = v.get("per_resolution").cloned().unwrap_or(Value::Null);
            Some(serde_json::from_value(per).map_err(|e| CliError::Io {
                path: p.clone(),
                message: format!("per_resolution: {e}"),
            })?)
        }
        None => None,
    };
    let opts = args.run.options()?;
    let policy = args.run.policy()?;
    let table = with_threads(args.run.parallel, || {
        resolution_sweep(&*policy, &by_level, baseline.as_ref(), &opts, &DefaultMatcher)
    })?;
    let as_value = pretty(&table);
    if let Some(p) = &args.out {
        write_file(p, &as_value)?;
    }
    if as_json {
        return Ok(as_value);
    }
    let mut out = format!("{:>6}  {:>7}  {:>9}  {:>6}  {:>7}\n", "level", "acc%", "tokens", "zooms", "mite");
    for r in &table.rows {
        let mite = r.mite.map(|m| format!("{m:.2}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:>6}  {:>7.2}  {:>9.1}  {:>6.2}  {:>7}",
            r.level, r.accuracy_pct, r.mean_total_visual_tokens, r.mean_zoom_calls, mite
        );
    }
    let _ = writeln!(out, "rank correlation (level vs zoom calls): {:.3}", table.zoom_rank_correlation);
    Ok(out)
}

fn train(args: &TrainArgs, as_json: bool) -> Result<String, CliError> {
    let env = SynthEnv::default();
    let exec = Execution::from_threads(args.parallel);
    let mut policy = TabularPolicy::for_env(&env);
    if args.cold_start_tasks > 0 {
        let demos = expert_demonstrations(&env, args.cold_start_tasks, args.seed);
        policy = cold_start_fit(&policy, &demos, args.cold_start_epochs, args.cold_start_lr)?.0;
    }
    let reference = policy.clone();
    let mut cfg = TrainConfig {
        reward: match args.reward {
            RewardArg::Agar => RewardKind::Agar(AgarParams::default()),
            RewardArg::Baseline => RewardKind::Baseline,
        },
        iterations: args.iters,
        seed: args.seed,
        tasks_per_iter: args.tasks_per_iter,
        lr: args.lr,
        ..TrainConfig::default()
    };
    cfg.grpo.group_size = args.group_size;
    cfg.grpo.clip_epsilon = args.clip_epsilon;
    cfg.grpo.kl_beta = args.kl_beta;
    let outcome = with_threads(args.parallel, || train_grpo(&policy, &env, &cfg, Some(&reference), exec))?;
    let evaluation = (args.eval_episodes > 0).then(|| {
        with_threads(args.parallel, || {
            evaluate_policy(&outcome.policy, &env, args.eval_episodes, cfg.max_tool_calls, args.seed, exec)
        })
    });
    if let Some(dir) = &args.out {
        write_file(&dir.join("train_log.jsonl"), &log_to_jsonl(&outcome.log))?;
        write_file(&dir.join("policy.json"), &pretty(&outcome.policy))?;
        if let Some(ev) = &evaluation {
            write_file(&dir.join("evaluation.json"), &pretty(ev))?;
        }
    }
    let last = outcome.log.last();
    if as_json {
        return Ok(pretty(&json!({
            "iterations": outcome.log.len(),
            "final": last,
            "evaluation": evaluation,
        })));
    }
    let mut out = String::new();
    if let (Some(first), Some(last)) = (outcome.log.first(), last) {
        let _ = writeln!(
            out,
            "mean reward {:.3} -> {:.3}, accuracy {:.3} -> {:.3} over {} iterations",
            first.mean_reward,
            last.mean_reward,
            first.accuracy,
            last.accuracy,
            outcome.log.len()
        );
    }
    if let Some(ev) = &evaluation {
        for l in &ev.per_level {
            let _ = writeln!(
                out,
                "{:>6}  acc={:.3}  zoom={:.2}  direct={:.3}",
                l.level, l.accuracy, l.mean_zoom_calls, l.direct_rate
            );
        }
        let _ = writeln!(
            out,
            "direct rate (legible) {:.3}, zoom rate (illegible) {:.3}",
            ev.direct_rate_legible.unwrap_or(f64::NAN),
            ev.zoom_rate_illegible.unwrap_or(f64::NAN)
        );
    }
    Ok(out)
}

fn forge(args: &ForgeArgs, as_json: bool) -> Result<String, CliError> {
    let mut cfg: SynthForgeConfig = match &args.config {
        None => SynthForgeConfig::default(),
        Some(p) => {
            let text = read_text(p)?;
            let parsed = if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| e.to_string())
            } else {
                toml::from_str(&text).map_err(|e| e.to_string())
            };
            parsed.map_err(|message| CliError::Io { path: p.clone(), message })?
        }
    };
    if let Some(s) = args.sources {
        cfg.sources = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let exec = Execution::from_threads(args.parallel);
    let corpus = with_threads(args.parallel, || forge_synth_corpus(&cfg, exec))?;
    let stats = pretty(&corpus.stats.to_json());
    if let Some(dir) = &args.out {
        write_file(&dir.join("corpus.jsonl"), &corpus.to_jsonl())?;
        write_file(&dir.join("stats.json"), &stats)?;
    }
    if as_json {
        return Ok(stats);
    }
    let s = &corpus.stats;
    let mut out = format!(
        "{} records ({} direct, {} zoom, {:.1}% zoom), {} dropped\n",
        s.total,
        s.direct,
        s.zoom,
        100.0 * s.zoom_fraction,
        s.dropped
    );
    for (level, c) in &s.per_resolution {
        let _ = writeln!(out, "{level:>6}  direct={:<5} zoom={:<5} zoom%={:.1}", c.direct, c.zoom, 100.0 * c.zoom_fraction());
    }
    Ok(out)
}

/// `(accuracy_pct, mean_total_visual_tokens)` from a report, or from its
/// per-resolution entry for `level`.
fn report_point(path: &Path, level: Option<u32>) -> Result<(f64, f64), CliError> {
    let v: Value = read_json(path)?;
    let bad = |message: String| CliError::Io {
        path: path.to_path_buf(),
        message,
    };
    let node = match level {
        None => &v,
        Some(l) => v
            .get("per_resolution")
            .and_then(|p| p.get(l.to_string()))
            .ok_or_else(|| bad(format!("no per_resolution entry for level {l}")))?,
    };
    let acc = match (node.get("accuracy_pct"), node.get("accuracy")) {
        (Some(p), _) => p.as_f64(),
        (None, Some(a)) => a.as_f64().map(|a| a * 100.0),
        _ => None,
    }
    .ok_or_else(|| bad("missing accuracy_pct".into()))?;
    let tokens = node
        .get("mean_total_visual_tokens")
        .and_then(Value::as_f64)
        .ok_or_else(|| bad("missing mean_total_visual_tokens".into()))?;
    Ok((acc, tokens))
}

fn mite(args: &MiteArgs, as_json: bool) -> Result<String, CliError> {
    let b = report_point(&args.baseline, args.level)?;
    let c = report_point(&args.candidate, args.level)?;
    let m = compute_mite(b, c)?;
    Ok(if as_json {
        json!({"mite": m, "baseline": [b.0, b.1], "candidate": [c.0, c.1]}).to_string() + "\n"
    } else {
        format!("{m:.2}\n")
    })
}

fn trace(out: &mut String, header: &str, t: &Trajectory, correct: Option<bool>) {
    let _ = writeln!(out, "== {header} ==");
    let _ = writeln!(out, "image: {} {}x{}", t.image.id(), t.image.width(), t.image.height());
    let _ = writeln!(out, "query: {}", t.query);
    let mut chain: Vec<FrameTransform> = Vec::new();
    for (i, step) in t.steps.iter().enumerate() {
        let line = match step {
            StepRecord::Think { text } => format!("think: {text}"),
            StepRecord::ToolCall { region, clamped } => {
                let root = to_root_frame(*region, &chain);
                chain.push(FrameTransform::zoom(*region, 2));
                format!("zoom {region} (root {root}){}", if *clamped { " [clamped]" } else { "" })
            }
            StepRecord::Observation {
                image,
                added_visual_tokens,
            } => format!("view {}x{}, +{added_visual_tokens} visual tokens", image.width(), image.height()),
            StepRecord::Answer { text } => format!("answer: {text}"),
        };
        let _ = writeln!(out, "[{}] {line}", i + 1);
    }
    let end = match &t.terminal {
        Terminal::Answered { answer } => format!("answered {answer:?}"),
        Terminal::StepLimit => "step limit".into(),
        Terminal::Error { reason } => format!("error: {reason}"),
    };
    let verdict = match correct {
        Some(true) => " (correct)",
        Some(false) => " (wrong)",
        None => "",
    };
    for w in &t.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    let _ = writeln!(out, "=> {end}{verdict}");
}

fn replay(args: &ReplayArgs, as_json: bool) -> Result<String, CliError> {
    let text = read_text(&args.trajectories)?;
    let mut out = String::new();
    let mut shown = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |message: String| CliError::Io {
            path: args.trajectories.clone(),
            message: format!("line {}: {message}", i + 1),
        };
        let v: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let id = v.get("id").and_then(Value::as_str).map(str::to_string);
        if args.id.is_some() && args.id != id {
            continue;
        }
        if let Some(err) = v.get("error").and_then(Value::as_str) {
            let _ = writeln!(out, "== {} ==\n=> not run: {err}", id.as_deref().unwrap_or("?"));
            shown.push(v.clone());
            continue;
        }
        let correct = v.get("correct").and_then(Value::as_bool);
        let raw = v.get("trajectory").cloned().unwrap_or_else(|| v.clone());
        let t = focusloop_core::trajectory::trajectory_from_value(raw, Mode::Lenient).map_err(bad)?;
        let header = id.unwrap_or_else(|| format!("line {}", i + 1));
        trace(&mut out, &header, &t, correct);
        shown.push(v);
    }
    if shown.is_empty() {
        return Err(CliError::Usage(match &args.id {
            Some(id) => format!("no record with id `{id}`"),
            None => "no trajectories in input".into(),
        }));
    }
    Ok(if as_json { pretty(&json!({"count": shown.len(), "trace": out})) } else { out })
}

fn synth_manifest_cmd(args: &SynthManifestArgs, as_json: bool) -> Result<String, CliError> {
    let env = SynthEnv::default();
    let levels = if args.levels.is_empty() {
        RESOLUTION_LEVELS.to_vec()
    } else {
        args.levels.clone()
    };
    // absolute, so the manifest resolves wherever it is written
    let render_dir = match &args.render_dir {
        Some(dir) => {
            let io = |e: std::io::Error| CliError::Io {
                path: dir.clone(),
                message: e.to_string(),
            };
            std::fs::create_dir_all(dir).map_err(io)?;
            Some(std::fs::canonicalize(dir).map_err(io)?)
        }
        None => None,
    };
    let entries = synth_manifest(&env.config, &levels, args.per_level, args.seed, render_dir.as_deref())?;
    write_file(&args.out, &write_manifest(&entries))?;
    Ok(if as_json {
        json!({"entries": entries.len(), "manifest": args.out}).to_string() + "\n"
    } else {
        format!("wrote {} entries to {}\n", entries.len(), args.out.display())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Eval(a) => eval(a, cli.json),
        Command::Sweep(a) => sweep(a, cli.json),
        Command::TrainSynth(a) => train(a, cli.json),
        Command::Forge(a) => forge(a, cli.json),
        Command::Mite(a) => mite(a, cli.json),
        Command::Replay(a) => replay(a, cli.json),
        Command::SynthManifest(a) => synth_manifest_cmd(a, cli.json),
    };
    match result {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            if cli.json {
                println!("{}", json!({"error": {"kind": e.kind(), "message": e.to_string()}}));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(2)
        }
    }
}
