//! Synthetic multi-resolution visual search.
//!
//! A task hides a labelled marker of intrinsic size `s` in one cell of a
//! grid laid over a square image of side `ℓ`. The marker is legible at zoom
//! depth `k` iff `s * (ℓ / 224) * 2^k >= τ`. Answering reads the label only
//! when it is legible, so the best policy answers directly on high
//! resolution images and zooms on low resolution ones.
//!
//! Images are abstract (grid + legibility); [`render_task`] produces a real
//! raster for integration with the focus engine.

pub mod agent;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::trajectory::{ImageRef, Region};

pub const RESOLUTION_LEVELS: [u32; 7] = [224, 336, 448, 672, 1024, 1920, 2560];
pub const REFERENCE_LEVEL: u32 = 224;

pub const DEFAULT_LABELS: [&str; 8] = [
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black",
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("unknown resolution level {0}")]
    UnknownLevel(u32),
    #[error("malformed zoom region {0:?}")]
    MalformedRegion(GridRegion),
    #[error("not a synthetic task id: `{0}`")]
    BadId(String),
    #[error("invalid config: {0}")]
    Config(String),
}

pub fn level_index(level: u32) -> Result<usize, SynthError> {
    RESOLUTION_LEVELS
        .iter()
        .position(|&l| l == level)
        .ok_or(SynthError::UnknownLevel(level))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegibilityRule {
    /// Minimum apparent size in pixels.
    pub threshold: u32,
    pub reference_level: u32,
}

impl Default for LegibilityRule {
    fn default() -> Self {
        Self {
            threshold: 16,
            reference_level: REFERENCE_LEVEL,
        }
    }
}

impl LegibilityRule {
    /// `size * (level / reference) * 2^depth >= threshold`, in exact
    /// integer arithmetic.
    pub fn legible(&self, level: u32, depth: u32, size: u32) -> bool {
        let lhs = (size as u128 * level as u128) << depth.min(64);
        lhs >= self.threshold as u128 * self.reference_level as u128
    }

    /// Fewest zooms that make the marker legible.
    pub fn min_zooms(&self, level: u32, size: u32) -> u32 {
        (0..)
            .find(|&k| self.legible(level, k, size))
            .expect("legible at some depth for size >= 1")
    }
}

/// What an answer means when the marker is not legible.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuessMode {
    /// Illegible answers are always wrong.
    #[default]
    Strict,
    /// Illegible answers are a uniform guess over the label set.
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEnvConfig {
    pub grid: u32,
    pub labels: Vec<String>,
    /// Intrinsic marker size at the reference level.
    pub target_size: u32,
    pub max_distractors: u32,
    pub legibility: LegibilityRule,
    pub guess: GuessMode,
}

impl Default for SynthEnvConfig {
    fn default() -> Self {
        Self {
            grid: 32,
            labels: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
            target_size: 2,
            max_distractors: 8,
            legibility: LegibilityRule::default(),
            guess: GuessMode::Strict,
        }
    }
}

impl SynthEnvConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.grid == 0 || self.labels.len() < 2 || self.target_size == 0 {
            return Err(SynthError::Config(
                "grid >= 1, at least two labels and target_size >= 1 required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthTask {
    pub seed: u64,
    pub resolution_level: u32,
    /// (column, row) in the grid.
    pub target_cell: (u32, u32),
    pub target_size: u32,
    pub gold_answer: String,
    pub distractor_count: u32,
}

impl SynthTask {
    pub fn id(&self) -> String {
        format!("synth-{}-{}", self.seed, self.resolution_level)
    }

    /// Rebuild a task from its id (`synth-<seed>-<level>`).
    pub fn from_id(id: &str, cfg: &SynthEnvConfig) -> Result<Self, SynthError> {
        let bad = || SynthError::BadId(id.to_string());
        let rest = id.strip_prefix("synth-").ok_or_else(bad)?;
        let (seed, level) = rest.split_once('-').ok_or_else(bad)?;
        make_task(
            seed.parse().map_err(|_| bad())?,
            level.parse().map_err(|_| bad())?,
            cfg,
        )
    }

    pub fn query(&self) -> &'static str {
        "What color is the small marker in the image?"
    }

    pub fn legible_at(&self, depth: u32, cfg: &SynthEnvConfig) -> bool {
        cfg.legibility
            .legible(self.resolution_level, depth, self.target_size)
    }

    /// Root-pixel box of the target's grid cell.
    pub fn cell_box(&self, cfg: &SynthEnvConfig) -> Region {
        cell_region(self.resolution_level, cfg.grid, self.target_cell)
    }

    /// Root-pixel centre of the target cell.
    pub fn target_center(&self, cfg: &SynthEnvConfig) -> (i64, i64) {
        let b = self.cell_box(cfg);
        ((b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2)
    }

    /// A label different from the gold one.
    pub fn wrong_label<'a>(&self, cfg: &'a SynthEnvConfig) -> &'a str {
        let i = cfg
            .labels
            .iter()
            .position(|l| *l == self.gold_answer)
            .unwrap_or(0);
        &cfg.labels[(i + 1) % cfg.labels.len()]
    }
}

fn cell_region(level: u32, grid: u32, (c, r): (u32, u32)) -> Region {
    let edge = |i: u32| (i as u64 * level as u64 / grid as u64) as i64;
    Region::new(edge(c), edge(r), edge(c + 1), edge(r + 1))
}

/// Deterministic task: target cell and label uniform, from the seed.
pub fn make_task(seed: u64, level: u32, cfg: &SynthEnvConfig) -> Result<SynthTask, SynthError> {
    level_index(level)?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[level as u64]));
    let target_cell = (rng.gen_range(0..cfg.grid), rng.gen_range(0..cfg.grid));
    let gold_answer = cfg.labels[rng.gen_range(0..cfg.labels.len())].clone();
    let distractor_count = rng.gen_range(0..=cfg.max_distractors);
    Ok(SynthTask {
        seed,
        resolution_level: level,
        target_cell,
        target_size: cfg.target_size,
        gold_answer,
        distractor_count,
    })
}

// ---------------------------------------------------------------------------
// Dynamics
// ---------------------------------------------------------------------------

/// Box of grid cells, exclusive upper bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRegion {
    pub c1: u32,
    pub r1: u32,
    pub c2: u32,
    pub r2: u32,
}

impl GridRegion {
    pub fn cell(c: u32, r: u32) -> Self {
        Self {
            c1: c,
            r1: r,
            c2: c + 1,
            r2: r + 1,
        }
    }

    pub fn contains(&self, (c, r): (u32, u32)) -> bool {
        self.c1 <= c && c < self.c2 && self.r1 <= r && r < self.r2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthAction {
    Answer(String),
    Zoom(GridRegion),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SynthState {
    pub depth: u32,
    pub located: bool,
    pub zoom_calls: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepResult {
    Continue(SynthState),
    Done { correct: bool },
}

/// Pure transition function.
pub fn env_step(
    task: &SynthTask,
    state: SynthState,
    action: &SynthAction,
    cfg: &SynthEnvConfig,
) -> Result<StepResult, SynthError> {
    match action {
        SynthAction::Answer(label) => {
            let readable = task.legible_at(state.depth, cfg) || cfg.guess == GuessMode::Stochastic;
            Ok(StepResult::Done {
                correct: readable && *label == task.gold_answer,
            })
        }
        SynthAction::Zoom(region) => {
            if region.c1 >= region.c2 || region.r1 >= region.r2 || region.c2 > cfg.grid || region.r2 > cfg.grid {
                return Err(SynthError::MalformedRegion(*region));
            }
            let hit = region.contains(task.target_cell);
            Ok(StepResult::Continue(SynthState {
                depth: state.depth + hit as u32,
                located: hit,
                zoom_calls: state.zoom_calls + 1,
            }))
        }
    }
}

/// What the agent perceives when it tries to read the marker.
pub fn perceived_label<'a>(task: &'a SynthTask, depth: u32, cfg: &SynthEnvConfig) -> Option<&'a str> {
    task.legible_at(depth, cfg).then_some(task.gold_answer.as_str())
}

/// Zoom on the target cell until legible, then answer gold.
pub fn scripted_expert(task: &SynthTask, cfg: &SynthEnvConfig) -> Vec<SynthAction> {
    let zooms = cfg
        .legibility
        .min_zooms(task.resolution_level, task.target_size);
    let (c, r) = task.target_cell;
    let mut actions = vec![SynthAction::Zoom(GridRegion::cell(c, r)); zooms as usize];
    actions.push(SynthAction::Answer(task.gold_answer.clone()));
    actions
}

// ---------------------------------------------------------------------------
// Tabular view used by the trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TabularAction {
    Answer = 0,
    Zoom = 1,
}

impl TabularAction {
    pub const COUNT: usize = 2;

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => TabularAction::Answer,
            _ => TabularAction::Zoom,
        }
    }
}

/// The environment seen through the (level, depth, located) state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEnv {
    pub config: SynthEnvConfig,
    /// Highest depth distinguished in the state; deeper states share it.
    pub max_depth: u32,
    pub levels: Vec<u32>,
}

impl Default for SynthEnv {
    fn default() -> Self {
        Self::new(SynthEnvConfig::default())
    }
}

impl SynthEnv {
    pub fn new(config: SynthEnvConfig) -> Self {
        Self {
            config,
            max_depth: 6,
            levels: RESOLUTION_LEVELS.to_vec(),
        }
    }

    pub fn n_states(&self) -> usize {
        RESOLUTION_LEVELS.len() * (self.max_depth as usize + 1) * 2
    }

    pub fn n_actions(&self) -> usize {
        TabularAction::COUNT
    }

    pub fn state_index(&self, level: u32, state: &SynthState) -> Result<usize, SynthError> {
        let li = level_index(level)?;
        let d = state.depth.min(self.max_depth) as usize;
        Ok((li * (self.max_depth as usize + 1) + d) * 2 + state.located as usize)
    }

    /// Draw a task with a level uniform over `self.levels`.
    pub fn sample_task(&self, seed: u64) -> SynthTask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let level = self.levels[rng.gen_range(0..self.levels.len())];
        make_task(rng.gen(), level, &self.config).expect("levels come from the declared set")
    }

    /// Concrete action for a tabular choice. Zooms target the marker's cell.
    pub fn concretize(
        &self,
        task: &SynthTask,
        state: &SynthState,
        action: TabularAction,
        rng: &mut impl Rng,
    ) -> SynthAction {
        match action {
            TabularAction::Zoom => {
                let (c, r) = task.target_cell;
                SynthAction::Zoom(GridRegion::cell(c, r))
            }
            TabularAction::Answer => {
                let label = match perceived_label(task, state.depth, &self.config) {
                    Some(l) => l.to_string(),
                    None => match self.config.guess {
                        GuessMode::Strict => task.wrong_label(&self.config).to_string(),
                        GuessMode::Stochastic => {
                            self.config.labels[rng.gen_range(0..self.config.labels.len())].clone()
                        }
                    },
                };
                SynthAction::Answer(label)
            }
        }
    }

    /// Expert (state, action) pairs for behaviour cloning.
    pub fn expert_demonstrations(&self, task: &SynthTask) -> Vec<(usize, usize)> {
        let mut state = SynthState::default();
        let mut out = Vec::new();
        for action in scripted_expert(task, &self.config) {
            let s = self
                .state_index(task.resolution_level, &state)
                .expect("task level is valid");
            match env_step(task, state, &action, &self.config).expect("expert actions are well-formed") {
                StepResult::Continue(next) => {
                    out.push((s, TabularAction::Zoom as usize));
                    state = next;
                }
                StepResult::Done { .. } => out.push((s, TabularAction::Answer as usize)),
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn label_color(label: &str) -> Rgb<u8> {
    match label {
        "red" => Rgb([220, 30, 30]),
        "green" => Rgb([30, 180, 60]),
        "blue" => Rgb([40, 70, 220]),
        "yellow" => Rgb([240, 220, 40]),
        "purple" => Rgb([140, 50, 170]),
        "orange" => Rgb([250, 140, 20]),
        "white" => Rgb([250, 250, 250]),
        "black" => Rgb([10, 10, 10]),
        other => {
            let h = other.bytes().fold(7u32, |a, b| a.wrapping_mul(31).wrapping_add(b as u32));
            Rgb([(h >> 16) as u8, (h >> 8) as u8, h as u8])
        }
    }
}

/// Raster of the task: gray background, gray distractor squares, and the
/// marker drawn in its label's colour at its apparent size.
pub fn render_task(task: &SynthTask, cfg: &SynthEnvConfig) -> ImageRef {
    let side = task.resolution_level;
    let mut img = RgbImage::from_pixel(side, side, Rgb([128, 128, 128]));
    let apparent = ((task.target_size as u64 * side as u64) / cfg.legibility.reference_level as u64)
        .max(1) as i64;
    let mut paint = |cell: (u32, u32), color: Rgb<u8>| {
        let b = cell_region(side, cfg.grid, cell);
        let (cx, cy) = ((b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2);
        let x0 = (cx - apparent / 2).max(0);
        let y0 = (cy - apparent / 2).max(0);
        for y in y0..(y0 + apparent).min(side as i64) {
            for x in x0..(x0 + apparent).min(side as i64) {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(task.seed, &[u64::from(side), 1]));
    for _ in 0..task.distractor_count {
        let cell = (rng.gen_range(0..cfg.grid), rng.gen_range(0..cfg.grid));
        if cell != task.target_cell {
            paint(cell, Rgb([96, 96, 96]));
        }
    }
    paint(task.target_cell, label_color(&task.gold_answer));
    ImageRef::from_raster(task.id(), img).expect("levels are positive")
}
