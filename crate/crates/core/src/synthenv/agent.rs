//! A protocol-speaking agent for synthetic tasks, driven by a tabular
//! policy. Lets trained policies run through the real focus engine.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{SynthEnv, SynthEnvConfig, SynthState, SynthTask, TabularAction};
use crate::derive_seed;
use crate::grpo::TabularPolicy;
use crate::policy::{Policy, PolicyError, TurnContext};
use crate::protocol::{serialize_segments, Segment};
use crate::trajectory::{
    from_root_exact, to_root_exact, ExactRegion, FrameTransform, Rational, Region, StepRecord,
};

#[derive(Debug, Clone)]
pub struct SynthAgent {
    env: SynthEnv,
    policy: TabularPolicy,
    greedy: bool,
    zoom_factor: u32,
}

impl SynthAgent {
    pub fn new(env: SynthEnv, policy: TabularPolicy) -> Self {
        Self {
            env,
            policy,
            greedy: false,
            zoom_factor: 2,
        }
    }

    /// Always take the most likely action instead of sampling.
    pub fn greedy(mut self, greedy: bool) -> Self {
        self.greedy = greedy;
        self
    }

    pub fn zoom_factor(mut self, factor: u32) -> Self {
        self.zoom_factor = factor;
        self
    }

    pub fn policy(&self) -> &TabularPolicy {
        &self.policy
    }
}

fn region_hits(region: Region, chain: &[FrameTransform], (cx, cy): (i64, i64)) -> bool {
    let root = to_root_exact(region, chain);
    let (cx, cy) = (Rational::from_integer(cx), Rational::from_integer(cy));
    root.x1 <= cx && cx < root.x2 && root.y1 <= cy && cy < root.y2
}

/// State after a sequence of zoom regions, each given in the frame of the
/// view the previous zoom produced.
pub fn state_after_zooms(task: &SynthTask, cfg: &SynthEnvConfig, regions: &[Region], factor: u32) -> SynthState {
    let centre = task.target_center(cfg);
    let mut state = SynthState::default();
    let mut chain = Vec::with_capacity(regions.len());
    for &region in regions {
        let hit = region_hits(region, &chain, centre);
        state.depth += hit as u32;
        state.located = hit;
        state.zoom_calls += 1;
        chain.push(FrameTransform::zoom(region, factor));
    }
    state
}

fn tool_regions(history: &[StepRecord]) -> Vec<Region> {
    history
        .iter()
        .filter_map(|s| match s {
            StepRecord::ToolCall { region, .. } => Some(*region),
            _ => None,
        })
        .collect()
}

/// Box for the next zoom in the current view's pixels: centred on the
/// target in root space, half the side of the current view, kept inside it.
pub fn next_zoom_region(task: &SynthTask, cfg: &SynthEnvConfig, chain: &[FrameTransform], view: (u32, u32)) -> Region {
    let (cx, cy) = task.target_center(cfg);
    let full = Region::new(0, 0, view.0 as i64, view.1 as i64);
    let v = to_root_exact(full, chain);
    let half_w = (v.x2 - v.x1) / Rational::from_integer(4);
    let half_h = (v.y2 - v.y1) / Rational::from_integer(4);
    let place = |c: i64, half: Rational, lo: Rational, hi: Rational| {
        let c = Rational::from_integer(c);
        let start = (c - half).max(lo).min(hi - half * Rational::from_integer(2));
        (start, start + half * Rational::from_integer(2))
    };
    let (x1, x2) = place(cx, half_w, v.x1, v.x2);
    let (y1, y2) = place(cy, half_h, v.y1, v.y2);
    let local = from_root_exact(&ExactRegion { x1, y1, x2, y2 }, chain).covering();
    local
        .clamped_to(view.0, view.1)
        .unwrap_or(full)
}

fn view_dims(task: &SynthTask, history: &[StepRecord]) -> (u32, u32) {
    history
        .iter()
        .rev()
        .find_map(|s| match s {
            StepRecord::Observation { image, .. } => Some((image.width(), image.height())),
            _ => None,
        })
        .unwrap_or((task.resolution_level, task.resolution_level))
}

impl Policy for SynthAgent {
    fn next_turn(&self, ctx: &TurnContext<'_>) -> Result<String, PolicyError> {
        let task = SynthTask::from_id(ctx.image.id(), &self.env.config)
            .map_err(|e| PolicyError::Failed(e.to_string()))?;
        let regions = tool_regions(ctx.history);
        let state = state_after_zooms(&task, &self.env.config, &regions, self.zoom_factor);
        let s = self
            .env
            .state_index(task.resolution_level, &state)
            .map_err(|e| PolicyError::Failed(e.to_string()))?;
        let a = if self.greedy {
            self.policy.greedy(s)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, &[ctx.turn as u64]));
            self.policy.sample(s, &mut rng)
        };
        let segments = match TabularAction::from_index(a) {
            TabularAction::Zoom => {
                let chain: Vec<_> = regions.iter().map(|r| FrameTransform::zoom(*r, self.zoom_factor)).collect();
                let region = next_zoom_region(&task, &self.env.config, &chain, view_dims(&task, ctx.history));
                vec![
                    Segment::Think("The marker is too small to read here; zooming in.".into()),
                    Segment::zoom(region),
                ]
            }
            TabularAction::Answer => {
                let label = if task.legible_at(state.depth, &self.env.config) {
                    task.gold_answer.clone()
                } else {
                    task.wrong_label(&self.env.config).to_string()
                };
                vec![
                    Segment::Think("I can make out the marker's color.".into()),
                    Segment::Answer(label),
                ]
            }
        };
        serialize_segments(&segments).map_err(|e| PolicyError::Failed(e.to_string()))
    }
}
