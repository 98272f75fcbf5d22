//! Adaptive group-aware reward and group-relative advantages.
//!
//! For a rollout with correctness `c`, format validity `f`, direct indicator
//! `d` and zoom indicator `z`, inside a group whose signal `g` is 1 iff some
//! rollout answered correctly without zooming:
//!
//! ```text
//! r = c * (d + z * (1 - delta * g)) + (1 - c) * gamma * f
//! ```
//!
//! A correct direct answer always earns 1. A correct zoomed answer earns
//! `1 - delta` when the group shows the zoom was unnecessary. An incorrect
//! but well-formed answer earns the small format bonus `gamma`.
//!
//! Note that a correct answer in an invalid format earns 0: `d = z = 0` and
//! `1 - c = 0`.

use serde::{Deserialize, Serialize};

use crate::protocol::{classify_trajectory, Shape};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgarError {
    #[error("empty group")]
    EmptyGroup,
    #[error("no trainable tokens (every position is vision or padding)")]
    NoTrainableTokens,
    #[error("empty token sequence")]
    EmptyTokens,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RolloutOutcome {
    pub correct: bool,
    pub format_valid: bool,
    pub shape: Shape,
}

impl RolloutOutcome {
    /// Outcome with `format_valid` derived from the shape.
    pub fn new(correct: bool, shape: Shape) -> Self {
        Self {
            correct,
            format_valid: shape != Shape::Invalid,
            shape,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.format_valid == (self.shape != Shape::Invalid)
    }

    pub fn is_correct_direct(&self) -> bool {
        self.correct && self.shape == Shape::Direct
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgarParams {
    pub delta: f64,
    pub gamma: f64,
}

impl Default for AgarParams {
    fn default() -> Self {
        Self {
            delta: 0.2,
            gamma: 0.1,
        }
    }
}

impl AgarParams {
    pub fn validate(&self) -> Result<(), AgarError> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if ok(self.delta) && ok(self.gamma) {
            Ok(())
        } else {
            Err(AgarError::InvalidParams(format!(
                "delta and gamma must lie in [0, 1], got {} and {}",
                self.delta, self.gamma
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageParams {
    pub epsilon: f64,
}

impl Default for AdvantageParams {
    fn default() -> Self {
        Self { epsilon: 1e-6 }
    }
}

/// 1 iff some rollout in the group is a correct direct answer.
pub fn group_signal(outcomes: &[RolloutOutcome]) -> Result<u8, AgarError> {
    if outcomes.is_empty() {
        return Err(AgarError::EmptyGroup);
    }
    Ok(outcomes.iter().any(RolloutOutcome::is_correct_direct) as u8)
}

pub fn agar_reward(outcome: &RolloutOutcome, g: u8, params: &AgarParams) -> f64 {
    debug_assert!(outcome.is_consistent());
    let c = outcome.correct as u8 as f64;
    let f = outcome.format_valid as u8 as f64;
    let d = (outcome.shape == Shape::Direct) as u8 as f64;
    let z = (outcome.shape == Shape::ZoomIn) as u8 as f64;
    let g = g.min(1) as f64;
    c * (d + z * (1.0 - params.delta * g)) + (1.0 - c) * (params.gamma * f)
}

/// Correctness-plus-format reward used as the ablation baseline.
pub fn baseline_reward(outcome: &RolloutOutcome) -> f64 {
    0.9 * outcome.correct as u8 as f64 + 0.1 * outcome.format_valid as u8 as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardKind {
    Agar(AgarParams),
    Baseline,
}

impl Default for RewardKind {
    fn default() -> Self {
        RewardKind::Agar(AgarParams::default())
    }
}

impl RewardKind {
    /// Rewards for a whole group; AGAR needs the group signal.
    pub fn group_rewards(&self, outcomes: &[RolloutOutcome]) -> Result<Vec<f64>, AgarError> {
        match self {
            RewardKind::Agar(p) => {
                let g = group_signal(outcomes)?;
                Ok(outcomes.iter().map(|o| agar_reward(o, g, p)).collect())
            }
            RewardKind::Baseline => {
                if outcomes.is_empty() {
                    return Err(AgarError::EmptyGroup);
                }
                Ok(outcomes.iter().map(baseline_reward).collect())
            }
        }
    }
}

/// `(r_i - mean) / (std + epsilon)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], params: &AdvantageParams) -> Result<Vec<f64>, AgarError> {
    if rewards.is_empty() {
        return Err(AgarError::EmptyGroup);
    }
    if !(params.epsilon > 0.0) {
        return Err(AgarError::InvalidParams("epsilon must be positive".into()));
    }
    // a constant group carries no signal; avoid rounding residue in the mean
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + params.epsilon;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

// ---------------------------------------------------------------------------
// Token masks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Text,
    Vision,
    Padding,
}

/// 1 at text positions, 0 at vision and padding positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask(Vec<bool>);

impl TokenMask {
    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn trainable(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.0.iter().map(|&b| b as u8).collect()
    }
}

pub fn token_mask(kinds: &[TokenKind]) -> Result<TokenMask, AgarError> {
    if kinds.is_empty() {
        return Err(AgarError::EmptyTokens);
    }
    let mask: Vec<bool> = kinds.iter().map(|k| *k == TokenKind::Text).collect();
    if !mask.contains(&true) {
        return Err(AgarError::NoTrainableTokens);
    }
    Ok(TokenMask(mask))
}

// ---------------------------------------------------------------------------
// Answer matching
// ---------------------------------------------------------------------------

pub trait AnswerMatcher: Send + Sync {
    fn matches(&self, predicted: &str, gold: &str) -> bool;
}

/// Case-insensitive, whitespace-normalized exact match. When the gold
/// answer is a single option letter (`B`, `(B)`, `B.`), the prediction's
/// leading option letter is compared instead.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultMatcher;

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn option_letter(s: &str) -> Option<char> {
    let t = s.trim().trim_start_matches(['(', '[']);
    let mut chars = t.chars();
    let first = chars.next().filter(char::is_ascii_alphabetic)?;
    match chars.next() {
        None => Some(first.to_ascii_lowercase()),
        Some(c) if !c.is_alphanumeric() => Some(first.to_ascii_lowercase()),
        _ => None,
    }
}

impl AnswerMatcher for DefaultMatcher {
    fn matches(&self, predicted: &str, gold: &str) -> bool {
        let g = gold.trim().trim_matches(|c: char| !c.is_alphanumeric());
        if g.len() == 1 && g.chars().all(|c| c.is_ascii_alphabetic()) {
            return option_letter(predicted) == Some(g.chars().next().unwrap().to_ascii_lowercase());
        }
        normalize(predicted) == normalize(gold)
    }
}

/// Outcome of a finished episode against a gold answer.
pub fn outcome_of(traj: &Trajectory, gold: &str, matcher: &dyn AnswerMatcher) -> RolloutOutcome {
    let verdict = classify_trajectory(traj);
    let correct = traj.answer().is_some_and(|a| matcher.matches(a, gold));
    RolloutOutcome {
        correct,
        format_valid: verdict.valid,
        shape: verdict.shape,
    }
}

/// Every consistent (c, shape, g) combination with its reward, as CSV.
pub fn reward_table_csv(params: &AgarParams) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["correct", "format_valid", "shape", "g", "agar", "baseline"])
        .expect("in-memory csv");
    for correct in [true, false] {
        for shape in [Shape::Direct, Shape::ZoomIn, Shape::Invalid] {
            for g in [0u8, 1] {
                let o = RolloutOutcome::new(correct, shape);
                w.write_record([
                    (correct as u8).to_string(),
                    (o.format_valid as u8).to_string(),
                    format!("{shape:?}").to_lowercase(),
                    g.to_string(),
                    format!("{}", agar_reward(&o, g, params)),
                    format!("{}", baseline_reward(&o)),
                ])
                .expect("in-memory csv");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8 csv")
}
