//! Token-masked GRPO on tabular policies.
//!
//! For a group of `G` rollouts with per-token probability ratios `p` and
//! group-relative advantages `A_i`, the objective is
//!
//! ```text
//! J = 1/G * sum_i [ 1/|M_i| * sum_{t in M_i} min(p_t * A_i, clip(p_t, 1-eps, 1+eps) * A_i) ]
//!     - beta * KL(pi || pi_ref)
//! ```
//!
//! where `M_i` are the text positions of rollout `i` (vision and padding
//! tokens are masked out). A batch objective averages `J` over groups.
//!
//! The trainer runs this on the synthetic environment with plain gradient
//! ascent so runs are bit-reproducible.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agar::{
    group_advantages, token_mask, AdvantageParams, AgarError, RewardKind, RolloutOutcome, TokenKind,
    TokenMask,
};
use crate::derive_seed;
use crate::exec::Execution;
use crate::protocol::Shape;
use crate::synthenv::{env_step, StepResult, SynthEnv, SynthState, SynthTask, TabularAction};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("empty group")]
    EmptyGroup,
    #[error("empty batch")]
    EmptyBatch,
    #[error("rollout {0} has no trainable tokens")]
    NoTrainableTokens(usize),
    #[error("rollout {0}: ratios and mask differ in length")]
    LengthMismatch(usize),
    #[error("rollout {0}: ratios must be positive and finite")]
    BadRatio(usize),
    #[error("empty demonstrations")]
    EmptyDemonstrations,
    #[error("state/action ({0}, {1}) outside the policy table")]
    OutOfRange(usize, usize),
    #[error("objective diverged at iteration {0}")]
    Diverged(usize),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Reward(#[from] AgarError),
}

// ---------------------------------------------------------------------------
// Tabular policy
// ---------------------------------------------------------------------------

/// Softmax policy over a table of logits, one row per state.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
}

impl fmt::Debug for TabularPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TabularPolicy({}x{})", self.n_states, self.n_actions)
    }
}

impl TabularPolicy {
    /// Uniform policy.
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        assert!(n_states > 0 && n_actions > 0);
        Self {
            n_states,
            n_actions,
            logits: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_logits(n_states: usize, n_actions: usize, logits: Vec<f64>) -> Self {
        assert_eq!(logits.len(), n_states * n_actions);
        Self {
            n_states,
            n_actions,
            logits,
        }
    }

    pub fn for_env(env: &SynthEnv) -> Self {
        Self::new(env.n_states(), env.n_actions())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn row(&self, s: usize) -> &[f64] {
        &self.logits[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn probs(&self, s: usize) -> Vec<f64> {
        let row = self.row(s);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    pub fn log_probs(&self, s: usize) -> Vec<f64> {
        let row = self.row(s);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        row.iter().map(|z| z - lse).collect()
    }

    pub fn log_prob(&self, s: usize, a: usize) -> f64 {
        self.log_probs(s)[a]
    }

    pub fn sample(&self, s: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let probs = self.probs(s);
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        probs.len() - 1
    }

    pub fn greedy(&self, s: usize) -> usize {
        self.row(s)
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (a, &z)| if z > best.1 { (a, z) } else { best })
            .0
    }

    /// `KL(self(.|s) || reference(.|s))`.
    pub fn kl(&self, reference: &TabularPolicy, s: usize) -> f64 {
        let (lp, lq) = (self.log_probs(s), reference.log_probs(s));
        lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum()
    }

    /// Mean negative log-likelihood of demonstrations.
    pub fn nll(&self, demos: &[(usize, usize)]) -> f64 {
        demos.iter().map(|&(s, a)| -self.log_prob(s, a)).sum::<f64>() / demos.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Surrogate objective
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoParams {
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub group_size: usize,
}

impl Default for GrpoParams {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_beta: 0.0,
            group_size: 8,
        }
    }
}

impl GrpoParams {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(GrpoError::InvalidParams("clip_epsilon must lie in (0, 1)".into()));
        }
        if !(self.kl_beta >= 0.0) || self.group_size == 0 {
            return Err(GrpoError::InvalidParams("kl_beta >= 0 and group_size >= 1 required".into()));
        }
        Ok(())
    }
}

/// Per-token ratios of one rollout, its mask and its advantage.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTokens {
    pub ratios: Vec<f64>,
    pub mask: TokenMask,
    pub advantage: f64,
}

fn clipped_term(p: f64, adv: f64, eps: f64) -> f64 {
    (p * adv).min(p.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Group objective minus `beta * kl_term`. `clip_epsilon` is used as given,
/// so an infinite value disables clipping.
pub fn surrogate_objective(group: &[RolloutTokens], params: &GrpoParams, kl_term: f64) -> Result<f64, GrpoError> {
    if group.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    let mut total = 0.0;
    for (i, r) in group.iter().enumerate() {
        if r.ratios.len() != r.mask.len() {
            return Err(GrpoError::LengthMismatch(i));
        }
        let n = r.mask.trainable();
        if n == 0 {
            return Err(GrpoError::NoTrainableTokens(i));
        }
        let mut sum = 0.0;
        for (&p, &m) in r.ratios.iter().zip(r.mask.as_slice()) {
            if !m {
                continue;
            }
            if !(p > 0.0 && p.is_finite()) {
                return Err(GrpoError::BadRatio(i));
            }
            sum += clipped_term(p, r.advantage, params.clip_epsilon);
        }
        total += sum / n as f64;
    }
    Ok(total / group.len() as f64 - params.kl_beta * kl_term)
}

/// One token of a sampled rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TokenRecord {
    /// A decision: the state, the chosen action and its log-probability
    /// under the policy that sampled it.
    Text { state: usize, action: usize, old_log_prob: f64 },
    Vision,
    Padding,
}

impl TokenRecord {
    pub fn kind(&self) -> TokenKind {
        match self {
            TokenRecord::Text { .. } => TokenKind::Text,
            TokenRecord::Vision => TokenKind::Vision,
            TokenRecord::Padding => TokenKind::Padding,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRollout {
    pub tokens: Vec<TokenRecord>,
    pub advantage: f64,
}

impl PolicyRollout {
    fn check(&self, policy: &TabularPolicy) -> Result<(), GrpoError> {
        for t in &self.tokens {
            if let TokenRecord::Text { state, action, .. } = *t {
                if state >= policy.n_states || action >= policy.n_actions {
                    return Err(GrpoError::OutOfRange(state, action));
                }
            }
        }
        Ok(())
    }

    /// Ratios under `policy` (1 at masked positions) with the mask.
    pub fn to_tokens(&self, policy: &TabularPolicy, index: usize) -> Result<RolloutTokens, GrpoError> {
        self.check(policy)?;
        let kinds: Vec<TokenKind> = self.tokens.iter().map(TokenRecord::kind).collect();
        let mask = token_mask(&kinds).map_err(|e| match e {
            AgarError::NoTrainableTokens | AgarError::EmptyTokens => GrpoError::NoTrainableTokens(index),
            other => other.into(),
        })?;
        let ratios = self
            .tokens
            .iter()
            .map(|t| match *t {
                TokenRecord::Text { state, action, old_log_prob } => {
                    (policy.log_prob(state, action) - old_log_prob).exp()
                }
                _ => 1.0,
            })
            .collect();
        Ok(RolloutTokens {
            ratios,
            mask,
            advantage: self.advantage,
        })
    }
}

/// Mean KL to the reference over every text token in the batch.
pub fn batch_kl(policy: &TabularPolicy, reference: &TabularPolicy, batch: &[Vec<PolicyRollout>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in batch.iter().flatten() {
        for t in &r.tokens {
            if let TokenRecord::Text { state, .. } = *t {
                sum += policy.kl(reference, state);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Batch objective: mean over groups of [`surrogate_objective`], with the
/// KL term taken against `reference` when given.
pub fn batch_objective(
    policy: &TabularPolicy,
    batch: &[Vec<PolicyRollout>],
    params: &GrpoParams,
    reference: Option<&TabularPolicy>,
) -> Result<f64, GrpoError> {
    if batch.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let kl = match reference {
        Some(r) if params.kl_beta > 0.0 => batch_kl(policy, r, batch),
        _ => 0.0,
    };
    let mut total = 0.0;
    for group in batch {
        let tokens = group
            .iter()
            .enumerate()
            .map(|(i, r)| r.to_tokens(policy, i))
            .collect::<Result<Vec<_>, _>>()?;
        total += surrogate_objective(&tokens, params, kl)?;
    }
    Ok(total / batch.len() as f64)
}

/// Analytic gradient of [`batch_objective`] with respect to the logits.
///
/// A token contributes `A * p * (onehot(a) - pi(.|s))` to its state's row
/// when the unclipped branch of the min is active, and nothing on the clip
/// plateau.
pub fn surrogate_gradient(
    policy: &TabularPolicy,
    batch: &[Vec<PolicyRollout>],
    params: &GrpoParams,
    reference: Option<&TabularPolicy>,
) -> Result<Vec<f64>, GrpoError> {
    if batch.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let na = policy.n_actions;
    let mut grad = vec![0.0; policy.logits.len()];
    let eps = params.clip_epsilon;
    let n_groups = batch.len() as f64;

    for group in batch {
        if group.is_empty() {
            return Err(GrpoError::EmptyGroup);
        }
        let g = group.len() as f64;
        for (i, r) in group.iter().enumerate() {
            r.check(policy)?;
            let n = r.tokens.iter().filter(|t| matches!(t, TokenRecord::Text { .. })).count();
            if n == 0 {
                return Err(GrpoError::NoTrainableTokens(i));
            }
            let w = 1.0 / (n_groups * g * n as f64);
            for t in &r.tokens {
                let TokenRecord::Text { state, action, old_log_prob } = *t else {
                    continue;
                };
                let probs = policy.probs(state);
                let p = (probs[action].ln() - old_log_prob).exp();
                let adv = r.advantage;
                let unclipped_active = p * adv <= p.clamp(1.0 - eps, 1.0 + eps) * adv;
                if !unclipped_active {
                    continue;
                }
                let scale = w * adv * p;
                let row = &mut grad[state * na..(state + 1) * na];
                for (k, gk) in row.iter_mut().enumerate() {
                    let onehot = (k == action) as u8 as f64;
                    *gk += scale * (onehot - probs[k]);
                }
            }
        }
    }

    if let Some(reference) = reference.filter(|_| params.kl_beta > 0.0) {
        let text: Vec<usize> = batch
            .iter()
            .flatten()
            .flat_map(|r| r.tokens.iter())
            .filter_map(|t| match *t {
                TokenRecord::Text { state, .. } => Some(state),
                _ => None,
            })
            .collect();
        let w = params.kl_beta / text.len() as f64;
        for s in text {
            let lp = policy.log_probs(s);
            let lq = reference.log_probs(s);
            let kl = policy.kl(reference, s);
            for k in 0..na {
                let pk = lp[k].exp();
                grad[s * na + k] -= w * pk * (lp[k] - lq[k] - kl);
            }
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Cold start
// ---------------------------------------------------------------------------

/// Behaviour cloning by full-batch gradient descent on the mean negative
/// log-likelihood. Returns the fitted policy and the NLL before each epoch
/// followed by the final NLL.
pub fn cold_start_fit(
    policy: &TabularPolicy,
    demonstrations: &[(usize, usize)],
    epochs: usize,
    lr: f64,
) -> Result<(TabularPolicy, Vec<f64>), GrpoError> {
    if demonstrations.is_empty() {
        return Err(GrpoError::EmptyDemonstrations);
    }
    if let Some(&(s, a)) = demonstrations
        .iter()
        .find(|&&(s, a)| s >= policy.n_states || a >= policy.n_actions)
    {
        return Err(GrpoError::OutOfRange(s, a));
    }
    let mut pol = policy.clone();
    let na = pol.n_actions;
    let n = demonstrations.len() as f64;
    let mut history = Vec::with_capacity(epochs + 1);
    for _ in 0..epochs {
        history.push(pol.nll(demonstrations));
        let mut grad = vec![0.0; pol.logits.len()];
        for &(s, a) in demonstrations {
            let probs = pol.probs(s);
            for k in 0..na {
                grad[s * na + k] += (probs[k] - (k == a) as u8 as f64) / n;
            }
        }
        for (z, g) in pol.logits.iter_mut().zip(grad) {
            *z -= lr * g;
        }
    }
    history.push(pol.nll(demonstrations));
    Ok((pol, history))
}

// ---------------------------------------------------------------------------
// Rollouts on the synthetic environment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRollout {
    pub tokens: Vec<TokenRecord>,
    pub outcome: RolloutOutcome,
    pub zoom_calls: u32,
    /// Marker legible without zooming.
    pub legible_task: bool,
}

impl SynthRollout {
    pub fn direct(&self) -> bool {
        self.outcome.shape == Shape::Direct
    }
}

/// Sample one episode from `policy`. A zoom past `max_tool_calls` ends the
/// episode without an answer (invalid format).
pub fn sample_rollout(
    env: &SynthEnv,
    task: &SynthTask,
    policy: &TabularPolicy,
    max_tool_calls: u32,
    rng: &mut impl Rng,
) -> SynthRollout {
    let mut state = SynthState::default();
    let mut tokens = Vec::new();
    let legible_task = task.legible_at(0, &env.config);
    loop {
        let s = env
            .state_index(task.resolution_level, &state)
            .expect("task level is valid");
        let a = policy.sample(s, rng);
        tokens.push(TokenRecord::Text {
            state: s,
            action: a,
            old_log_prob: policy.log_prob(s, a),
        });
        let choice = TabularAction::from_index(a);
        if choice == TabularAction::Zoom && state.zoom_calls >= max_tool_calls {
            return SynthRollout {
                tokens,
                outcome: RolloutOutcome::new(false, Shape::Invalid),
                zoom_calls: state.zoom_calls,
                legible_task,
            };
        }
        let action = env.concretize(task, &state, choice, rng);
        match env_step(task, state, &action, &env.config).expect("concrete actions are well-formed") {
            StepResult::Continue(next) => {
                tokens.push(TokenRecord::Vision);
                state = next;
            }
            StepResult::Done { correct } => {
                let shape = if state.zoom_calls == 0 { Shape::Direct } else { Shape::ZoomIn };
                return SynthRollout {
                    tokens,
                    outcome: RolloutOutcome::new(correct, shape),
                    zoom_calls: state.zoom_calls,
                    legible_task,
                };
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub reward: RewardKind,
    pub grpo: GrpoParams,
    pub advantage: AdvantageParams,
    pub iterations: usize,
    pub seed: u64,
    pub tasks_per_iter: usize,
    pub lr: f64,
    /// Gradient steps per sampled batch; ratios depart from 1 after the first.
    pub update_epochs: usize,
    pub max_tool_calls: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            reward: RewardKind::default(),
            grpo: GrpoParams::default(),
            advantage: AdvantageParams::default(),
            iterations: 500,
            seed: 42,
            tasks_per_iter: 16,
            lr: 0.05,
            update_epochs: 1,
            max_tool_calls: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iter: usize,
    pub mean_reward: f64,
    pub accuracy: f64,
    pub mean_zoom_calls: f64,
    /// `None` when the iteration drew no legible task.
    pub direct_rate_legible: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: TabularPolicy,
    pub log: Vec<TrainLogEntry>,
}

pub fn log_to_jsonl(log: &[TrainLogEntry]) -> String {
    log.iter()
        .map(|e| serde_json::to_string(e).expect("log entry serializes") + "\n")
        .collect()
}

fn summarize(iter: usize, rollouts: &[SynthRollout], rewards: &[f64]) -> TrainLogEntry {
    let n = rollouts.len() as f64;
    let legible: Vec<&SynthRollout> = rollouts.iter().filter(|r| r.legible_task).collect();
    TrainLogEntry {
        iter,
        mean_reward: rewards.iter().sum::<f64>() / n,
        accuracy: rollouts.iter().filter(|r| r.outcome.correct).count() as f64 / n,
        mean_zoom_calls: rollouts.iter().map(|r| r.zoom_calls as f64).sum::<f64>() / n,
        direct_rate_legible: (!legible.is_empty())
            .then(|| legible.iter().filter(|r| r.direct()).count() as f64 / legible.len() as f64),
    }
}

/// Group-relative policy optimisation on the synthetic environment.
///
/// Each iteration draws `tasks_per_iter` tasks, samples `group_size`
/// rollouts per task from the current policy, scores them, normalises
/// rewards within each group and takes `update_epochs` ascent steps on the
/// masked clipped surrogate. Rollouts use per-rollout RNG streams derived
/// from (seed, iteration, task, rollout) and are reduced in index order, so
/// results do not depend on `exec`.
pub fn train_grpo(
    policy: &TabularPolicy,
    env: &SynthEnv,
    config: &TrainConfig,
    reference: Option<&TabularPolicy>,
    exec: Execution,
) -> Result<TrainOutcome, GrpoError> {
    config.grpo.validate()?;
    if let RewardKind::Agar(p) = &config.reward {
        p.validate()?;
    }
    if config.tasks_per_iter == 0 {
        return Err(GrpoError::InvalidParams("tasks_per_iter must be >= 1".into()));
    }
    let mut pol = policy.clone();
    let g = config.grpo.group_size;
    let mut log = Vec::with_capacity(config.iterations);

    for iter in 0..config.iterations {
        let tasks: Vec<SynthTask> = (0..config.tasks_per_iter)
            .map(|t| env.sample_task(derive_seed(config.seed, &[iter as u64, t as u64])))
            .collect();
        let old = &pol;
        let rollouts: Vec<SynthRollout> = exec.map_range(tasks.len() * g, |k| {
            let (t, i) = (k / g, k % g);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                config.seed,
                &[iter as u64, t as u64, i as u64, 0x5eed],
            ));
            sample_rollout(env, &tasks[t], old, config.max_tool_calls, &mut rng)
        });

        let mut batch = Vec::with_capacity(tasks.len());
        let mut all_rewards = Vec::with_capacity(rollouts.len());
        for group in rollouts.chunks(g) {
            let outcomes: Vec<RolloutOutcome> = group.iter().map(|r| r.outcome).collect();
            let rewards = config.reward.group_rewards(&outcomes)?;
            let advantages = group_advantages(&rewards, &config.advantage)?;
            all_rewards.extend_from_slice(&rewards);
            let width = group.iter().map(|r| r.tokens.len()).max().unwrap_or(0);
            batch.push(
                group
                    .iter()
                    .zip(advantages)
                    .map(|(r, advantage)| {
                        let mut tokens = r.tokens.clone();
                        tokens.resize(width, TokenRecord::Padding);
                        PolicyRollout { tokens, advantage }
                    })
                    .collect::<Vec<_>>(),
            );
        }

        for _ in 0..config.update_epochs {
            let grad = surrogate_gradient(&pol, &batch, &config.grpo, reference)?;
            if grad.iter().any(|x| !x.is_finite()) {
                return Err(GrpoError::Diverged(iter));
            }
            for (z, dz) in pol.logits.iter_mut().zip(&grad) {
                *z += config.lr * dz;
            }
        }
        let objective = batch_objective(&pol, &batch, &config.grpo, reference)?;
        if !objective.is_finite() || pol.logits.iter().any(|z| !z.is_finite()) {
            return Err(GrpoError::Diverged(iter));
        }
        log.push(summarize(iter, &rollouts, &all_rewards));
    }
    Ok(TrainOutcome { policy: pol, log })
}

/// Behaviour statistics of a policy on fresh tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: u32,
    pub episodes: usize,
    pub accuracy: f64,
    pub mean_zoom_calls: f64,
    pub direct_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub per_level: Vec<LevelStats>,
    /// Fraction of legible-task episodes answered without zooming.
    pub direct_rate_legible: Option<f64>,
    /// Fraction of illegible-task episodes with at least one zoom.
    pub zoom_rate_illegible: Option<f64>,
    pub accuracy: f64,
}

pub fn evaluate_policy(
    policy: &TabularPolicy,
    env: &SynthEnv,
    episodes_per_level: usize,
    max_tool_calls: u32,
    seed: u64,
    exec: Execution,
) -> PolicyEvaluation {
    let levels = env.levels.clone();
    let runs: Vec<Vec<SynthRollout>> = levels
        .iter()
        .map(|&level| {
            exec.map_range(episodes_per_level, |e| {
                let task_seed = derive_seed(seed, &[level as u64, e as u64]);
                let task = crate::synthenv::make_task(task_seed, level, &env.config)
                    .expect("levels come from the declared set");
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(task_seed, &[0xe7a1]));
                sample_rollout(env, &task, policy, max_tool_calls, &mut rng)
            })
        })
        .collect();
    let rate = |xs: Vec<bool>| {
        (!xs.is_empty()).then(|| xs.iter().filter(|&&b| b).count() as f64 / xs.len() as f64)
    };
    let all: Vec<&SynthRollout> = runs.iter().flatten().collect();
    PolicyEvaluation {
        per_level: levels
            .iter()
            .zip(&runs)
            .map(|(&level, rs)| {
                let n = rs.len().max(1) as f64;
                LevelStats {
                    level,
                    episodes: rs.len(),
                    accuracy: rs.iter().filter(|r| r.outcome.correct).count() as f64 / n,
                    mean_zoom_calls: rs.iter().map(|r| r.zoom_calls as f64).sum::<f64>() / n,
                    direct_rate: rs.iter().filter(|r| r.direct()).count() as f64 / n,
                }
            })
            .collect(),
        direct_rate_legible: rate(all.iter().filter(|r| r.legible_task).map(|r| r.direct()).collect()),
        zoom_rate_illegible: rate(
            all.iter()
                .filter(|r| !r.legible_task)
                .map(|r| r.zoom_calls > 0)
                .collect(),
        ),
        accuracy: all.iter().filter(|r| r.outcome.correct).count() as f64 / all.len().max(1) as f64,
    }
}

/// Expert demonstrations from `n_tasks` seeded tasks.
pub fn expert_demonstrations(env: &SynthEnv, n_tasks: usize, seed: u64) -> Vec<(usize, usize)> {
    (0..n_tasks)
        .flat_map(|t| {
            let task = env.sample_task(derive_seed(seed, &[t as u64, 0xde70]));
            env.expert_demonstrations(&task)
        })
        .collect()
}
