//! The policy interface: given the query, root image and the history so
//! far, produce the next raw model turn.

use std::collections::HashMap;

use crate::trajectory::{ImageRef, StepRecord};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("script exhausted after {0} turns")]
    ScriptExhausted(usize),
    #[error("no script for `{0}`")]
    NoScript(String),
    #[error("policy failure: {0}")]
    Failed(String),
}

/// Everything a policy may condition on for one turn.
#[derive(Debug, Clone, Copy)]
pub struct TurnContext<'a> {
    pub query: &'a str,
    pub image: &'a ImageRef,
    pub history: &'a [StepRecord],
    /// 0-based index of the turn within the episode.
    pub turn: usize,
    /// Per-episode seed for stochastic policies.
    pub seed: u64,
}

pub trait Policy: Send + Sync {
    fn next_turn(&self, ctx: &TurnContext<'_>) -> Result<String, PolicyError>;

    /// Whether turns of different episodes may be requested concurrently.
    fn concurrent_turns(&self) -> bool {
        true
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn next_turn(&self, ctx: &TurnContext<'_>) -> Result<String, PolicyError> {
        (**self).next_turn(ctx)
    }

    fn concurrent_turns(&self) -> bool {
        (**self).concurrent_turns()
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn next_turn(&self, ctx: &TurnContext<'_>) -> Result<String, PolicyError> {
        (**self).next_turn(ctx)
    }

    fn concurrent_turns(&self) -> bool {
        (**self).concurrent_turns()
    }
}

/// Returns the k-th script entry on the k-th turn.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    script: Vec<String>,
}

impl ScriptedPolicy {
    pub fn new<S: Into<String>>(script: impl IntoIterator<Item = S>) -> Result<Self, PolicyError> {
        let script: Vec<String> = script.into_iter().map(Into::into).collect();
        if script.is_empty() {
            return Err(PolicyError::Failed("empty script".into()));
        }
        Ok(Self { script })
    }

    pub fn script(&self) -> &[String] {
        &self.script
    }
}

impl Policy for ScriptedPolicy {
    fn next_turn(&self, ctx: &TurnContext<'_>) -> Result<String, PolicyError> {
        self.script
            .get(ctx.turn)
            .cloned()
            .ok_or(PolicyError::ScriptExhausted(self.script.len()))
    }
}

/// One script per image id, with an optional fallback.
#[derive(Debug, Clone, Default)]
pub struct ScriptBook {
    by_image: HashMap<String, ScriptedPolicy>,
    fallback: Option<ScriptedPolicy>,
}

impl ScriptBook {
    pub fn new(by_image: HashMap<String, ScriptedPolicy>, fallback: Option<ScriptedPolicy>) -> Self {
        Self { by_image, fallback }
    }
}

impl Policy for ScriptBook {
    fn next_turn(&self, ctx: &TurnContext<'_>) -> Result<String, PolicyError> {
        self.by_image
            .get(ctx.image.id())
            .or(self.fallback.as_ref())
            .ok_or_else(|| PolicyError::NoScript(ctx.image.id().to_string()))?
            .next_turn(ctx)
    }
}
