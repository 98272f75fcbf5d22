//! Adaptive zoom-in visual reasoning.
//!
//! A policy reasons in text and may ask for a region of the image to be
//! cropped and enlarged before answering. This crate holds the pieces
//! needed to run, reward, train and evaluate such policies:
//!
//! - [`trajectory`]: images, regions, coordinate frames, steps, token ledgers
//! - [`protocol`]: the `<think>` / `<tool_call>` / `<answer>` output grammar
//! - [`focus`]: the interactive crop-and-zoom episode loop
//! - [`policy`]: the policy interface and scripted policies
//! - [`agar`]: the group-aware reward, group-relative advantages, token masks
//! - [`grpo`]: masked clipped surrogate, its gradient, cold start and trainer
//! - [`synthenv`]: a multi-resolution visual-search environment
//! - [`dataforge`]: answerability probing, the search agent, SFT corpus building
//! - [`harness`]: manifest evaluation, efficiency metrics, resolution sweeps

pub mod agar;
pub mod dataforge;
pub mod exec;
pub mod focus;
pub mod grpo;
pub mod harness;
pub mod policy;
pub mod protocol;
pub mod synthenv;
pub mod trajectory;

use serde::{Deserialize, Serialize};

/// Strict mode rejects anything off-grammar; lenient mode repairs what it can
/// and records a warning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Strict,
    Lenient,
}

/// Derive an independent 64-bit stream seed from a base seed and a path of
/// indices (splitmix64 mixing).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Stable seed for a string key.
pub fn seed_for_key(base: u64, key: &str) -> u64 {
    // FNV-1a; stable across platforms and releases, unlike DefaultHasher.
    let h = key
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    derive_seed(base, &[h])
}
