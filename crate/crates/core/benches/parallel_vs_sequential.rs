//! Sequential vs data-parallel execution of the three fan-out workloads:
//! GRPO rollout sampling, manifest evaluation and answerability probing.
//!
//! Build with `--no-default-features` to confirm the fallback path: both
//! variants then run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use focusloop_core::agar::DefaultMatcher;
use focusloop_core::dataforge::{forge_synth_corpus, SynthForgeConfig};
use focusloop_core::exec::Execution;
use focusloop_core::grpo::{train_grpo, TabularPolicy, TrainConfig};
use focusloop_core::harness::{run_manifest, synth_manifest, EvalOptions};
use focusloop_core::synthenv::agent::SynthAgent;
use focusloop_core::synthenv::{SynthEnv, RESOLUTION_LEVELS};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn grpo_rollouts(c: &mut Criterion) {
    let env = SynthEnv::default();
    let policy = TabularPolicy::for_env(&env);
    let cfg = TrainConfig {
        iterations: 5,
        tasks_per_iter: 64,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train_grpo");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| train_grpo(black_box(&policy), &env, &cfg, None, exec).unwrap())
        });
    }
    group.finish();
}

fn manifest_eval(c: &mut Criterion) {
    let env = SynthEnv::default();
    let manifest = synth_manifest(&env.config, &RESOLUTION_LEVELS, 64, 7, None).unwrap();
    let agent = SynthAgent::new(env.clone(), TabularPolicy::for_env(&env));
    let mut group = c.benchmark_group("run_manifest");
    for (name, exec) in MODES {
        let opts = EvalOptions {
            execution: exec,
            ..EvalOptions::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, opts| {
            b.iter(|| run_manifest(&agent, black_box(&manifest), opts, &DefaultMatcher).unwrap())
        });
    }
    group.finish();
}

fn forge(c: &mut Criterion) {
    let cfg = SynthForgeConfig {
        sources: 64,
        ..SynthForgeConfig::default()
    };
    let mut group = c.benchmark_group("forge_synth_corpus");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| forge_synth_corpus(black_box(&cfg), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, grpo_rollouts, manifest_eval, forge);
criterion_main!(benches);
