#![allow(dead_code)]

pub mod oracle;

use eager_core::representation::{FeaturizerConfig, ModelConfig, RepresentationModel};
use eager_core::trace::{AgentSegment, ReasoningStep, StepKind};
use eager_core::training::{BatchGroup, BatchTrace, TrainingBatch};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "plan", "query", "metric", "trace", "error", "retry", "code", "patch", "file", "test",
    "latency", "service", "span", "log", "cpu", "memory", "fix", "check", "result", "answer",
];
const ROLES: &[&str] = &["planner", "executor", "verifier"];
const KINDS: &[StepKind] = &[
    StepKind::Thought,
    StepKind::ToolCall,
    StepKind::ToolResult,
    StepKind::Message,
    StepKind::FinalAnswer,
];

/// d=4, h=6, V=32 model with non-zero biases.
pub fn tiny_model(seed: u64) -> RepresentationModel {
    let mut m = RepresentationModel::init(
        ModelConfig {
            embed_dim: 4,
            hidden_dim: 6,
            trace_hidden_dim: 6,
            seed,
        },
        FeaturizerConfig { vocab_buckets: 32 },
    )
    .unwrap();
    // token rows large enough for a well-conditioned forward pass
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for t in m.params.tensors_mut() {
        for x in t.iter_mut() {
            *x += rng.gen_range(-0.5..0.5);
        }
    }
    m
}

pub fn random_segment(rng: &mut ChaCha8Rng, role: &str, ordinal: u32, start: u32) -> AgentSegment {
    let n_steps = rng.gen_range(1..=3);
    let steps = (0..n_steps)
        .map(|i| {
            let n_words = rng.gen_range(1..=5);
            let text = (0..n_words)
                .map(|_| *WORDS.choose(rng).unwrap())
                .collect::<Vec<_>>()
                .join(" ");
            ReasoningStep {
                index: start + i,
                agent_role: role.to_string(),
                kind: *KINDS.choose(rng).unwrap(),
                text,
                timestamp_ms: 0,
            }
        })
        .collect();
    AgentSegment {
        agent_role: role.to_string(),
        steps,
        segment_ordinal: ordinal,
    }
}

/// Random batch: `groups` base questions, 2..=3 variants each, 1..=4
/// segments per trace with roles drawn from a small pool.
pub fn random_batch(seed: u64, groups: usize) -> TrainingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = (0..groups)
        .map(|g| {
            let variants = rng.gen_range(2..=3);
            let traces = (0..variants)
                .map(|v| {
                    let m = rng.gen_range(1..=4);
                    let mut start = 0;
                    let mut prev: Option<&str> = None;
                    let segments = (0..m)
                        .map(|s| {
                            let role = loop {
                                let r = *ROLES.choose(&mut rng).unwrap();
                                if Some(r) != prev {
                                    break r;
                                }
                            };
                            prev = Some(role);
                            let seg = random_segment(&mut rng, role, s as u32, start);
                            start += seg.steps.len() as u32;
                            seg
                        })
                        .collect();
                    BatchTrace {
                        trace_id: format!("g{g}v{v}"),
                        segments,
                    }
                })
                .collect();
            BatchGroup {
                base_question_id: format!("g{g}"),
                traces,
            }
        })
        .collect();
    TrainingBatch { groups }
}

pub fn oracle_view(batch: &TrainingBatch) -> oracle::OracleBatch<'_> {
    oracle::OracleBatch {
        groups: batch
            .groups
            .iter()
            .map(|g| g.traces.iter().map(|t| t.segments.as_slice()).collect())
            .collect(),
    }
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Worst relative error between the analytic gradient and central finite
/// differences over every parameter. `eval` returns `(loss, gradient)`.
/// Entries where both magnitudes are below `floor` are compared against
/// `floor` instead.
pub fn gradient_check<F>(model: &RepresentationModel, step: f64, floor: f64, eval: F) -> f64
where
    F: Fn(&RepresentationModel) -> (f64, eager_core::representation::Params),
{
    let (_, analytic) = eval(model);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..model.params.len() {
        let x = model.params.get_flat(i);
        probe.params.set_flat(i, x + step);
        let up = eval(&probe).0;
        probe.params.set_flat(i, x - step);
        let down = eval(&probe).0;
        probe.params.set_flat(i, x);
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.get_flat(i);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}
