use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{TrainConfig, TrainError};
use crate::trace::{segment_by_agent, AgentSegment, ReasoningTrace};

/// One trace of a batch with its agent segments pre-computed.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTrace {
    pub trace_id: String,
    pub segments: Vec<AgentSegment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGroup {
    pub base_question_id: String,
    pub traces: Vec<BatchTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub groups: Vec<BatchGroup>,
}

impl TrainingBatch {
    pub fn trace_count(&self) -> usize {
        self.groups.iter().map(|g| g.traces.len()).sum()
    }

    /// Traces in batch order paired with their group index.
    pub fn traces(&self) -> impl Iterator<Item = (usize, &BatchTrace)> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(g, group)| group.traces.iter().map(move |t| (g, t)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batches: Vec<TrainingBatch>,
    /// Groups dropped for having fewer than two variants.
    pub dropped_groups: usize,
}

/// Groups the corpus by base question, drops singleton groups, shuffles the
/// groups with `cfg.seed` and chunks them into batches of `cfg.batch_groups`.
/// A trailing chunk with a single group is merged into the previous batch.
pub fn build_batches(
    corpus: &[ReasoningTrace],
    cfg: &TrainConfig,
) -> Result<BatchPlan, TrainError> {
    cfg.validate()?;
    let mut by_base: BTreeMap<&str, Vec<BatchTrace>> = BTreeMap::new();
    for trace in corpus {
        let base = trace
            .base_question_id
            .as_deref()
            .ok_or_else(|| TrainError::MissingBaseQuestion(trace.trace_id.clone()))?;
        by_base.entry(base).or_default().push(BatchTrace {
            trace_id: trace.trace_id.clone(),
            segments: segment_by_agent(trace)?,
        });
    }
    let total = by_base.len();
    let mut groups: Vec<BatchGroup> = by_base
        .into_iter()
        .filter(|(_, traces)| traces.len() >= 2)
        .map(|(base, traces)| BatchGroup {
            base_question_id: base.to_string(),
            traces,
        })
        .collect();
    let dropped_groups = total - groups.len();
    if dropped_groups > 0 {
        tracing::warn!(
            dropped_groups,
            "dropped base-question groups with a single variant"
        );
    }
    if groups.len() < 2 {
        return Err(TrainError::InsufficientGroups {
            usable: groups.len(),
        });
    }
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let mut batches: Vec<TrainingBatch> = Vec::new();
    let mut iter = groups.into_iter().peekable();
    while iter.peek().is_some() {
        let chunk: Vec<BatchGroup> = iter.by_ref().take(cfg.batch_groups).collect();
        match batches.last_mut() {
            Some(last) if chunk.len() < 2 => last.groups.extend(chunk),
            _ => batches.push(TrainingBatch { groups: chunk }),
        }
    }
    Ok(BatchPlan {
        batches,
        dropped_groups,
    })
}
