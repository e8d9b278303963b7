//! In-process agent runtime that replays generated traces.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::generator::GeneratedTrace;
use crate::mitigation::{AgentRuntime, RuntimeError};
use crate::representation::fnv1a64;
use crate::trace::{segment_by_agent, AgentSegment, ReasoningTrace};

/// How a scripted runtime decides whether an attempt comes back clean.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptPolicy {
    /// Clean with probability `p`, drawn from a stream keyed by
    /// `(seed, trace id, attempt)` so replays are identical.
    Bernoulli { p: f64, seed: u64 },
    /// Attempt `n` is clean iff `schedule[n - 1]`; attempts past the end are faulty.
    Schedule(Vec<bool>),
}

/// Answers re-invocations with the clean counterfactual segment or the
/// original faulty one, and replans with the clean or faulty trace.
///
/// Trace ids of the form `<source>@<trial>` resolve to `<source>`, so one
/// generated trace can back many independent trials.
pub struct ScriptedRuntime {
    sources: HashMap<String, GeneratedTrace>,
    policy: ScriptPolicy,
}

impl ScriptedRuntime {
    pub fn new(corpus: &[GeneratedTrace], policy: ScriptPolicy) -> Self {
        Self {
            sources: corpus
                .iter()
                .map(|g| (g.trace.trace_id.clone(), g.clone()))
                .collect(),
            policy,
        }
    }

    fn source(&self, trace_id: &str) -> Result<&GeneratedTrace, RuntimeError> {
        let key = trace_id.split_once('@').map_or(trace_id, |(s, _)| s);
        self.sources
            .get(key)
            .ok_or_else(|| RuntimeError(format!("unknown trace {trace_id}")))
    }

    pub fn is_clean(&self, trace_id: &str, attempt: u32) -> bool {
        match &self.policy {
            ScriptPolicy::Bernoulli { p, seed } => {
                let key = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    ^ fnv1a64(trace_id)
                    ^ (attempt as u64).wrapping_mul(0xd1b5_4a32_d192_ed03);
                ChaCha8Rng::seed_from_u64(key).gen::<f64>() < *p
            }
            ScriptPolicy::Schedule(s) => attempt
                .checked_sub(1)
                .and_then(|i| s.get(i as usize))
                .copied()
                .unwrap_or(false),
        }
    }

    fn pick(&self, trace_id: &str, attempt: u32) -> Result<ReasoningTrace, RuntimeError> {
        let g = self.source(trace_id)?;
        let mut t = if self.is_clean(trace_id, attempt) {
            g.clean.clone()
        } else {
            g.trace.clone()
        };
        t.trace_id = trace_id.to_string();
        Ok(t)
    }
}

impl AgentRuntime for ScriptedRuntime {
    fn reinvoke_agent(
        &self,
        trace_id: &str,
        agent_role: &str,
        segment_ordinal: u32,
        _reflection_context: &str,
        attempt: u32,
    ) -> Result<AgentSegment, RuntimeError> {
        let trace = self.pick(trace_id, attempt)?;
        let segments = segment_by_agent(&trace).map_err(|e| RuntimeError(e.to_string()))?;
        segments
            .into_iter()
            .nth(segment_ordinal as usize)
            .filter(|s| s.agent_role == agent_role)
            .ok_or_else(|| {
                RuntimeError(format!(
                    "{trace_id} has no {agent_role} segment #{segment_ordinal}"
                ))
            })
    }

    fn replan(
        &self,
        trace_id: &str,
        _replan_context: &str,
        attempt: u32,
    ) -> Result<ReasoningTrace, RuntimeError> {
        self.pick(trace_id, attempt)
    }
}
