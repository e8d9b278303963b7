//! Step-wise failure detection.
//!
//! Each completed agent segment is embedded and matched against fine-grained
//! knowledge of the same role; once the trace is complete its trace embedding
//! is matched against coarse-grained knowledge.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::{KnowledgeBase, KnowledgeError, Match, Tier};
use crate::representation::{Embedding, RepresentationError, RepresentationModel};
use crate::trace::{segment_by_agent, AgentSegment, FailureType, ReasoningTrace, TraceError};

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("invalid detection config: {0}")]
    InvalidConfig(String),
    #[error("segment ordinal {found} received, expected {expected}")]
    OrdinalGap { expected: u32, found: u32 },
    #[error("segment role {found:?} does not match its steps")]
    MalformedSegment { found: String },
    #[error("session {trace_id} is {state:?}, not open")]
    NotOpen {
        trace_id: String,
        state: SessionState,
    },
    #[error("session {0} has no segments")]
    EmptySession(String),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub theta_fine: f64,
    pub theta_coarse: f64,
    pub k_neighbors: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            theta_fine: 0.85,
            theta_coarse: 0.80,
            k_neighbors: 5,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<(), DetectionError> {
        for (name, t) in [
            ("theta_fine", self.theta_fine),
            ("theta_coarse", self.theta_coarse),
        ] {
            if !(t > -1.0 && t <= 1.0) {
                return Err(DetectionError::InvalidConfig(format!(
                    "{name} = {t} outside (-1, 1]"
                )));
            }
        }
        if self.k_neighbors == 0 {
            return Err(DetectionError::InvalidConfig(
                "k_neighbors must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Agent,
    Trace,
}

impl Scope {
    pub fn tier(self) -> Tier {
        match self {
            Scope::Agent => Tier::Fine,
            Scope::Trace => Tier::Coarse,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub trace_id: String,
    pub scope: Scope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_ordinal: Option<u32>,
    pub anomalous: bool,
    pub matches: Vec<Match>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<FailureType>,
    pub confidence: f64,
    pub latency_us: u64,
}

/// Equality on the decision content; `latency_us` is wall-clock and ignored.
impl PartialEq for DetectionVerdict {
    fn eq(&self, other: &Self) -> bool {
        self.trace_id == other.trace_id
            && self.scope == other.scope
            && self.agent_role == other.agent_role
            && self.segment_ordinal == other.segment_ordinal
            && self.anomalous == other.anomalous
            && self.matches == other.matches
            && self.diagnosis == other.diagnosis
            && self.confidence == other.confidence
    }
}

impl DetectionVerdict {
    pub fn threshold(&self, cfg: &DetectionConfig) -> f64 {
        match self.scope {
            Scope::Agent => cfg.theta_fine,
            Scope::Trace => cfg.theta_coarse,
        }
    }
}

/// Majority failure type among `matches` at or above `theta`.
///
/// Ties between types go to the type of the highest-similarity match among
/// the tied types, and then to the lowest entry id. `matches` must be in
/// retrieval order (descending similarity, ascending id). Matches whose
/// entry is missing from `label_of` are ignored.
pub fn majority_diagnosis(
    matches: &[Match],
    theta: f64,
    label_of: impl Fn(u64) -> Option<FailureType>,
) -> Option<FailureType> {
    let above: Vec<(Match, FailureType)> = matches
        .iter()
        .filter(|m| m.similarity >= theta)
        .filter_map(|m| label_of(m.entry_id).map(|t| (*m, t)))
        .collect();
    let mut counts: BTreeMap<FailureType, usize> = BTreeMap::new();
    for (_, t) in &above {
        *counts.entry(*t).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    above
        .iter()
        .find(|(_, t)| counts[t] == best)
        .map(|(_, t)| *t)
}

fn elapsed_us(start: Instant) -> u64 {
    (start.elapsed().as_nanos().div_ceil(1000) as u64).max(1)
}

fn decide(
    trace_id: &str,
    scope: Scope,
    agent_role: Option<String>,
    segment_ordinal: Option<u32>,
    matches: Vec<Match>,
    kb: &KnowledgeBase,
    theta: f64,
    start: Instant,
) -> DetectionVerdict {
    let top = matches.first().map(|m| m.similarity);
    let anomalous = top.is_some_and(|s| s >= theta);
    let diagnosis = if anomalous {
        majority_diagnosis(&matches, theta, |id| kb.failure_type_of(scope.tier(), id))
    } else {
        None
    };
    let latency_us = elapsed_us(start);
    DetectionVerdict {
        trace_id: trace_id.to_string(),
        scope,
        agent_role,
        segment_ordinal,
        anomalous,
        matches,
        diagnosis,
        confidence: top.unwrap_or(0.0).clamp(0.0, 1.0),
        latency_us,
    }
}

/// Embeds one segment and matches it against fine-grained knowledge. Does
/// not touch any session.
pub fn check_segment(
    trace_id: &str,
    segment: &AgentSegment,
    model: &RepresentationModel,
    kb: &KnowledgeBase,
    cfg: &DetectionConfig,
) -> Result<(Embedding, DetectionVerdict), DetectionError> {
    if segment.steps.is_empty()
        || segment
            .steps
            .iter()
            .any(|s| s.agent_role != segment.agent_role)
    {
        return Err(DetectionError::MalformedSegment {
            found: segment.agent_role.clone(),
        });
    }
    let start = Instant::now();
    let embedding = model.encode_segment(segment)?;
    let matches = kb.query_fine(
        &embedding,
        &segment.agent_role,
        cfg.k_neighbors,
        model.version,
    )?;
    let verdict = decide(
        trace_id,
        Scope::Agent,
        Some(segment.agent_role.clone()),
        Some(segment.segment_ordinal),
        matches,
        kb,
        cfg.theta_fine,
        start,
    );
    Ok((embedding, verdict))
}

/// Encodes a trace from its segment embeddings and matches it against
/// coarse-grained knowledge.
pub fn check_trace(
    trace_id: &str,
    segment_embeddings: &[Embedding],
    model: &RepresentationModel,
    kb: &KnowledgeBase,
    cfg: &DetectionConfig,
) -> Result<(Embedding, DetectionVerdict), DetectionError> {
    if segment_embeddings.is_empty() {
        return Err(DetectionError::EmptySession(trace_id.to_string()));
    }
    let start = Instant::now();
    let embedding = model.encode_trace(segment_embeddings)?;
    let matches = kb.query_coarse(&embedding, cfg.k_neighbors, model.version)?;
    let verdict = decide(
        trace_id,
        Scope::Trace,
        None,
        None,
        matches,
        kb,
        cfg.theta_coarse,
        start,
    );
    Ok((embedding, verdict))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Open,
    Mitigating,
    Finalized,
}

/// Online bookkeeping for one trace being detected segment by segment.
#[derive(Debug, Clone, Serialize)]
pub struct TraceSession {
    trace_id: String,
    segments: Vec<AgentSegment>,
    #[serde(skip)]
    embeddings: Vec<Embedding>,
    verdicts: Vec<DetectionVerdict>,
    trace_verdict: Option<DetectionVerdict>,
    state: SessionState,
}

impl TraceSession {
    pub fn new(trace_id: impl Into<String>) -> Self {
        Self {
            trace_id: trace_id.into(),
            segments: Vec::new(),
            embeddings: Vec::new(),
            verdicts: Vec::new(),
            trace_verdict: None,
            state: SessionState::Open,
        }
    }

    pub fn trace_id(&self) -> &str {
        &self.trace_id
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn segments(&self) -> &[AgentSegment] {
        &self.segments
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    /// Per-segment verdicts, in ordinal order.
    pub fn verdicts(&self) -> &[DetectionVerdict] {
        &self.verdicts
    }

    pub fn trace_verdict(&self) -> Option<&DetectionVerdict> {
        self.trace_verdict.as_ref()
    }

    pub fn next_ordinal(&self) -> u32 {
        self.segments.len() as u32
    }

    fn require(&self, state: SessionState) -> Result<(), DetectionError> {
        if self.state != state {
            return Err(DetectionError::NotOpen {
                trace_id: self.trace_id.clone(),
                state: self.state,
            });
        }
        Ok(())
    }

    /// Swaps in a recovered segment after successful mitigation so later
    /// trace-level encoding reflects the recovered reasoning.
    pub fn replace_segment(
        &mut self,
        segment: AgentSegment,
        embedding: Embedding,
        verdict: DetectionVerdict,
    ) -> Result<(), DetectionError> {
        let i = segment.segment_ordinal as usize;
        if i >= self.segments.len() {
            return Err(DetectionError::OrdinalGap {
                expected: self.next_ordinal(),
                found: segment.segment_ordinal,
            });
        }
        self.segments[i] = segment;
        self.embeddings[i] = embedding;
        self.verdicts[i] = verdict;
        Ok(())
    }

    pub fn begin_mitigation(&mut self) {
        self.state = SessionState::Mitigating;
    }

    /// Leaves the mitigating state: back to open while segments are still
    /// arriving, finalized once a trace verdict exists.
    pub fn end_mitigation(&mut self) {
        self.state = if self.trace_verdict.is_some() {
            SessionState::Finalized
        } else {
            SessionState::Open
        };
    }

    /// The whole trace as seen by the session (segments flattened in order).
    pub fn to_trace(&self) -> ReasoningTrace {
        ReasoningTrace {
            trace_id: self.trace_id.clone(),
            question: String::new(),
            base_question_id: None,
            variant_id: None,
            system_profile: Default::default(),
            steps: self
                .segments
                .iter()
                .flat_map(|s| s.steps.iter().cloned())
                .collect(),
            final_answer: None,
            label: None,
        }
    }
}

/// Checks a completed segment, caches its embedding and verdict.
pub fn on_segment_complete(
    session: &mut TraceSession,
    segment: AgentSegment,
    model: &RepresentationModel,
    kb: &KnowledgeBase,
    cfg: &DetectionConfig,
) -> Result<DetectionVerdict, DetectionError> {
    session.require(SessionState::Open)?;
    if segment.segment_ordinal != session.next_ordinal() {
        return Err(DetectionError::OrdinalGap {
            expected: session.next_ordinal(),
            found: segment.segment_ordinal,
        });
    }
    let (embedding, verdict) = check_segment(&session.trace_id, &segment, model, kb, cfg)?;
    session.segments.push(segment);
    session.embeddings.push(embedding);
    session.verdicts.push(verdict.clone());
    Ok(verdict)
}

/// Trace-level check over the cached segment embeddings. The session moves
/// to `Mitigating` when the verdict is anomalous and `mitigation_enabled`,
/// otherwise to `Finalized`.
pub fn on_trace_finalize(
    session: &mut TraceSession,
    model: &RepresentationModel,
    kb: &KnowledgeBase,
    cfg: &DetectionConfig,
    mitigation_enabled: bool,
) -> Result<DetectionVerdict, DetectionError> {
    session.require(SessionState::Open)?;
    let (_, verdict) = check_trace(&session.trace_id, &session.embeddings, model, kb, cfg)?;
    session.trace_verdict = Some(verdict.clone());
    session.state = if verdict.anomalous && mitigation_enabled {
        SessionState::Mitigating
    } else {
        SessionState::Finalized
    };
    Ok(verdict)
}

/// Verdicts of one trace: one per segment in order, then the trace verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceVerdicts {
    pub trace_id: String,
    pub verdicts: Vec<DetectionVerdict>,
}

impl TraceVerdicts {
    pub fn segment_verdicts(&self) -> &[DetectionVerdict] {
        &self.verdicts[..self.verdicts.len() - 1]
    }

    pub fn trace_verdict(&self) -> &DetectionVerdict {
        self.verdicts.last().expect("at least the trace verdict")
    }

    /// True when any verdict of the trace is anomalous.
    pub fn anomalous(&self) -> bool {
        self.verdicts.iter().any(|v| v.anomalous)
    }

    /// Diagnosis of the earliest anomalous segment, else of the trace verdict.
    pub fn diagnosis(&self) -> Option<FailureType> {
        self.segment_verdicts()
            .iter()
            .find(|v| v.anomalous)
            .or(Some(self.trace_verdict()).filter(|v| v.anomalous))
            .and_then(|v| v.diagnosis)
    }
}

/// Replays one trace through the online path in a fresh session, leaving
/// the session finalized.
pub fn replay_session(
    trace: &ReasoningTrace,
    model: &RepresentationModel,
    kb: &KnowledgeBase,
    cfg: &DetectionConfig,
) -> Result<(TraceSession, TraceVerdicts), DetectionError> {
    let mut session = TraceSession::new(trace.trace_id.clone());
    let mut verdicts = Vec::new();
    for segment in segment_by_agent(trace)? {
        verdicts.push(on_segment_complete(&mut session, segment, model, kb, cfg)?);
    }
    verdicts.push(on_trace_finalize(&mut session, model, kb, cfg, false)?);
    let tv = TraceVerdicts {
        trace_id: trace.trace_id.clone(),
        verdicts,
    };
    Ok((session, tv))
}

pub fn detect_trace(
    trace: &ReasoningTrace,
    model: &RepresentationModel,
    kb: &KnowledgeBase,
    cfg: &DetectionConfig,
) -> Result<TraceVerdicts, DetectionError> {
    replay_session(trace, model, kb, cfg).map(|(_, tv)| tv)
}

/// Offline detection: every trace replayed through the online path, output
/// in input order.
pub fn detect_batch(
    traces: &[ReasoningTrace],
    model: &RepresentationModel,
    kb: &KnowledgeBase,
    cfg: &DetectionConfig,
) -> Result<Vec<TraceVerdicts>, DetectionError> {
    cfg.validate()?;
    traces
        .iter()
        .map(|t| detect_trace(t, model, kb, cfg))
        .collect()
}
