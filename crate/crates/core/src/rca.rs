//! Root-cause analysis, the expert review queue and knowledge enrichment.
//!
//! Failed traces enter the [`ReviewQueue`] (user-reported or unresolved by
//! mitigation). An [`RcaAnalyzer`] proposes a finding; an expert confirms or
//! corrects it with an [`ExpertVerdict`], and [`ingest_verdict`] turns the
//! verdict into new knowledge entries.

use std::collections::HashMap;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::DetectionConfig;
use crate::knowledge::{
    CoarseGrainedEntry, FineGrainedEntry, KnowledgeBase, KnowledgeError, Match, Provenance,
};
use crate::representation::{Embedding, RepresentationError, RepresentationModel};
use crate::trace::{segment_by_agent, FailureType, ReasoningTrace, TraceError};

#[derive(Debug, Error)]
pub enum RcaError {
    #[error("analyzer {analyzer_id} failed: {message}")]
    Analyzer {
        analyzer_id: String,
        message: String,
    },
    #[error("trace {0} is not queued for review")]
    NotQueued(String),
    #[error("invalid verdict: {0}")]
    InvalidVerdict(String),
    #[error("a different verdict was already ingested under this idempotence key")]
    ConflictingVerdict(IngestReceipt),
    #[error("culprit {role:?} #{ordinal} is not a segment of trace {trace_id}")]
    InvalidCulprit {
        trace_id: String,
        role: String,
        ordinal: u32,
    },
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Machine-proposed root cause: who failed, where, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcaFinding {
    pub trace_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub culprit_agent_role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub culprit_segment_ordinal: Option<u32>,
    pub failure_type: FailureType,
    #[serde(default)]
    pub evidence: Vec<Match>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub rationale: String,
    pub analyzer_id: String,
}

impl RcaFinding {
    pub fn culprit(&self) -> Option<(&str, u32)> {
        Some((
            self.culprit_agent_role.as_deref()?,
            self.culprit_segment_ordinal?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertVerdict {
    pub trace_id: String,
    pub confirmed: bool,
    #[serde(default)]
    pub corrected_agent_role: Option<String>,
    #[serde(default)]
    pub corrected_segment_ordinal: Option<u32>,
    pub failure_type: FailureType,
    #[serde(default)]
    pub note: String,
    pub reviewer: String,
    pub reviewed_at_ms: i64,
}

impl ExpertVerdict {
    pub fn idempotence_key(&self) -> (String, String, i64) {
        (
            self.trace_id.clone(),
            self.reviewer.clone(),
            self.reviewed_at_ms,
        )
    }

    /// A rejection must change something relative to the finding.
    pub fn validate(&self, finding: Option<&RcaFinding>) -> Result<(), RcaError> {
        if self.corrected_agent_role.is_some() != self.corrected_segment_ordinal.is_some() {
            return Err(RcaError::InvalidVerdict(
                "corrected_agent_role and corrected_segment_ordinal go together".into(),
            ));
        }
        if !self.confirmed {
            let corrected = self.corrected_agent_role.is_some();
            let retyped = finding.is_none_or(|f| f.failure_type != self.failure_type);
            if !corrected && !retyped {
                return Err(RcaError::InvalidVerdict(
                    "rejection must correct the culprit or the failure type".into(),
                ));
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ queue

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewTrigger {
    UserReported,
    MitigationUnresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub trace_id: String,
    pub trigger: ReviewTrigger,
    /// Enqueue sequence number; FIFO order.
    pub seq: u64,
    pub enqueued_at_ms: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finding: Option<RcaFinding>,
}

/// Knowledge entries created by one ingested verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReceipt {
    pub fine_ids: Vec<u64>,
    pub coarse_ids: Vec<u64>,
    /// True when this verdict had been ingested before and nothing was added.
    pub replayed: bool,
}

#[derive(Debug, Default)]
struct QueueState {
    items: Vec<ReviewItem>,
    next_seq: u64,
    receipts: HashMap<(String, String, i64), (ExpertVerdict, IngestReceipt)>,
}

/// Thread-safe FIFO of traces awaiting expert review, unique by trace id.
#[derive(Debug, Default)]
pub struct ReviewQueue {
    state: Mutex<QueueState>,
}

impl ReviewQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the trace's queue position. Enqueuing a queued trace is a
    /// no-op returning its existing position.
    pub fn enqueue(&self, trace_id: &str, trigger: ReviewTrigger) -> usize {
        let mut st = self.state.lock();
        if let Some(pos) = st.items.iter().position(|i| i.trace_id == trace_id) {
            return pos;
        }
        let seq = st.next_seq;
        st.next_seq += 1;
        st.items.push(ReviewItem {
            trace_id: trace_id.to_string(),
            trigger,
            seq,
            enqueued_at_ms: now_ms(),
            finding: None,
        });
        st.items.len() - 1
    }

    pub fn pending(&self) -> Vec<ReviewItem> {
        self.state.lock().items.clone()
    }

    pub fn get(&self, trace_id: &str) -> Option<ReviewItem> {
        self.state
            .lock()
            .items
            .iter()
            .find(|i| i.trace_id == trace_id)
            .cloned()
    }

    pub fn contains(&self, trace_id: &str) -> bool {
        self.state
            .lock()
            .items
            .iter()
            .any(|i| i.trace_id == trace_id)
    }

    pub fn len(&self) -> usize {
        self.state.lock().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Attaches a finding to a queued trace. Returns false if not queued.
    pub fn attach_finding(&self, finding: RcaFinding) -> bool {
        let mut st = self.state.lock();
        match st.items.iter_mut().find(|i| i.trace_id == finding.trace_id) {
            Some(item) => {
                item.finding = Some(finding);
                true
            }
            None => false,
        }
    }

    /// The verdict previously ingested under `verdict`'s idempotence key,
    /// with its receipt.
    pub fn receipt(&self, verdict: &ExpertVerdict) -> Option<(ExpertVerdict, IngestReceipt)> {
        self.state
            .lock()
            .receipts
            .get(&verdict.idempotence_key())
            .cloned()
    }

    /// Removes a queued trace without ingesting anything.
    pub fn dismiss(&self, trace_id: &str) -> Option<ReviewItem> {
        let mut st = self.state.lock();
        let pos = st.items.iter().position(|i| i.trace_id == trace_id)?;
        Some(st.items.remove(pos))
    }

    fn complete(&self, verdict: &ExpertVerdict, receipt: IngestReceipt) {
        let mut st = self.state.lock();
        st.items.retain(|i| i.trace_id != verdict.trace_id);
        st.receipts
            .insert(verdict.idempotence_key(), (verdict.clone(), receipt));
    }
}

// --------------------------------------------------------------- analysis

/// A root-cause analyzer. External analyzers (judge models, tracers) plug
/// in behind this trait.
pub trait RcaAnalyzer: Send + Sync {
    fn id(&self) -> &str;
    fn analyze(
        &self,
        trace: &ReasoningTrace,
        model: &RepresentationModel,
        kb: &KnowledgeBase,
    ) -> Result<RcaFinding, String>;
}

/// Attributes the failure to the segment with the strongest fine-grained
/// match; falls back to the trace-level coarse match.
#[derive(Debug, Clone)]
pub struct NearestNeighborAnalyzer {
    pub cfg: DetectionConfig,
}

impl NearestNeighborAnalyzer {
    pub const ID: &'static str = "nearest_neighbor";

    pub fn new(cfg: DetectionConfig) -> Self {
        Self { cfg }
    }
}

impl RcaAnalyzer for NearestNeighborAnalyzer {
    fn id(&self) -> &str {
        Self::ID
    }

    fn analyze(
        &self,
        trace: &ReasoningTrace,
        model: &RepresentationModel,
        kb: &KnowledgeBase,
    ) -> Result<RcaFinding, String> {
        let err = |e: &dyn std::fmt::Display| e.to_string();
        let segments = segment_by_agent(trace).map_err(|e| err(&e))?;
        let mut zs = Vec::with_capacity(segments.len());
        let mut best: Option<(usize, Vec<Match>)> = None;
        for (i, seg) in segments.iter().enumerate() {
            let z = model.encode_segment(seg).map_err(|e| err(&e))?;
            let matches = kb
                .query_fine(&z, &seg.agent_role, self.cfg.k_neighbors, model.version)
                .map_err(|e| err(&e))?;
            zs.push(z);
            let Some(top) = matches.first().map(|m| m.similarity) else {
                continue;
            };
            let better = match &best {
                None => true,
                Some((_, b)) => top > b[0].similarity,
            };
            if top >= self.cfg.theta_fine && better {
                best = Some((i, matches));
            }
        }
        let mut finding = RcaFinding {
            trace_id: trace.trace_id.clone(),
            culprit_agent_role: None,
            culprit_segment_ordinal: None,
            failure_type: FailureType::Unknown,
            evidence: Vec::new(),
            rationale: String::new(),
            analyzer_id: Self::ID.to_string(),
        };
        if let Some((i, matches)) = best {
            let seg = &segments[i];
            finding.culprit_agent_role = Some(seg.agent_role.clone());
            finding.culprit_segment_ordinal = Some(seg.segment_ordinal);
            finding.failure_type = kb
                .fine_entry(matches[0].entry_id)
                .map_or(FailureType::Unknown, |e| e.failure_type);
            finding.rationale = format!(
                "segment {} ({}) matches fine-grained entry {} at {:.4}",
                seg.segment_ordinal, seg.agent_role, matches[0].entry_id, matches[0].similarity
            );
            finding.evidence = matches;
            return Ok(finding);
        }
        let zt = model.encode_trace(&zs).map_err(|e| err(&e))?;
        let matches = kb
            .query_coarse(&zt, self.cfg.k_neighbors, model.version)
            .map_err(|e| err(&e))?;
        if let Some(top) = matches
            .first()
            .filter(|m| m.similarity >= self.cfg.theta_coarse)
        {
            finding.failure_type = kb
                .coarse_entry(top.entry_id)
                .map_or(FailureType::Unknown, |e| e.failure_type);
            finding.rationale = format!(
                "trace matches coarse-grained entry {} at {:.4}",
                top.entry_id, top.similarity
            );
            finding.evidence = matches;
        } else {
            finding.rationale = "no knowledge above threshold".into();
        }
        Ok(finding)
    }
}

pub fn run_rca(
    trace: &ReasoningTrace,
    model: &RepresentationModel,
    kb: &KnowledgeBase,
    analyzer: &dyn RcaAnalyzer,
) -> Result<RcaFinding, RcaError> {
    let finding = analyzer
        .analyze(trace, model, kb)
        .map_err(|message| RcaError::Analyzer {
            analyzer_id: analyzer.id().to_string(),
            message,
        })?;
    if let Some((role, ordinal)) = finding.culprit() {
        let segments = segment_by_agent(trace)?;
        if segments
            .get(ordinal as usize)
            .is_none_or(|s| s.agent_role != role)
        {
            return Err(RcaError::Analyzer {
                analyzer_id: analyzer.id().to_string(),
                message: format!("culprit {role:?} #{ordinal} is not a segment of the trace"),
            });
        }
    }
    Ok(finding)
}

// ---------------------------------------------------------------- ingest

/// Turns an expert verdict into knowledge.
///
/// A culprit is known from the verdict's correction, or from the finding when
/// the expert confirmed it. With a culprit, one fine entry (the culprit
/// segment's embedding) and one coarse entry (the trace embedding) are added;
/// without, only the coarse entry. Replaying a verdict with the same
/// `(trace_id, reviewer, reviewed_at_ms)` returns the original receipt.
pub fn ingest_verdict(
    kb: &mut KnowledgeBase,
    queue: &ReviewQueue,
    trace: &ReasoningTrace,
    finding: Option<&RcaFinding>,
    verdict: &ExpertVerdict,
    model: &RepresentationModel,
) -> Result<IngestReceipt, RcaError> {
    if let Some((prior_verdict, mut prior)) = queue.receipt(verdict) {
        prior.replayed = true;
        if &prior_verdict != verdict {
            return Err(RcaError::ConflictingVerdict(prior));
        }
        return Ok(prior);
    }
    if !queue.contains(&verdict.trace_id) {
        return Err(RcaError::NotQueued(verdict.trace_id.clone()));
    }
    if trace.trace_id != verdict.trace_id {
        return Err(RcaError::InvalidVerdict(format!(
            "verdict for {} applied to trace {}",
            verdict.trace_id, trace.trace_id
        )));
    }
    verdict.validate(finding)?;
    kb.check_version(model.version)?;

    let culprit: Option<(String, u32)> = match (
        &verdict.corrected_agent_role,
        verdict.corrected_segment_ordinal,
    ) {
        (Some(role), Some(ordinal)) => Some((role.clone(), ordinal)),
        _ if verdict.confirmed => finding
            .and_then(RcaFinding::culprit)
            .map(|(r, o)| (r.to_string(), o)),
        _ => None,
    };
    let segments = segment_by_agent(trace)?;
    let zs = segments
        .iter()
        .map(|s| model.encode_segment(s))
        .collect::<Result<Vec<Embedding>, _>>()?;
    let culprit_embedding = match &culprit {
        Some((role, ordinal)) => match segments.get(*ordinal as usize) {
            Some(s) if &s.agent_role == role => Some(zs[*ordinal as usize].clone()),
            _ => {
                return Err(RcaError::InvalidCulprit {
                    trace_id: trace.trace_id.clone(),
                    role: role.clone(),
                    ordinal: *ordinal,
                })
            }
        },
        None => None,
    };
    let trace_embedding = model.encode_trace(&zs)?;
    let provenance = Provenance::Expert {
        reviewer: verdict.reviewer.clone(),
    };

    let mut receipt = IngestReceipt {
        fine_ids: Vec::new(),
        coarse_ids: Vec::new(),
        replayed: false,
    };
    if let (Some((role, ordinal)), Some(embedding)) = (culprit, culprit_embedding) {
        receipt.fine_ids.push(kb.add_fine(
            FineGrainedEntry {
                entry_id: 0,
                agent_role: role,
                embedding,
                failure_type: verdict.failure_type,
                source_trace_id: trace.trace_id.clone(),
                segment_ordinal: ordinal,
                note: verdict.note.clone(),
                created_at_ms: verdict.reviewed_at_ms,
                provenance: provenance.clone(),
            },
            model.version,
        )?);
    }
    receipt.coarse_ids.push(kb.add_coarse(
        CoarseGrainedEntry {
            entry_id: 0,
            embedding: trace_embedding,
            failure_type: verdict.failure_type,
            source_trace_id: trace.trace_id.clone(),
            note: verdict.note.clone(),
            created_at_ms: verdict.reviewed_at_ms,
            provenance,
        },
        model.version,
    )?);
    queue.complete(verdict, receipt.clone());
    Ok(receipt)
}
