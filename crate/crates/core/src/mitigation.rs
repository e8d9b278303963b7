//! Reflexive mitigation.
//!
//! An agent-scope anomaly is answered with model-centric reflection (the
//! failing agent is re-invoked with a reflection context); a trace-scope
//! anomaly with orchestration-centric reflection (the whole trace is
//! replanned). Attempts are bounded by a budget; whatever stays unresolved
//! is handed to expert review.

use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{
    check_segment, replay_session, DetectionConfig, DetectionError, DetectionVerdict, Scope,
    TraceSession,
};
use crate::knowledge::{KnowledgeBase, Tier};
use crate::rca::{ReviewQueue, ReviewTrigger};
use crate::representation::RepresentationModel;
use crate::trace::{AgentSegment, ReasoningTrace};

pub const DEFAULT_MODEL_TEMPLATE: &str = "Your output as {agent_role} (segment {segment_ordinal}) resembles known failures diagnosed as {diagnosis}.\n\
Notes on those failures:\n{notes}\n\
Your final step was:\n{final_step}\n\
Reflect on where the reasoning went wrong and regenerate your response.";

pub const DEFAULT_REPLAN_TEMPLATE: &str =
    "The reasoning trace as a whole resembles known failures diagnosed as {diagnosis}.\n\
Per-agent verdicts:\n{summary}\n\
Re-evaluate how the agents coordinate and replan the task.";

#[derive(Debug, Error)]
pub enum MitigationError {
    #[error("verdict is not anomalous; nothing to mitigate")]
    NothingToMitigate,
    #[error("attempt {attempt} exceeds budget {budget}")]
    BudgetExhausted { attempt: u32, budget: u32 },
    #[error("attempts are numbered from 1")]
    InvalidAttempt,
    #[error("session has no segment {0}")]
    MissingSegment(u32),
    #[error("agent runtime failed for {plan:?}: {message}")]
    Runtime {
        plan: Box<MitigationPlan>,
        message: String,
    },
    #[error(transparent)]
    Detection(#[from] DetectionError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MitigationConfig {
    pub budget: u32,
    /// Per runtime call; a call that exceeds it counts as a runtime failure.
    pub call_timeout_ms: u64,
    pub model_template: String,
    pub replan_template: String,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        Self {
            budget: 2,
            call_timeout_ms: 30_000,
            model_template: DEFAULT_MODEL_TEMPLATE.to_string(),
            replan_template: DEFAULT_REPLAN_TEMPLATE.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PlanKind {
    ModelCentric {
        agent_role: String,
        segment_ordinal: u32,
        reflection_context: String,
    },
    OrchestrationCentric {
        replan_context: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitigationPlan {
    pub trace_id: String,
    pub kind: PlanKind,
    pub attempt: u32,
    pub budget: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct RuntimeError(pub String);

/// The boundary to the multi-agent system being protected.
///
/// Implementations must be idempotent per `(trace_id, attempt)`: replaying a
/// call returns the same result.
pub trait AgentRuntime: Send + Sync {
    fn reinvoke_agent(
        &self,
        trace_id: &str,
        agent_role: &str,
        segment_ordinal: u32,
        reflection_context: &str,
        attempt: u32,
    ) -> Result<AgentSegment, RuntimeError>;

    fn replan(
        &self,
        trace_id: &str,
        replan_context: &str,
        attempt: u32,
    ) -> Result<ReasoningTrace, RuntimeError>;
}

/// Wraps a runtime so every call is abandoned after `timeout`.
pub struct TimeoutRuntime {
    inner: Arc<dyn AgentRuntime>,
    timeout: Duration,
}

impl TimeoutRuntime {
    pub fn new(inner: Arc<dyn AgentRuntime>, timeout: Duration) -> Self {
        Self { inner, timeout }
    }

    fn call<T: Send + 'static>(
        &self,
        f: impl FnOnce(&dyn AgentRuntime) -> Result<T, RuntimeError> + Send + 'static,
    ) -> Result<T, RuntimeError> {
        let (tx, rx) = mpsc::channel();
        let inner = self.inner.clone();
        std::thread::spawn(move || {
            let _ = tx.send(f(inner.as_ref()));
        });
        match rx.recv_timeout(self.timeout) {
            Ok(r) => r,
            Err(mpsc::RecvTimeoutError::Timeout) => Err(RuntimeError(format!(
                "runtime call timed out after {:?}",
                self.timeout
            ))),
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                Err(RuntimeError("runtime call panicked".into()))
            }
        }
    }
}

impl AgentRuntime for TimeoutRuntime {
    fn reinvoke_agent(
        &self,
        trace_id: &str,
        agent_role: &str,
        segment_ordinal: u32,
        reflection_context: &str,
        attempt: u32,
    ) -> Result<AgentSegment, RuntimeError> {
        let (t, r, c) = (
            trace_id.to_string(),
            agent_role.to_string(),
            reflection_context.to_string(),
        );
        self.call(move |rt| rt.reinvoke_agent(&t, &r, segment_ordinal, &c, attempt))
    }

    fn replan(
        &self,
        trace_id: &str,
        replan_context: &str,
        attempt: u32,
    ) -> Result<ReasoningTrace, RuntimeError> {
        let (t, c) = (trace_id.to_string(), replan_context.to_string());
        self.call(move |rt| rt.replan(&t, &c, attempt))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Replacement {
    Segment(AgentSegment),
    Trace(ReasoningTrace),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationOutcome {
    pub plan: MitigationPlan,
    /// Equals `!post_verdict.anomalous`.
    pub resolved: bool,
    pub replacement: Replacement,
    pub post_verdict: DetectionVerdict,
}

fn render(template: &str, vars: &[(&str, String)]) -> String {
    vars.iter().fold(template.to_string(), |acc, (k, v)| {
        acc.replace(&format!("{{{k}}}"), v)
    })
}

fn diagnosis_text(verdict: &DetectionVerdict) -> String {
    verdict
        .diagnosis
        .map_or_else(|| "an undetermined failure".to_string(), |d| d.to_string())
}

fn matched_notes(verdict: &DetectionVerdict, kb: &KnowledgeBase) -> String {
    let tier: Tier = verdict.scope.tier();
    let notes: Vec<String> = verdict
        .matches
        .iter()
        .filter_map(|m| {
            kb.note_of(tier, m.entry_id)
                .filter(|n| !n.is_empty())
                .map(|n| format!("- {n}"))
        })
        .collect();
    if notes.is_empty() {
        "- (none recorded)".to_string()
    } else {
        notes.join("\n")
    }
}

/// Turns an anomalous verdict into a reflection plan for attempt `attempt`.
pub fn build_plan(
    verdict: &DetectionVerdict,
    session: &TraceSession,
    kb: &KnowledgeBase,
    cfg: &MitigationConfig,
    attempt: u32,
) -> Result<MitigationPlan, MitigationError> {
    if !verdict.anomalous {
        return Err(MitigationError::NothingToMitigate);
    }
    if attempt == 0 {
        return Err(MitigationError::InvalidAttempt);
    }
    if attempt > cfg.budget {
        return Err(MitigationError::BudgetExhausted {
            attempt,
            budget: cfg.budget,
        });
    }
    let kind = match verdict.scope {
        Scope::Agent => {
            let ordinal = verdict.segment_ordinal.unwrap_or_default();
            let segment = session
                .segments()
                .get(ordinal as usize)
                .ok_or(MitigationError::MissingSegment(ordinal))?;
            let role = verdict
                .agent_role
                .clone()
                .unwrap_or_else(|| segment.agent_role.clone());
            let final_step = segment
                .steps
                .last()
                .map(|s| s.text.clone())
                .unwrap_or_default();
            PlanKind::ModelCentric {
                reflection_context: render(
                    &cfg.model_template,
                    &[
                        ("agent_role", role.clone()),
                        ("segment_ordinal", ordinal.to_string()),
                        ("diagnosis", diagnosis_text(verdict)),
                        ("notes", matched_notes(verdict, kb)),
                        ("final_step", final_step),
                    ],
                ),
                agent_role: role,
                segment_ordinal: ordinal,
            }
        }
        Scope::Trace => {
            let summary = session
                .verdicts()
                .iter()
                .map(|v| {
                    format!(
                        "- #{} {}: {}{}",
                        v.segment_ordinal.unwrap_or_default(),
                        v.agent_role.as_deref().unwrap_or("?"),
                        if v.anomalous { "anomalous" } else { "clean" },
                        v.diagnosis.map(|d| format!(" ({d})")).unwrap_or_default()
                    )
                })
                .collect::<Vec<_>>()
                .join("\n");
            PlanKind::OrchestrationCentric {
                replan_context: render(
                    &cfg.replan_template,
                    &[("diagnosis", diagnosis_text(verdict)), ("summary", summary)],
                ),
            }
        }
    };
    Ok(MitigationPlan {
        trace_id: verdict.trace_id.clone(),
        kind,
        attempt,
        budget: cfg.budget,
    })
}

/// Result of one attempt, with the state needed to update a session.
enum Applied {
    Segment(crate::representation::Embedding),
    Trace(TraceSession),
}

fn execute(
    plan: &MitigationPlan,
    runtime: &dyn AgentRuntime,
    model: &RepresentationModel,
    kb: &KnowledgeBase,
    cfg: &DetectionConfig,
) -> Result<(MitigationOutcome, Applied), MitigationError> {
    let runtime_err = |message: String| MitigationError::Runtime {
        plan: Box::new(plan.clone()),
        message,
    };
    match &plan.kind {
        PlanKind::ModelCentric {
            agent_role,
            segment_ordinal,
            reflection_context,
        } => {
            let mut segment = runtime
                .reinvoke_agent(
                    &plan.trace_id,
                    agent_role,
                    *segment_ordinal,
                    reflection_context,
                    plan.attempt,
                )
                .map_err(|e| runtime_err(e.0))?;
            if &segment.agent_role != agent_role {
                return Err(runtime_err(format!(
                    "re-invoked {agent_role} but received a segment from {}",
                    segment.agent_role
                )));
            }
            segment.segment_ordinal = *segment_ordinal;
            let (embedding, post) = check_segment(&plan.trace_id, &segment, model, kb, cfg)
                .map_err(|e| match e {
                    DetectionError::MalformedSegment { .. } => runtime_err(e.to_string()),
                    other => other.into(),
                })?;
            let outcome = MitigationOutcome {
                plan: plan.clone(),
                resolved: !post.anomalous,
                replacement: Replacement::Segment(segment),
                post_verdict: post,
            };
            Ok((outcome, Applied::Segment(embedding)))
        }
        PlanKind::OrchestrationCentric { replan_context } => {
            let mut trace = runtime
                .replan(&plan.trace_id, replan_context, plan.attempt)
                .map_err(|e| runtime_err(e.0))?;
            trace.trace_id = plan.trace_id.clone();
            let (session, tv) = replay_session(&trace, model, kb, cfg).map_err(|e| match e {
                DetectionError::Trace(_) | DetectionError::MalformedSegment { .. } => {
                    runtime_err(e.to_string())
                }
                other => other.into(),
            })?;
            let post = tv
                .segment_verdicts()
                .iter()
                .find(|v| v.anomalous)
                .unwrap_or(tv.trace_verdict())
                .clone();
            let outcome = MitigationOutcome {
                plan: plan.clone(),
                resolved: !post.anomalous,
                replacement: Replacement::Trace(trace),
                post_verdict: post,
            };
            Ok((outcome, Applied::Trace(session)))
        }
    }
}

/// Executes one plan: re-invokes or replans through `runtime` and re-runs
/// detection on the replacement.
pub fn execute_plan(
    plan: &MitigationPlan,
    runtime: &dyn AgentRuntime,
    model: &RepresentationModel,
    kb: &KnowledgeBase,
    cfg: &DetectionConfig,
) -> Result<MitigationOutcome, MitigationError> {
    execute(plan, runtime, model, kb, cfg).map(|(o, _)| o)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationReport {
    /// Successful runtime round trips, in attempt order.
    pub outcomes: Vec<MitigationOutcome>,
    /// Attempts that failed at the runtime boundary.
    pub runtime_errors: Vec<String>,
    /// Runtime invocations made; never exceeds the budget.
    pub attempts: u32,
    pub resolved: bool,
    /// True when this call put the trace on the review queue.
    pub enqueued: bool,
}

impl MitigationReport {
    pub fn last_outcome(&self) -> Option<&MitigationOutcome> {
        self.outcomes.last()
    }
}

/// Plans and executes up to `cfg.budget` attempts for `verdict`.
///
/// On resolution the session takes the recovered segment (or the replanned
/// trace). Without a runtime, or when the budget runs out, the trace is
/// enqueued for expert review. Knowledge is never modified.
#[allow(clippy::too_many_arguments)]
pub fn mitigation_loop(
    session: &mut TraceSession,
    verdict: &DetectionVerdict,
    runtime: Option<&dyn AgentRuntime>,
    model: &RepresentationModel,
    kb: &KnowledgeBase,
    det_cfg: &DetectionConfig,
    cfg: &MitigationConfig,
    queue: &ReviewQueue,
) -> Result<MitigationReport, MitigationError> {
    if !verdict.anomalous {
        return Err(MitigationError::NothingToMitigate);
    }
    session.begin_mitigation();
    let mut report = MitigationReport {
        outcomes: Vec::new(),
        runtime_errors: Vec::new(),
        attempts: 0,
        resolved: false,
        enqueued: false,
    };
    if let Some(runtime) = runtime {
        for attempt in 1..=cfg.budget {
            let plan = match build_plan(verdict, session, kb, cfg, attempt) {
                Ok(p) => p,
                Err(e) => {
                    session.end_mitigation();
                    return Err(e);
                }
            };
            report.attempts += 1;
            match execute(&plan, runtime, model, kb, det_cfg) {
                Ok((outcome, applied)) => {
                    let resolved = outcome.resolved;
                    if resolved {
                        match (applied, &outcome.replacement) {
                            (Applied::Segment(embedding), Replacement::Segment(segment)) => {
                                session.replace_segment(
                                    segment.clone(),
                                    embedding,
                                    outcome.post_verdict.clone(),
                                )?;
                            }
                            (Applied::Trace(replayed), _) => *session = replayed,
                            _ => unreachable!("replacement kind follows plan kind"),
                        }
                    }
                    report.outcomes.push(outcome);
                    if resolved {
                        report.resolved = true;
                        break;
                    }
                }
                Err(MitigationError::Runtime { message, .. }) => {
                    report.runtime_errors.push(message)
                }
                Err(e) => {
                    session.end_mitigation();
                    return Err(e);
                }
            }
        }
    }
    if !report.resolved {
        queue.enqueue(session.trace_id(), ReviewTrigger::MitigationUnresolved);
        report.enqueued = true;
    }
    session.end_mitigation();
    Ok(report)
}
