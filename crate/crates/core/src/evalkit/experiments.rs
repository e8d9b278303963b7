//! Experiment runners: retrieval, detection, mitigation and threshold sweep.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generator::GeneratedTrace;
use super::metrics::{
    diagnosis_metrics, latency_stats, retrieval_rows, Classification, Confusion, DiagnosisMetrics,
    LatencyStats, RankedQuery,
};
use super::report::{MetricReport, MitigationStats};
use super::runtime::{ScriptPolicy, ScriptedRuntime};
use super::EvalError;
use crate::detection::{
    detect_batch, on_segment_complete, DetectionConfig, Scope, TraceSession, TraceVerdicts,
};
use crate::knowledge::{CoarseGrainedEntry, FineGrainedEntry, KnowledgeBase, Provenance};
use crate::mitigation::{mitigation_loop, MitigationConfig};
use crate::rca::ReviewQueue;
use crate::representation::{Embedding, RepresentationModel};
use crate::trace::{segment_by_agent, FailureType, ReasoningTrace};

// -------------------------------------------------------------- retrieval

/// Leave-one-out rankings: each item queries all others, ranked by
/// descending dot product (ties by ascending index). Relevant items are the
/// other members of its group.
pub fn leave_one_out_queries(embeddings: &[Vec<f64>], groups: &[&str]) -> Vec<RankedQuery> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    (0..embeddings.len())
        .map(|i| {
            let mut others: Vec<(usize, f64)> = (0..embeddings.len())
                .filter(|&j| j != i)
                .map(|j| (j, dot(&embeddings[i], &embeddings[j])))
                .collect();
            others.sort_by(|a, b| (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0)));
            RankedQuery {
                ranking: others.into_iter().map(|(j, _)| j).collect(),
                relevant: (0..groups.len())
                    .filter(|&j| j != i && groups[j] == groups[i])
                    .collect(),
            }
        })
        .collect()
}

pub fn trace_embedding(
    trace: &ReasoningTrace,
    model: &RepresentationModel,
) -> Result<Embedding, EvalError> {
    let zs = segment_by_agent(trace)?
        .iter()
        .map(|s| model.encode_segment(s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(model.encode_trace(&zs)?)
}

/// Each trace queries the rest of the corpus by trace embedding; relevant
/// traces share its base question.
pub fn run_retrieval_experiment(
    corpus: &[ReasoningTrace],
    model: &RepresentationModel,
    ks: &[usize],
) -> Result<MetricReport, EvalError> {
    let groups: Vec<&str> = corpus
        .iter()
        .map(|t| {
            t.base_question_id.as_deref().ok_or_else(|| {
                EvalError::InvalidConfig(format!("trace {} has no base question", t.trace_id))
            })
        })
        .collect::<Result<_, _>>()?;
    let embeddings = corpus
        .iter()
        .map(|t| trace_embedding(t, model).map(Embedding::into_values))
        .collect::<Result<Vec<_>, _>>()?;
    let queries = leave_one_out_queries(&embeddings, &groups);
    let mut report = MetricReport::new("Similar reasoning trace retrieval");
    report.notes.push(format!(
        "{} traces, {} base questions; relevant = same base question; macro-averaged over queries",
        corpus.len(),
        groups.iter().collect::<BTreeSet<_>>().len()
    ));
    report
        .notes
        .push(format!("model version {}", model.version));
    report.retrieval = retrieval_rows(&queries, ks)?;
    Ok(report)
}

// -------------------------------------------------------------- detection

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionExperiment {
    /// Fraction of base-question groups whose failures seed the knowledge base.
    pub kb_fraction: f64,
    pub detection: DetectionConfig,
    pub seed: u64,
}

impl Default for DetectionExperiment {
    fn default() -> Self {
        Self {
            kb_fraction: 0.5,
            detection: DetectionConfig::default(),
            seed: 0,
        }
    }
}

/// Splits a corpus by base-question group: a shuffled `fraction` of the
/// groups go to the first part. Traces without a base question form their
/// own group.
pub fn split_groups(
    corpus: &[ReasoningTrace],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in corpus.iter().enumerate() {
        let key = t.base_question_id.as_deref().unwrap_or(&t.trace_id);
        groups.entry(key).or_default().push(i);
    }
    let mut keys: Vec<&str> = groups.keys().copied().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_first = ((fraction.clamp(0.0, 1.0) * keys.len() as f64).round() as usize).min(keys.len());
    let collect = |ks: &[&str]| {
        let mut v: Vec<usize> = ks.iter().flat_map(|k| groups[k].iter().copied()).collect();
        v.sort_unstable();
        v
    };
    (collect(&keys[..n_first]), collect(&keys[n_first..]))
}

/// Knowledge from labeled failures: a fine entry at each culprit segment
/// (when the culprit is known) and a coarse entry per failed trace.
pub fn seed_knowledge<'a>(
    traces: impl IntoIterator<Item = &'a ReasoningTrace>,
    model: &RepresentationModel,
    with_coarse: bool,
) -> Result<KnowledgeBase, EvalError> {
    let mut kb = KnowledgeBase::for_model(model);
    for t in traces {
        let Some(label) = t.label.as_ref().filter(|l| l.failed) else {
            continue;
        };
        let failure_type = label.failure_type.unwrap_or(FailureType::Unknown);
        let segments = segment_by_agent(t)?;
        let zs = segments
            .iter()
            .map(|s| model.encode_segment(s))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(ordinal) = label.culprit_segment_ordinal {
            let seg = segments.get(ordinal as usize).ok_or_else(|| {
                EvalError::InvalidConfig(format!(
                    "{}: culprit ordinal {ordinal} out of range",
                    t.trace_id
                ))
            })?;
            kb.add_fine(
                FineGrainedEntry {
                    entry_id: 0,
                    agent_role: seg.agent_role.clone(),
                    embedding: zs[ordinal as usize].clone(),
                    failure_type,
                    source_trace_id: t.trace_id.clone(),
                    segment_ordinal: ordinal,
                    note: format!("{failure_type} in {}", seg.agent_role),
                    created_at_ms: 0,
                    provenance: Provenance::GroundTruth,
                },
                model.version,
            )?;
        }
        if with_coarse {
            kb.add_coarse(
                CoarseGrainedEntry {
                    entry_id: 0,
                    embedding: model.encode_trace(&zs)?,
                    failure_type,
                    source_trace_id: t.trace_id.clone(),
                    note: format!("{failure_type}"),
                    created_at_ms: 0,
                    provenance: Provenance::GroundTruth,
                },
                model.version,
            )?;
        }
    }
    Ok(kb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionScores {
    pub detection: Classification,
    pub diagnosis: DiagnosisMetrics,
    /// Per-segment check latency.
    pub latency: LatencyStats,
}

/// Scores verdicts against labels. A trace is predicted failed if any of its
/// verdicts is anomalous; its predicted type is [`TraceVerdicts::diagnosis`].
/// Diagnosis is scored over true positives.
pub fn score_verdicts(traces: &[&ReasoningTrace], verdicts: &[TraceVerdicts]) -> DetectionScores {
    let actual = |t: &ReasoningTrace| t.label.as_ref().is_some_and(|l| l.failed);
    let confusion = Confusion::from_pairs(
        traces
            .iter()
            .zip(verdicts)
            .map(|(t, v)| (v.anomalous(), actual(t))),
    );
    let pairs: Vec<_> = traces
        .iter()
        .zip(verdicts)
        .filter(|(t, v)| actual(t) && v.anomalous())
        .map(|(t, v)| {
            (
                v.diagnosis(),
                t.label
                    .as_ref()
                    .unwrap()
                    .failure_type
                    .unwrap_or(FailureType::Unknown),
            )
        })
        .collect();
    let latencies: Vec<u64> = verdicts
        .iter()
        .flat_map(|v| v.verdicts.iter())
        .filter(|v| v.scope == Scope::Agent)
        .map(|v| v.latency_us)
        .collect();
    DetectionScores {
        detection: confusion.into(),
        diagnosis: diagnosis_metrics(&pairs),
        latency: latency_stats(&latencies),
    }
}

#[derive(Debug, Clone)]
pub struct DetectionRun {
    pub report: MetricReport,
    pub kb: KnowledgeBase,
    /// Corpus indices of the evaluated traces, in corpus order.
    pub held_out: Vec<usize>,
    pub verdicts: Vec<TraceVerdicts>,
}

/// Seeds knowledge from the failures of a `kb_fraction` split of groups and
/// runs batch detection on the remaining groups.
pub fn run_detection_experiment(
    corpus: &[ReasoningTrace],
    model: &RepresentationModel,
    exp: &DetectionExperiment,
) -> Result<DetectionRun, EvalError> {
    exp.detection.validate()?;
    let (kb_idx, held_out) = split_groups(corpus, exp.kb_fraction, exp.seed);
    let kb = seed_knowledge(kb_idx.iter().map(|&i| &corpus[i]), model, true)?;
    let eval: Vec<ReasoningTrace> = held_out.iter().map(|&i| corpus[i].clone()).collect();
    let verdicts = detect_batch(&eval, model, &kb, &exp.detection)?;
    let refs: Vec<&ReasoningTrace> = eval.iter().collect();
    let scores = score_verdicts(&refs, &verdicts);
    let mut report = MetricReport::new("Anomaly detection and diagnosis");
    report.notes.push(format!(
        "knowledge from {} traces ({} fine, {} coarse entries); evaluated on {} held-out traces",
        kb_idx.len(),
        kb.fine().len(),
        kb.coarse().len(),
        eval.len()
    ));
    report.notes.push(format!(
        "theta_fine {}, theta_coarse {}, k {}; diagnosis scored on true positives",
        exp.detection.theta_fine, exp.detection.theta_coarse, exp.detection.k_neighbors
    ));
    report.detection = Some(scores.detection);
    report.diagnosis = Some(scores.diagnosis);
    report.latency = Some(scores.latency);
    Ok(DetectionRun {
        report,
        kb,
        held_out,
        verdicts,
    })
}

// ------------------------------------------------------------- mitigation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MitigationExperiment {
    /// Probability that one regeneration comes back clean.
    pub p: f64,
    pub budget: u32,
    pub trials: usize,
    pub seed: u64,
    pub detection: DetectionConfig,
}

struct TrialOutcome {
    resolved: bool,
    calls: u32,
    enqueued: bool,
}

fn run_trial(
    source: &ReasoningTrace,
    trial_id: String,
    runtime: Option<&ScriptedRuntime>,
    model: &RepresentationModel,
    kb: &KnowledgeBase,
    det: &DetectionConfig,
    cfg: &MitigationConfig,
) -> Result<TrialOutcome, EvalError> {
    let queue = ReviewQueue::new();
    let mut session = TraceSession::new(trial_id);
    for seg in segment_by_agent(source)? {
        let verdict = on_segment_complete(&mut session, seg, model, kb, det)?;
        if verdict.anomalous {
            let rt = runtime.map(|r| r as &dyn crate::mitigation::AgentRuntime);
            let report = mitigation_loop(&mut session, &verdict, rt, model, kb, det, cfg, &queue)?;
            return Ok(TrialOutcome {
                resolved: report.resolved,
                calls: report.attempts,
                enqueued: report.enqueued,
            });
        }
    }
    // failure never detected: nothing to mitigate, the failure stands
    Ok(TrialOutcome {
        resolved: false,
        calls: 0,
        enqueued: false,
    })
}

/// Replays failing traces through detection and model-centric mitigation
/// with a scripted runtime that regenerates cleanly with probability `p`.
/// Knowledge holds the culprit segments of all failing traces, so every
/// failure is detected.
pub fn run_mitigation_experiment(
    corpus: &[GeneratedTrace],
    model: &RepresentationModel,
    exp: &MitigationExperiment,
) -> Result<MitigationStats, EvalError> {
    if !(0.0..=1.0).contains(&exp.p) {
        return Err(EvalError::InvalidConfig(format!(
            "p = {} outside [0, 1]",
            exp.p
        )));
    }
    let failing: Vec<&GeneratedTrace> = corpus
        .iter()
        .filter(|g| g.trace.label.as_ref().is_some_and(|l| l.failed))
        .collect();
    if failing.is_empty() || exp.trials == 0 {
        return Err(EvalError::InvalidConfig(
            "need failing traces and at least one trial".into(),
        ));
    }
    let kb = seed_knowledge(failing.iter().map(|g| &g.trace), model, false)?;
    let runtime = ScriptedRuntime::new(
        corpus,
        ScriptPolicy::Bernoulli {
            p: exp.p,
            seed: exp.seed,
        },
    );
    let with = MitigationConfig {
        budget: exp.budget,
        ..Default::default()
    };
    let without = MitigationConfig {
        budget: 0,
        ..Default::default()
    };
    let (mut resolved_with, mut resolved_without, mut calls, mut enqueued) =
        (0usize, 0usize, 0u64, 0usize);
    for trial in 0..exp.trials {
        let source = &failing[trial % failing.len()].trace;
        let id = format!("{}@{trial}", source.trace_id);
        let o = run_trial(
            source,
            id.clone(),
            Some(&runtime),
            model,
            &kb,
            &exp.detection,
            &with,
        )?;
        resolved_with += o.resolved as usize;
        calls += o.calls as u64;
        enqueued += o.enqueued as usize;
        let o = run_trial(source, id, None, model, &kb, &exp.detection, &without)?;
        resolved_without += o.resolved as usize;
    }
    Ok(MitigationStats {
        p: exp.p,
        budget: exp.budget,
        trials: exp.trials,
        resolved_with: resolved_with as f64 / exp.trials as f64,
        resolved_without: resolved_without as f64 / exp.trials as f64,
        expected: 1.0 - (1.0 - exp.p).powi(exp.budget as i32),
        runtime_calls: calls,
        enqueued,
    })
}

/// Runs the mitigation experiment over every `(p, budget)` cell.
pub fn run_mitigation_grid(
    corpus: &[GeneratedTrace],
    model: &RepresentationModel,
    ps: &[f64],
    budgets: &[u32],
    trials: usize,
    seed: u64,
    detection: DetectionConfig,
) -> Result<MetricReport, EvalError> {
    let mut report = MetricReport::new("Recovery through reflexive mitigation");
    report.notes.push(format!(
        "{trials} trials per cell; scripted runtime regenerates cleanly with probability p per attempt"
    ));
    for &p in ps {
        for &budget in budgets {
            report.mitigation.push(run_mitigation_experiment(
                corpus,
                model,
                &MitigationExperiment {
                    p,
                    budget,
                    trials,
                    seed,
                    detection,
                },
            )?);
        }
    }
    Ok(report)
}

// ------------------------------------------------------------------ sweep

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub theta_fine: f64,
    pub theta_coarse: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub best: SweepCell,
}

/// Detection F1 for every `(theta_fine, theta_coarse)` pair of the grid on
/// the held-out split. The best cell maximizes F1; ties go to the lower
/// thresholds (fine first, then coarse).
pub fn sweep_thresholds(
    corpus: &[ReasoningTrace],
    model: &RepresentationModel,
    exp: &DetectionExperiment,
    fine_grid: &[f64],
    coarse_grid: &[f64],
) -> Result<SweepResult, EvalError> {
    if fine_grid.is_empty() || coarse_grid.is_empty() {
        return Err(EvalError::InvalidConfig(
            "threshold grids must be non-empty".into(),
        ));
    }
    let (kb_idx, held_out) = split_groups(corpus, exp.kb_fraction, exp.seed);
    let kb = seed_knowledge(kb_idx.iter().map(|&i| &corpus[i]), model, true)?;
    let eval: Vec<ReasoningTrace> = held_out.iter().map(|&i| corpus[i].clone()).collect();
    let refs: Vec<&ReasoningTrace> = eval.iter().collect();
    let mut cells = Vec::with_capacity(fine_grid.len() * coarse_grid.len());
    for &theta_fine in fine_grid {
        for &theta_coarse in coarse_grid {
            let cfg = DetectionConfig {
                theta_fine,
                theta_coarse,
                ..exp.detection
            };
            let verdicts = detect_batch(&eval, model, &kb, &cfg)?;
            cells.push(SweepCell {
                theta_fine,
                theta_coarse,
                f1: score_verdicts(&refs, &verdicts).detection.f1,
            });
        }
    }
    let best = *cells
        .iter()
        .min_by(|a, b| {
            b.f1.total_cmp(&a.f1)
                .then(a.theta_fine.total_cmp(&b.theta_fine))
                .then(a.theta_coarse.total_cmp(&b.theta_coarse))
        })
        .expect("non-empty grid");
    Ok(SweepResult { cells, best })
}
