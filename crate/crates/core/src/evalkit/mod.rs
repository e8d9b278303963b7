//! Evaluation toolkit: synthetic corpora, metrics, scripted runtimes and
//! the experiment runners behind `eager eval`.

pub mod experiments;
pub mod generator;
pub mod metrics;
pub mod report;
pub mod runtime;
pub mod vocab;

use thiserror::Error;

pub use experiments::{
    leave_one_out_queries, run_detection_experiment, run_mitigation_experiment,
    run_mitigation_grid, run_retrieval_experiment, score_verdicts, seed_knowledge, split_groups,
    sweep_thresholds, trace_embedding, DetectionExperiment, DetectionRun, DetectionScores,
    MitigationExperiment, SweepCell, SweepResult,
};
pub use generator::{
    culprit_position, default_profile, generate, generate_corpus, CulpritPosition, GeneratedTrace,
    GeneratorConfig,
};
pub use metrics::{
    diagnosis_metrics, latency_stats, mrr_at_k, ndcg_at_k, recall_at_k, retrieval_rows,
    Classification, Confusion, DiagnosisMetrics, LatencyStats, RankedQuery, RetrievalRow,
};
pub use report::{MetricReport, MitigationStats};
pub use runtime::{ScriptPolicy, ScriptedRuntime};
pub use vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Detection(#[from] crate::detection::DetectionError),
    #[error(transparent)]
    Mitigation(#[from] crate::mitigation::MitigationError),
    #[error(transparent)]
    Knowledge(#[from] crate::knowledge::KnowledgeError),
    #[error(transparent)]
    Representation(#[from] crate::representation::RepresentationError),
    #[error(transparent)]
    Trace(#[from] crate::trace::TraceError),
}
