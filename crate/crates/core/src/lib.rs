//! Failure management for LLM-based multi-agent systems built on a learned
//! representation of reasoning traces.
//!
//! The pipeline: traces are segmented per agent ([`trace`]), embedded by the
//! reasoning and trace encoders ([`representation`], trained with
//! [`training`]), matched step-wise against stored failure knowledge
//! ([`knowledge`], [`detection`]), recovered through reflection
//! ([`mitigation`]) and, when a failure escapes, analysed and confirmed by an
//! expert so the knowledge base grows ([`rca`]). [`evalkit`] generates labeled
//! synthetic corpora and runs the evaluation protocols.

pub mod detection;
pub mod evalkit;
pub mod knowledge;
pub mod mitigation;
pub mod rca;
pub mod representation;
pub mod trace;
pub mod training;
