//! Trace representation: hashed token featurizer, the Reasoning Encoder for
//! agent segments and the Trace Encoder for ordered segment sequences.
//!
//! Every emitted embedding is L2-normalized, so cosine similarity between any
//! two embeddings is their dot product.

mod featurizer;
mod io;
pub mod linalg;
mod model;

use thiserror::Error;

pub use featurizer::{fnv1a64, segment_text, split_tokens, tokenize, FeaturizerConfig};
pub use io::{
    load_model, load_model_expecting, read_model, save_model, write_model, MODEL_FORMAT_VERSION,
    MODEL_MAGIC,
};
pub use model::{
    Embedding, Mlp, ModelConfig, Params, RepresentationModel, SegmentForward, TraceForward,
    UNIT_NORM_TOLERANCE,
};

#[derive(Debug, Error)]
pub enum RepresentationError {
    #[error("segment text produced no tokens")]
    EmptySegmentText,
    #[error("embedding norm below 1e-12")]
    DegenerateEmbedding,
    #[error("no segment embeddings to encode")]
    EmptyTrace,
    #[error("prefix length {k} out of range 1..={len}")]
    PrefixOutOfRange { k: usize, len: usize },
    #[error("embedding dimension {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding norm {0} is not 1")]
    NotUnitNorm(f64),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("model file truncated at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
