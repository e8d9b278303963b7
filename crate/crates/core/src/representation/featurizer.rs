//! Hashed bag-of-tokens featurizer.

use serde::{Deserialize, Serialize};

use crate::trace::AgentSegment;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub vocab_buckets: u32,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            vocab_buckets: 4096,
        }
    }
}

/// 64-bit FNV-1a over the UTF-8 bytes of `token`.
pub fn fnv1a64(token: &str) -> u64 {
    token.bytes().fold(FNV_OFFSET, |hash, b| {
        (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Lowercases, splits on maximal runs of non-alphanumeric characters and
/// returns the raw tokens.
pub fn split_tokens(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Bucket ids in `[0, vocab_buckets)` for every token of `text`.
pub fn tokenize(text: &str, cfg: &FeaturizerConfig) -> Vec<u32> {
    let v = u64::from(cfg.vocab_buckets);
    split_tokens(text)
        .iter()
        .map(|t| (fnv1a64(t) % v) as u32)
        .collect()
}

/// Text fed to the reasoning encoder: every step rendered as
/// `<role>:<kind> <text>`, joined with single spaces.
pub fn segment_text(segment: &AgentSegment) -> String {
    segment
        .steps
        .iter()
        .map(|s| format!("{}:{} {}", s.agent_role, s.kind.as_str(), s.text))
        .collect::<Vec<_>>()
        .join(" ")
}
