//! Labeled synthetic corpora with question variation and failure injection.

use std::collections::BTreeMap;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use super::EvalError;
use crate::trace::{
    FailureType, ReasoningStep, ReasoningTrace, StepKind, SystemProfile, TraceLabel,
};

/// Failure-type distribution of a system profile, as fractions of failures.
pub fn default_profile(profile: SystemProfile) -> BTreeMap<FailureType, f64> {
    use FailureType::*;
    let pairs: &[(FailureType, f64)] = match profile {
        SystemProfile::AutogenCode => &[
            (DecompositionError, 0.3448),
            (IncorrectCode, 0.4828),
            (RoundLimitation, 0.1724),
        ],
        SystemProfile::Rclagent => &[
            (RoundLimitation, 0.0526),
            (CriticalTraceMiss, 0.5263),
            (MetricsQueryError, 0.4211),
        ],
        SystemProfile::SweAgent => &[
            (IncorrectCode, 0.4615),
            (EditingError, 0.2564),
            (LocalizationError, 0.2821),
        ],
        SystemProfile::Synthetic => {
            return FailureType::NAMED.iter().map(|t| (*t, 1.0 / 7.0)).collect();
        }
    };
    pairs.iter().copied().collect()
}

/// Which segment of the pipeline a failure type corrupts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CulpritPosition {
    First,
    Middle,
    Last,
}

pub fn culprit_position(t: FailureType) -> CulpritPosition {
    match t {
        FailureType::DecompositionError | FailureType::LocalizationError => CulpritPosition::First,
        FailureType::RoundLimitation => CulpritPosition::Last,
        _ => CulpritPosition::Middle,
    }
}

impl CulpritPosition {
    pub fn ordinal(self, pipeline_len: usize) -> usize {
        match self {
            CulpritPosition::First => 0,
            CulpritPosition::Middle => pipeline_len / 2,
            CulpritPosition::Last => pipeline_len - 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_base_questions: usize,
    pub variants_per_question: usize,
    /// Agent roles in invocation order; adjacent roles must differ.
    pub pipeline: Vec<String>,
    /// Inclusive range of steps per segment.
    pub steps_per_segment: (u32, u32),
    pub concepts_per_question: usize,
    /// Inclusive range of filler words per step.
    pub fillers_per_step: (u32, u32),
    pub failure_rate: f64,
    pub failure_profile: BTreeMap<FailureType, f64>,
    pub system_profile: SystemProfile,
    /// Base-question ids start here, so corpora can use disjoint id ranges.
    pub question_offset: usize,
    pub vocabulary: Vocabulary,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::for_profile(SystemProfile::Synthetic)
    }
}

impl GeneratorConfig {
    /// 9 base questions x 5 variants with the profile's failure distribution.
    pub fn for_profile(profile: SystemProfile) -> Self {
        Self {
            n_base_questions: 9,
            variants_per_question: 5,
            pipeline: vec!["planner".into(), "executor".into(), "verifier".into()],
            steps_per_segment: (1, 3),
            concepts_per_question: 4,
            fillers_per_step: (1, 3),
            failure_rate: 0.0,
            failure_profile: default_profile(profile),
            system_profile: profile,
            question_offset: 0,
            vocabulary: Vocabulary::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidConfig(m));
        if self.variants_per_question < 2 {
            return bad("variants_per_question must be >= 2".into());
        }
        if self.pipeline.is_empty() {
            return bad("pipeline must name at least one role".into());
        }
        if self.pipeline.windows(2).any(|w| w[0] == w[1]) {
            return bad("adjacent pipeline roles must differ".into());
        }
        if self
            .pipeline
            .iter()
            .any(|r| !crate::trace::is_valid_role(r))
        {
            return bad("pipeline contains an invalid role name".into());
        }
        let (lo, hi) = self.steps_per_segment;
        if lo == 0 || lo > hi {
            return bad(format!(
                "steps_per_segment {lo}..={hi} is empty or starts at 0"
            ));
        }
        if self.fillers_per_step.0 > self.fillers_per_step.1 {
            return bad("fillers_per_step range is empty".into());
        }
        if !(0.0..=1.0).contains(&self.failure_rate) {
            return bad(format!("failure_rate {} outside [0, 1]", self.failure_rate));
        }
        if self
            .failure_profile
            .values()
            .any(|p| !(p.is_finite() && *p >= 0.0))
        {
            return bad("failure_profile probabilities must be non-negative".into());
        }
        let total: f64 = self.failure_profile.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("failure_profile sums to {total}, expected 1"));
        }
        if self.failure_profile.contains_key(&FailureType::Unknown) {
            return bad("failure_profile cannot inject Unknown".into());
        }
        self.vocabulary
            .validate()
            .map_err(EvalError::InvalidConfig)?;
        if self.concepts_per_question == 0
            || self.concepts_per_question > self.vocabulary.concepts.len()
        {
            return bad("concepts_per_question must be in 1..=number of concepts".into());
        }
        Ok(())
    }
}

/// A generated trace and its clean counterfactual. For clean traces the two
/// are identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTrace {
    pub trace: ReasoningTrace,
    pub clean: ReasoningTrace,
}

fn kind_for(role_pos: usize, step: usize) -> StepKind {
    match role_pos % 3 {
        0 => StepKind::Thought,
        1 if step.is_multiple_of(2) => StepKind::ToolCall,
        1 => StepKind::ToolResult,
        _ => StepKind::Message,
    }
}

/// Splits `words` into `n` non-empty, contiguous chunks.
fn chunk(words: &[String], n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = n.min(words.len()).max(1);
    let mut cuts: Vec<usize> = (1..words.len()).choose_multiple(rng, n - 1);
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for c in cuts.into_iter().chain([words.len()]) {
        out.push(words[start..c].join(" "));
        start = c;
    }
    out
}

fn fillers(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng, n_steps: usize) -> Vec<String> {
    let (lo, hi) = cfg.fillers_per_step;
    (0..n_steps)
        .flat_map(|_| {
            let n = rng.gen_range(lo..=hi);
            (0..n)
                .map(|_| cfg.vocabulary.fillers.choose(rng).unwrap().clone())
                .collect::<Vec<_>>()
        })
        .collect()
}

fn segment_texts(
    cfg: &GeneratorConfig,
    role: &str,
    synonyms: &[String],
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let (lo, hi) = cfg.steps_per_segment;
    let n_steps = rng.gen_range(lo..=hi) as usize;
    let mut words: Vec<String> = cfg
        .vocabulary
        .role_words(role)
        .choose_multiple(rng, 3)
        .cloned()
        .collect();
    words.extend(synonyms.iter().cloned());
    words.extend(fillers(cfg, rng, n_steps));
    words.shuffle(rng);
    chunk(&words, n_steps, rng)
}

fn corrupted_texts(
    cfg: &GeneratorConfig,
    t: FailureType,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let vocab = cfg.vocabulary.corruption(t);
    let mut words: Vec<String> = vocab.to_vec();
    words.shuffle(rng);
    chunk(&words, n_steps, rng)
}

fn build_steps(pipeline: &[String], texts: &[Vec<String>]) -> Vec<ReasoningStep> {
    let mut steps = Vec::new();
    let last_seg = texts.len() - 1;
    for (pos, (role, seg)) in pipeline.iter().zip(texts).enumerate() {
        for (j, text) in seg.iter().enumerate() {
            let kind = if pos == last_seg && j == seg.len() - 1 {
                StepKind::FinalAnswer
            } else {
                kind_for(pos, j)
            };
            steps.push(ReasoningStep {
                index: steps.len() as u32,
                agent_role: role.clone(),
                kind,
                text: text.clone(),
                timestamp_ms: 0,
            });
        }
    }
    steps
}

fn sample_type(profile: &BTreeMap<FailureType, f64>, rng: &mut ChaCha8Rng) -> FailureType {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = FailureType::Unknown;
    for (t, p) in profile {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = *t;
        if u < acc {
            return *t;
        }
    }
    last
}

/// Generates `n_base_questions x variants_per_question` traces, grouped by
/// base question, with their clean counterfactuals.
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<GeneratedTrace>, EvalError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = &cfg.vocabulary;
    let mut out = Vec::with_capacity(cfg.n_base_questions * cfg.variants_per_question);
    for b in 0..cfg.n_base_questions {
        let base_id = format!("q{:04}", cfg.question_offset + b);
        let concepts: Vec<usize> =
            (0..vocab.concepts.len()).choose_multiple(&mut rng, cfg.concepts_per_question);
        for v in 0..cfg.variants_per_question {
            let synonyms: Vec<String> = concepts
                .iter()
                .map(|&c| vocab.concepts[c].choose(&mut rng).unwrap().clone())
                .collect();
            let question = format!("investigate {}", synonyms.join(" "));
            let clean_texts: Vec<Vec<String>> = cfg
                .pipeline
                .iter()
                .map(|role| segment_texts(cfg, role, &synonyms, &mut rng))
                .collect();
            let trace_id = format!("{base_id}-v{v}");
            let make = |texts: &[Vec<String>], label: TraceLabel, answered: bool| ReasoningTrace {
                trace_id: trace_id.clone(),
                question: question.clone(),
                base_question_id: Some(base_id.clone()),
                variant_id: Some(format!("v{v}")),
                system_profile: cfg.system_profile,
                steps: build_steps(&cfg.pipeline, texts),
                final_answer: answered.then(|| texts.last().unwrap().last().unwrap().clone()),
                label: Some(label),
            };
            let clean = make(&clean_texts, TraceLabel::clean(), true);
            let failing = cfg.failure_rate > 0.0 && rng.gen::<f64>() < cfg.failure_rate;
            if !failing {
                out.push(GeneratedTrace {
                    trace: clean.clone(),
                    clean,
                });
                continue;
            }
            let t = sample_type(&cfg.failure_profile, &mut rng);
            let ordinal = culprit_position(t).ordinal(cfg.pipeline.len());
            let mut texts = clean_texts.clone();
            let n_steps = if t == FailureType::RoundLimitation {
                1
            } else {
                texts[ordinal].len()
            };
            texts[ordinal] = corrupted_texts(cfg, t, n_steps, &mut rng);
            let label = TraceLabel {
                failed: true,
                failure_type: Some(t),
                culprit_agent_role: Some(cfg.pipeline[ordinal].clone()),
                culprit_segment_ordinal: Some(ordinal as u32),
            };
            out.push(GeneratedTrace {
                trace: make(&texts, label, t != FailureType::RoundLimitation),
                clean,
            });
        }
    }
    Ok(out)
}

/// The traces alone, without counterfactuals.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Vec<ReasoningTrace>, EvalError> {
    Ok(generate(cfg)?.into_iter().map(|g| g.trace).collect())
}
