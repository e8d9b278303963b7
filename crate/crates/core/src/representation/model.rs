use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use super::featurizer::{segment_text, tokenize, FeaturizerConfig};
use super::linalg::{axpy, dot, norm, Matrix};
use super::RepresentationError;
use crate::trace::AgentSegment;

/// Tolerance on the L2 norm of every [`Embedding`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: u32,
    pub hidden_dim: u32,
    pub trace_hidden_dim: u32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 128,
            trace_hidden_dim: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), RepresentationError> {
        if self.embed_dim < 2 {
            return Err(RepresentationError::InvalidConfig(format!(
                "embed_dim must be >= 2, got {}",
                self.embed_dim
            )));
        }
        if self.hidden_dim < self.embed_dim {
            return Err(RepresentationError::InvalidConfig(format!(
                "hidden_dim {} must be >= embed_dim {}",
                self.hidden_dim, self.embed_dim
            )));
        }
        if self.trace_hidden_dim == 0 {
            return Err(RepresentationError::InvalidConfig(
                "trace_hidden_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A unit-norm vector in the shared segment/trace latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `raw`; fails if its norm is below `1e-12`.
    pub fn normalize(raw: Vec<f64>) -> Result<Self, RepresentationError> {
        Self::normalize_with_norm(raw).map(|(e, _)| e)
    }

    fn normalize_with_norm(mut raw: Vec<f64>) -> Result<(Self, f64), RepresentationError> {
        let n = norm(&raw);
        if !(n >= DEGENERATE_NORM) {
            return Err(RepresentationError::DegenerateEmbedding);
        }
        raw.iter_mut().for_each(|x| *x /= n);
        Ok((Self(raw), n))
    }

    /// Wraps a vector that is already unit-norm (within [`UNIT_NORM_TOLERANCE`]).
    pub fn from_unit(values: Vec<f64>) -> Result<Self, RepresentationError> {
        let n = norm(&values);
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(RepresentationError::NotUnitNorm(n));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Cosine similarity; both sides are unit-norm so this is a dot product.
    pub fn similarity(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }
}

/// One-hidden-layer tanh MLP: `W2·tanh(W1·x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Mlp {
    fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, input),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(output, hidden),
            b2: vec![0.0; output],
        }
    }

    fn forward(&self, input: Vec<f64>) -> Result<MlpCache, RepresentationError> {
        let act: Vec<f64> = self
            .w1
            .affine(&input, &self.b1)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let raw = self.w2.affine(&act, &self.b2);
        let (out, raw_norm) = Embedding::normalize_with_norm(raw)?;
        Ok(MlpCache {
            input,
            act,
            raw_norm,
            out,
        })
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the MLP input, given `d_out` = ∂L/∂(normalized output).
    fn backward(&self, cache: &MlpCache, d_out: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let z = cache.out.values();
        let proj = dot(z, d_out);
        let d_raw: Vec<f64> = d_out
            .iter()
            .zip(z)
            .map(|(g, zi)| (g - zi * proj) / cache.raw_norm)
            .collect();
        grad.w2.add_outer(&d_raw, &cache.act);
        axpy(1.0, &d_raw, &mut grad.b2);
        let d_act = self.w2.transpose_mul(&d_raw);
        let d_pre: Vec<f64> = d_act
            .iter()
            .zip(&cache.act)
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        grad.w1.add_outer(&d_pre, &cache.input);
        axpy(1.0, &d_pre, &mut grad.b1);
        self.w1.transpose_mul(&d_pre)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MlpCache {
    input: Vec<f64>,
    act: Vec<f64>,
    raw_norm: f64,
    out: Embedding,
}

/// Forward-pass record of one segment encoding, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct SegmentForward {
    tokens: Vec<u32>,
    mlp: MlpCache,
}

impl SegmentForward {
    pub fn embedding(&self) -> &Embedding {
        &self.mlp.out
    }
}

/// Forward-pass record of one trace (or prefix) encoding.
#[derive(Debug, Clone)]
pub struct TraceForward {
    len: usize,
    mlp: MlpCache,
}

impl TraceForward {
    pub fn embedding(&self) -> &Embedding {
        &self.mlp.out
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// All trainable parameters. Also used as the gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub token_table: Matrix,
    pub reasoning: Mlp,
    pub trace: Mlp,
}

impl Params {
    pub fn zeros(vocab: usize, cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim as usize;
        Self {
            token_table: Matrix::zeros(vocab, d),
            reasoning: Mlp::zeros(d, cfg.hidden_dim as usize, d),
            trace: Mlp::zeros(2 * d, cfg.trace_hidden_dim as usize, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    /// Tensors in storage order: E, W1, b1, W2, b2, U1, c1, U2, c2.
    pub fn tensors(&self) -> [&[f64]; 9] {
        [
            self.token_table.as_slice(),
            self.reasoning.w1.as_slice(),
            &self.reasoning.b1,
            self.reasoning.w2.as_slice(),
            &self.reasoning.b2,
            self.trace.w1.as_slice(),
            &self.trace.b1,
            self.trace.w2.as_slice(),
            &self.trace.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.token_table.as_mut_slice(),
            self.reasoning.w1.as_mut_slice(),
            &mut self.reasoning.b1,
            self.reasoning.w2.as_mut_slice(),
            &mut self.reasoning.b2,
            self.trace.w1.as_mut_slice(),
            &mut self.trace.b1,
            self.trace.w2.as_mut_slice(),
            &mut self.trace.b2,
        ]
    }

    /// Shape (rows, cols) of each tensor; vectors are `(len, 1)`.
    pub fn shapes(&self) -> [(usize, usize); 9] {
        let m = |m: &Matrix| (m.rows(), m.cols());
        let v = |v: &Vec<f64>| (v.len(), 1);
        [
            m(&self.token_table),
            m(&self.reasoning.w1),
            v(&self.reasoning.b1),
            m(&self.reasoning.w2),
            v(&self.reasoning.b2),
            m(&self.trace.w1),
            v(&self.trace.b1),
            m(&self.trace.w2),
            v(&self.trace.b2),
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Params) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(alpha, src, dst);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for t in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat(&mut self, mut idx: usize, value: f64) {
        for t in self.tensors_mut() {
            if idx < t.len() {
                t[idx] = value;
                return;
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }
}

/// Reasoning Encoder (segment → embedding) and Trace Encoder (ordered segment
/// embeddings → embedding).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationModel {
    pub config: ModelConfig,
    pub featurizer: FeaturizerConfig,
    pub params: Params,
    pub version: u64,
}

fn uniform_fill(rng: &mut Xoshiro256StarStar, values: &mut [f64], fan_in: usize, fan_out: usize) {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in values {
        *v = rng.gen_range(-s..s);
    }
}

impl RepresentationModel {
    /// Glorot-uniform weights from xoshiro256** seeded with `cfg.seed`
    /// (expanded through SplitMix64), zero biases. Draw order: E, W1, W2, U1, U2.
    pub fn init(
        cfg: ModelConfig,
        featurizer: FeaturizerConfig,
    ) -> Result<Self, RepresentationError> {
        cfg.validate()?;
        if featurizer.vocab_buckets < 2 {
            return Err(RepresentationError::InvalidConfig(format!(
                "vocab_buckets must be >= 2, got {}",
                featurizer.vocab_buckets
            )));
        }
        let mut params = Params::zeros(featurizer.vocab_buckets as usize, &cfg);
        let mut rng = Xoshiro256StarStar::seed_from_u64(cfg.seed);
        for m in [
            &mut params.token_table,
            &mut params.reasoning.w1,
            &mut params.reasoning.w2,
            &mut params.trace.w1,
            &mut params.trace.w2,
        ] {
            let (rows, cols) = (m.rows(), m.cols());
            uniform_fill(&mut rng, m.as_mut_slice(), cols.max(1), rows.max(1));
        }
        Ok(Self {
            config: cfg,
            featurizer,
            params,
            version: 1,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim as usize
    }

    pub fn segment_tokens(&self, segment: &AgentSegment) -> Vec<u32> {
        tokenize(&segment_text(segment), &self.featurizer)
    }

    pub fn encode_segment(&self, segment: &AgentSegment) -> Result<Embedding, RepresentationError> {
        self.forward_tokens(&self.segment_tokens(segment))
            .map(|f| f.mlp.out)
    }

    /// Reasoning Encoder on pre-tokenized input.
    pub fn forward_tokens(&self, tokens: &[u32]) -> Result<SegmentForward, RepresentationError> {
        if tokens.is_empty() {
            return Err(RepresentationError::EmptySegmentText);
        }
        let d = self.embed_dim();
        let mut u = vec![0.0; d];
        for &t in tokens {
            axpy(1.0, self.params.token_table.row(t as usize), &mut u);
        }
        let inv = 1.0 / tokens.len() as f64;
        u.iter_mut().for_each(|x| *x *= inv);
        let mlp = self.params.reasoning.forward(u)?;
        Ok(SegmentForward {
            tokens: tokens.to_vec(),
            mlp,
        })
    }

    pub fn backward_segment(&self, fwd: &SegmentForward, d_out: &[f64], grad: &mut Params) {
        let d_u = self
            .params
            .reasoning
            .backward(&fwd.mlp, d_out, &mut grad.reasoning);
        let inv = 1.0 / fwd.tokens.len() as f64;
        for &t in &fwd.tokens {
            axpy(inv, &d_u, grad.token_table.row_mut(t as usize));
        }
    }

    pub fn encode_trace(&self, segments: &[Embedding]) -> Result<Embedding, RepresentationError> {
        let inputs: Vec<&[f64]> = segments.iter().map(Embedding::values).collect();
        self.forward_trace(&inputs).map(|f| f.mlp.out)
    }

    /// Trace embedding of the first `k` segments, positions re-scaled to `i/k`.
    pub fn encode_prefix(
        &self,
        segments: &[Embedding],
        k: usize,
    ) -> Result<Embedding, RepresentationError> {
        if k == 0 || k > segments.len() {
            return Err(RepresentationError::PrefixOutOfRange {
                k,
                len: segments.len(),
            });
        }
        self.encode_trace(&segments[..k])
    }

    /// Trace Encoder: `g = [mean zᵢ ; mean (i/m)·zᵢ]`, then the trace MLP.
    pub fn forward_trace(&self, inputs: &[&[f64]]) -> Result<TraceForward, RepresentationError> {
        let m = inputs.len();
        if m == 0 {
            return Err(RepresentationError::EmptyTrace);
        }
        let d = self.embed_dim();
        if let Some(bad) = inputs.iter().find(|z| z.len() != d) {
            return Err(RepresentationError::DimensionMismatch {
                expected: d,
                found: bad.len(),
            });
        }
        let mf = m as f64;
        let mut g = vec![0.0; 2 * d];
        for (i, z) in inputs.iter().enumerate() {
            let p = (i + 1) as f64 / mf;
            let (mean, weighted) = g.split_at_mut(d);
            axpy(1.0 / mf, z, mean);
            axpy(p / mf, z, weighted);
        }
        let mlp = self.params.trace.forward(g)?;
        Ok(TraceForward { len: m, mlp })
    }

    /// Accumulates trace-MLP gradients and adds ∂L/∂zᵢ into `d_inputs[i]`.
    pub fn backward_trace(
        &self,
        fwd: &TraceForward,
        d_out: &[f64],
        grad: &mut Params,
        d_inputs: &mut [Vec<f64>],
    ) {
        let d = self.embed_dim();
        let d_g = self.params.trace.backward(&fwd.mlp, d_out, &mut grad.trace);
        let mf = fwd.len as f64;
        let (d_mean, d_weighted) = d_g.split_at(d);
        for (i, dz) in d_inputs.iter_mut().take(fwd.len).enumerate() {
            let p = (i + 1) as f64 / mf;
            axpy(1.0 / mf, d_mean, dz);
            axpy(p / mf, d_weighted, dz);
        }
    }
}
