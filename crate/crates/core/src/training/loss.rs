//! The three contrastive objectives and their gradients.
//!
//! Each loss is computed on embeddings first, producing ∂L/∂embedding for
//! every segment, full-trace and prefix embedding of the batch; a single
//! backward sweep then pushes those through the trace encoder (into the
//! segment embeddings) and the reasoning encoder (into the token table).

use std::collections::BTreeMap;
use std::fmt;

use super::{LossConfig, TrainError, TrainingBatch};
use crate::representation::linalg::{axpy, dot};
use crate::representation::{Params, RepresentationModel, SegmentForward, TraceForward};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossComponent {
    Intra,
    Inter,
    Rank,
}

impl fmt::Display for LossComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossComponent::Intra => "L_intra",
            LossComponent::Inter => "L_inter",
            LossComponent::Rank => "L_rank",
        })
    }
}

#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Params,
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    /// `None` when the component's weight is zero and it was skipped.
    pub intra: Option<f64>,
    pub inter: Option<f64>,
    pub rank: Option<f64>,
    pub grad: Params,
}

/// Forward pass over every trace of a batch.
pub struct BatchForward {
    group_of: Vec<usize>,
    roles: Vec<Vec<String>>,
    segments: Vec<Vec<SegmentForward>>,
    full: Vec<TraceForward>,
    /// `prefixes[t][k - 1]` encodes the first `k` segments, `k < m`.
    prefixes: Vec<Vec<TraceForward>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Segment(usize, usize),
    Full(usize),
    Prefix(usize, usize),
}

impl BatchForward {
    pub fn run(
        batch: &TrainingBatch,
        model: &RepresentationModel,
        with_prefixes: bool,
    ) -> Result<Self, TrainError> {
        let n = batch.trace_count();
        let mut fwd = BatchForward {
            group_of: Vec::with_capacity(n),
            roles: Vec::with_capacity(n),
            segments: Vec::with_capacity(n),
            full: Vec::with_capacity(n),
            prefixes: Vec::with_capacity(n),
        };
        for (g, trace) in batch.traces() {
            let segs = trace
                .segments
                .iter()
                .map(|s| model.forward_tokens(&model.segment_tokens(s)))
                .collect::<Result<Vec<_>, _>>()?;
            let inputs: Vec<&[f64]> = segs.iter().map(|s| s.embedding().values()).collect();
            let full = model.forward_trace(&inputs)?;
            let prefixes = if with_prefixes {
                (1..inputs.len())
                    .map(|k| model.forward_trace(&inputs[..k]))
                    .collect::<Result<Vec<_>, _>>()?
            } else {
                Vec::new()
            };
            fwd.group_of.push(g);
            fwd.roles.push(
                trace
                    .segments
                    .iter()
                    .map(|s| s.agent_role.clone())
                    .collect(),
            );
            fwd.segments.push(segs);
            fwd.full.push(full);
            fwd.prefixes.push(prefixes);
        }
        Ok(fwd)
    }

    pub fn trace_count(&self) -> usize {
        self.full.len()
    }

    pub fn segment_embedding(&self, t: usize, s: usize) -> &[f64] {
        self.segments[t][s].embedding().values()
    }

    pub fn trace_embedding(&self, t: usize) -> &[f64] {
        self.full[t].embedding().values()
    }

    fn emb(&self, slot: Slot) -> &[f64] {
        match slot {
            Slot::Segment(t, s) => self.segment_embedding(t, s),
            Slot::Full(t) => self.trace_embedding(t),
            Slot::Prefix(t, k) => self.prefixes[t][k - 1].embedding().values(),
        }
    }
}

/// ∂L/∂embedding for every embedding of a [`BatchForward`].
struct EmbeddingGrads {
    segments: Vec<Vec<Vec<f64>>>,
    full: Vec<Vec<f64>>,
    prefixes: Vec<Vec<Vec<f64>>>,
}

impl EmbeddingGrads {
    fn zeros(fwd: &BatchForward, d: usize) -> Self {
        Self {
            segments: fwd
                .segments
                .iter()
                .map(|s| vec![vec![0.0; d]; s.len()])
                .collect(),
            full: vec![vec![0.0; d]; fwd.full.len()],
            prefixes: fwd
                .prefixes
                .iter()
                .map(|p| vec![vec![0.0; d]; p.len()])
                .collect(),
        }
    }

    fn slot_mut(&mut self, slot: Slot) -> &mut Vec<f64> {
        match slot {
            Slot::Segment(t, s) => &mut self.segments[t][s],
            Slot::Full(t) => &mut self.full[t],
            Slot::Prefix(t, k) => &mut self.prefixes[t][k - 1],
        }
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Multi-positive InfoNCE from the anchor's similarities to its positives
/// and negatives: `−log(Σ_P e^{s/τ} / (Σ_P e^{s/τ} + Σ_N e^{s/τ}))`.
pub fn info_nce_value(positive_sims: &[f64], negative_sims: &[f64], tau: f64) -> f64 {
    let pos = positive_sims.iter().map(|s| s / tau);
    let all = pos.clone().chain(negative_sims.iter().map(|s| s / tau));
    log_sum_exp(all) - log_sum_exp(pos)
}

/// [`info_nce_value`] for one anchor of a batch.
/// Adds `scale · ∂loss` into `grads` and returns the unscaled loss.
fn info_nce(
    fwd: &BatchForward,
    grads: &mut EmbeddingGrads,
    anchor: Slot,
    positives: &[Slot],
    negatives: &[Slot],
    tau: f64,
    scale: f64,
) -> f64 {
    let a = fwd.emb(anchor);
    let pos_logits: Vec<f64> = positives
        .iter()
        .map(|&p| dot(a, fwd.emb(p)) / tau)
        .collect();
    let neg_logits: Vec<f64> = negatives
        .iter()
        .map(|&n| dot(a, fwd.emb(n)) / tau)
        .collect();
    let lse_pos = log_sum_exp(pos_logits.iter().copied());
    let lse_all = log_sum_exp(pos_logits.iter().chain(&neg_logits).copied());
    let loss = lse_all - lse_pos;
    if scale == 0.0 {
        return loss;
    }
    let mut d_anchor = vec![0.0; a.len()];
    let others = positives
        .iter()
        .zip(&pos_logits)
        .map(|(&slot, &l)| (slot, ((l - lse_all).exp() - (l - lse_pos).exp()) / tau))
        .chain(
            negatives
                .iter()
                .zip(&neg_logits)
                .map(|(&slot, &l)| (slot, (l - lse_all).exp() / tau)),
        );
    for (slot, coef) in others {
        let c = scale * coef;
        axpy(c, fwd.emb(slot), &mut d_anchor);
        axpy(c, a, grads.slot_mut(slot));
    }
    axpy(1.0, &d_anchor, grads.slot_mut(anchor));
    loss
}

struct Anchor {
    anchor: Slot,
    positives: Vec<Slot>,
    negatives: Vec<Slot>,
}

/// Anchors of `members` that have at least one positive (another variant of
/// the same base question) and one negative (another base question).
fn contrast_anchors(fwd: &BatchForward, members: &[(usize, Slot)], out: &mut Vec<Anchor>) {
    for &(t, slot) in members {
        let g = fwd.group_of[t];
        let positives: Vec<Slot> = members
            .iter()
            .filter(|&&(t2, _)| t2 != t && fwd.group_of[t2] == g)
            .map(|&(_, s)| s)
            .collect();
        let negatives: Vec<Slot> = members
            .iter()
            .filter(|&&(t2, _)| fwd.group_of[t2] != g)
            .map(|&(_, s)| s)
            .collect();
        if !positives.is_empty() && !negatives.is_empty() {
            out.push(Anchor {
                anchor: slot,
                positives,
                negatives,
            });
        }
    }
}

fn mean_info_nce(
    fwd: &BatchForward,
    grads: &mut EmbeddingGrads,
    anchors: &[Anchor],
    tau: f64,
    weight: f64,
) -> Result<f64, TrainError> {
    if anchors.is_empty() {
        return Err(TrainError::NoContrastivePairs);
    }
    let scale = weight / anchors.len() as f64;
    let sum: f64 = anchors
        .iter()
        .map(|a| info_nce(fwd, grads, a.anchor, &a.positives, &a.negatives, tau, scale))
        .sum();
    Ok(sum / anchors.len() as f64)
}

fn intra_terms(
    fwd: &BatchForward,
    grads: &mut EmbeddingGrads,
    tau: f64,
    weight: f64,
) -> Result<f64, TrainError> {
    let mut by_role: BTreeMap<&str, Vec<(usize, Slot)>> = BTreeMap::new();
    for (t, roles) in fwd.roles.iter().enumerate() {
        for (s, role) in roles.iter().enumerate() {
            by_role
                .entry(role.as_str())
                .or_default()
                .push((t, Slot::Segment(t, s)));
        }
    }
    let mut anchors = Vec::new();
    for members in by_role.values() {
        contrast_anchors(fwd, members, &mut anchors);
    }
    mean_info_nce(fwd, grads, &anchors, tau, weight)
}

fn inter_terms(
    fwd: &BatchForward,
    grads: &mut EmbeddingGrads,
    tau: f64,
    weight: f64,
) -> Result<f64, TrainError> {
    let members: Vec<(usize, Slot)> = (0..fwd.trace_count()).map(|t| (t, Slot::Full(t))).collect();
    let mut anchors = Vec::new();
    contrast_anchors(fwd, &members, &mut anchors);
    mean_info_nce(fwd, grads, &anchors, tau, weight)
}

fn rank_terms(
    fwd: &BatchForward,
    grads: &mut EmbeddingGrads,
    tau: f64,
    margin: f64,
    weight: f64,
) -> Result<f64, TrainError> {
    let n = fwd.trace_count();
    if n == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let trace_scale = weight / n as f64;
    let mut total = 0.0;
    for t in 0..n {
        let m = fwd.segments[t].len();
        if m < 2 {
            continue;
        }
        let full = fwd.trace_embedding(t);
        let sims: Vec<f64> = (1..m)
            .map(|k| dot(fwd.emb(Slot::Prefix(t, k)), full))
            .collect();

        // monotonicity: sim(q_{k+1}, f) should exceed sim(q_k, f) by the margin
        for k in 1..m - 1 {
            let hinge = margin - (sims[k] - sims[k - 1]);
            if hinge > 0.0 {
                total += hinge;
                if trace_scale != 0.0 {
                    let (q_next, q_prev) = (Slot::Prefix(t, k + 1), Slot::Prefix(t, k));
                    axpy(-trace_scale, full, grads.slot_mut(q_next));
                    axpy(trace_scale, full, grads.slot_mut(q_prev));
                    let diff: Vec<f64> = fwd
                        .emb(q_prev)
                        .iter()
                        .zip(fwd.emb(q_next))
                        .map(|(p, q)| p - q)
                        .collect();
                    axpy(trace_scale, &diff, grads.slot_mut(Slot::Full(t)));
                }
            }
        }

        // discrimination: each prefix must pick out its own completion
        let negatives: Vec<Slot> = (0..n).filter(|&o| o != t).map(Slot::Full).collect();
        let k_scale = trace_scale / (m - 1) as f64;
        let mut disc = 0.0;
        for k in 1..m {
            disc += info_nce(
                fwd,
                grads,
                Slot::Prefix(t, k),
                &[Slot::Full(t)],
                &negatives,
                tau,
                k_scale,
            );
        }
        total += disc / (m - 1) as f64;
    }
    Ok(total / n as f64)
}

fn backward(model: &RepresentationModel, fwd: &BatchForward, grads: EmbeddingGrads) -> Params {
    let mut out = model.params.zeros_like();
    let nonzero = |v: &[f64]| v.iter().any(|&x| x != 0.0);
    let EmbeddingGrads {
        mut segments,
        full,
        prefixes,
    } = grads;
    for t in 0..fwd.trace_count() {
        let d_segs = &mut segments[t];
        if nonzero(&full[t]) {
            model.backward_trace(&fwd.full[t], &full[t], &mut out, d_segs);
        }
        for (k, d_prefix) in prefixes[t].iter().enumerate() {
            if nonzero(d_prefix) {
                model.backward_trace(&fwd.prefixes[t][k], d_prefix, &mut out, &mut d_segs[..=k]);
            }
        }
        for (s, d_seg) in d_segs.iter().enumerate() {
            if nonzero(d_seg) {
                model.backward_segment(&fwd.segments[t][s], d_seg, &mut out);
            }
        }
    }
    out
}

fn single(
    batch: &TrainingBatch,
    model: &RepresentationModel,
    cfg: &LossConfig,
    component: LossComponent,
) -> Result<LossValue, TrainError> {
    let fwd = BatchForward::run(batch, model, component == LossComponent::Rank)?;
    let mut grads = EmbeddingGrads::zeros(&fwd, model.embed_dim());
    let value = match component {
        LossComponent::Intra => intra_terms(&fwd, &mut grads, cfg.tau, 1.0)?,
        LossComponent::Inter => inter_terms(&fwd, &mut grads, cfg.tau, 1.0)?,
        LossComponent::Rank => rank_terms(&fwd, &mut grads, cfg.tau, cfg.margin, 1.0)?,
    };
    Ok(LossValue {
        value,
        grad: backward(model, &fwd, grads),
    })
}

/// Intra-scope loss: same-role segments across variants of one base question
/// are positives, same-role segments of other base questions are negatives.
pub fn loss_intra(
    batch: &TrainingBatch,
    model: &RepresentationModel,
    cfg: &LossConfig,
) -> Result<LossValue, TrainError> {
    single(batch, model, cfg, LossComponent::Intra)
}

/// Inter-scope loss over whole-trace embeddings.
pub fn loss_inter(
    batch: &TrainingBatch,
    model: &RepresentationModel,
    cfg: &LossConfig,
) -> Result<LossValue, TrainError> {
    single(batch, model, cfg, LossComponent::Inter)
}

/// Prefix-to-full ranking loss: hinge monotonicity plus prefix discrimination.
pub fn loss_rank(
    batch: &TrainingBatch,
    model: &RepresentationModel,
    cfg: &LossConfig,
) -> Result<LossValue, TrainError> {
    single(batch, model, cfg, LossComponent::Rank)
}

/// `λ1·L_intra + λ2·L_inter + λ3·L_rank`; zero-weight terms are not evaluated.
pub fn loss_total(
    batch: &TrainingBatch,
    model: &RepresentationModel,
    cfg: &LossConfig,
) -> Result<LossBreakdown, TrainError> {
    cfg.validate()?;
    let fwd = BatchForward::run(batch, model, cfg.lambda_rank > 0.0)?;
    let mut grads = EmbeddingGrads::zeros(&fwd, model.embed_dim());
    let mut total = 0.0;
    let mut run = |weight: f64,
                   f: &mut dyn FnMut(&mut EmbeddingGrads, f64) -> Result<f64, TrainError>|
     -> Result<Option<f64>, TrainError> {
        if weight > 0.0 {
            let v = f(&mut grads, weight)?;
            total += weight * v;
            Ok(Some(v))
        } else {
            Ok(None)
        }
    };
    let intra = run(cfg.lambda_intra, &mut |g, w| {
        intra_terms(&fwd, g, cfg.tau, w)
    })?;
    let inter = run(cfg.lambda_inter, &mut |g, w| {
        inter_terms(&fwd, g, cfg.tau, w)
    })?;
    let rank = run(cfg.lambda_rank, &mut |g, w| {
        rank_terms(&fwd, g, cfg.tau, cfg.margin, w)
    })?;
    Ok(LossBreakdown {
        total,
        intra,
        inter,
        rank,
        grad: backward(model, &fwd, grads),
    })
}
