//! Independent reference implementations used by the test suites.
//!
//! Nothing here calls into the library's encoders, losses or metrics: the
//! forward pass, tokenizer, hash, losses, rankings and IR metrics are written
//! out straight-line from their definitions. Only plain data (parameter
//! values, trace structs) is read from library types.
#![allow(dead_code, clippy::needless_range_loop)]

use eager_core::representation::RepresentationModel;
use eager_core::trace::AgentSegment;

// ---------------------------------------------------------------- forward

pub fn fnv(token: &str) -> u64 {
    let mut h: u64 = 14695981039346656037;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(1099511628211);
    }
    h
}

pub fn buckets(text: &str, v: u32) -> Vec<usize> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            for l in c.to_lowercase() {
                cur.push(l);
            }
        } else if !cur.is_empty() {
            out.push((fnv(&cur) % v as u64) as usize);
            cur.clear();
        }
    }
    if !cur.is_empty() {
        out.push((fnv(&cur) % v as u64) as usize);
    }
    out
}

fn kind_name(kind: eager_core::trace::StepKind) -> &'static str {
    use eager_core::trace::StepKind::*;
    match kind {
        Thought => "thought",
        ToolCall => "tool_call",
        ToolResult => "tool_result",
        Message => "message",
        FinalAnswer => "final_answer",
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= n;
    }
    v
}

pub fn segment_embedding(model: &RepresentationModel, seg: &AgentSegment) -> Vec<f64> {
    let mut text = String::new();
    for (i, s) in seg.steps.iter().enumerate() {
        if i > 0 {
            text.push(' ');
        }
        text.push_str(&s.agent_role);
        text.push(':');
        text.push_str(kind_name(s.kind));
        text.push(' ');
        text.push_str(&s.text);
    }
    let toks = buckets(&text, model.featurizer.vocab_buckets);
    let p = &model.params;
    let d = model.config.embed_dim as usize;
    let h = model.config.hidden_dim as usize;
    let mut u = vec![0.0; d];
    for j in 0..d {
        let mut acc = 0.0;
        for &t in &toks {
            acc += p.token_table.get(t, j);
        }
        u[j] = acc / toks.len() as f64;
    }
    let mut a = vec![0.0; h];
    for i in 0..h {
        let mut acc = p.reasoning.b1[i];
        for j in 0..d {
            acc += p.reasoning.w1.get(i, j) * u[j];
        }
        a[i] = acc.tanh();
    }
    let mut r = vec![0.0; d];
    for k in 0..d {
        let mut acc = p.reasoning.b2[k];
        for i in 0..h {
            acc += p.reasoning.w2.get(k, i) * a[i];
        }
        r[k] = acc;
    }
    unit(r)
}

pub fn trace_embedding(model: &RepresentationModel, zs: &[Vec<f64>]) -> Vec<f64> {
    let p = &model.params;
    let d = model.config.embed_dim as usize;
    let h = model.config.trace_hidden_dim as usize;
    let m = zs.len() as f64;
    let mut g = vec![0.0; 2 * d];
    for j in 0..d {
        let mut mean = 0.0;
        let mut weighted = 0.0;
        for (i, z) in zs.iter().enumerate() {
            mean += z[j];
            weighted += ((i + 1) as f64 / m) * z[j];
        }
        g[j] = mean / m;
        g[d + j] = weighted / m;
    }
    let mut a = vec![0.0; h];
    for i in 0..h {
        let mut acc = p.trace.b1[i];
        for j in 0..2 * d {
            acc += p.trace.w1.get(i, j) * g[j];
        }
        a[i] = acc.tanh();
    }
    let mut r = vec![0.0; d];
    for k in 0..d {
        let mut acc = p.trace.b2[k];
        for i in 0..h {
            acc += p.trace.w2.get(k, i) * a[i];
        }
        r[k] = acc;
    }
    unit(r)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

// ---------------------------------------------------------------- losses

/// A batch as plain nested data: groups → traces → segments.
pub struct OracleBatch<'a> {
    pub groups: Vec<Vec<&'a [AgentSegment]>>,
}

struct Embedded {
    group: usize,
    roles: Vec<String>,
    segs: Vec<Vec<f64>>,
    full: Vec<f64>,
    prefixes: Vec<Vec<f64>>,
}

fn embed_all(model: &RepresentationModel, batch: &OracleBatch) -> Vec<Embedded> {
    let mut out = Vec::new();
    for (g, traces) in batch.groups.iter().enumerate() {
        for segs in traces {
            let zs: Vec<Vec<f64>> = segs.iter().map(|s| segment_embedding(model, s)).collect();
            let full = trace_embedding(model, &zs);
            let prefixes = (1..zs.len())
                .map(|k| trace_embedding(model, &zs[..k]))
                .collect();
            out.push(Embedded {
                group: g,
                roles: segs.iter().map(|s| s.agent_role.clone()).collect(),
                segs: zs,
                full,
                prefixes,
            });
        }
    }
    out
}

fn nce(anchor: &[f64], pos: &[&Vec<f64>], neg: &[&Vec<f64>], tau: f64) -> f64 {
    let p: f64 = pos.iter().map(|x| (cosine(anchor, x) / tau).exp()).sum();
    let n: f64 = neg.iter().map(|x| (cosine(anchor, x) / tau).exp()).sum();
    -(p / (p + n)).ln()
}

/// `None` when no anchor has both positives and negatives.
pub fn loss_intra(model: &RepresentationModel, batch: &OracleBatch, tau: f64) -> Option<f64> {
    let e = embed_all(model, batch);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t, tr) in e.iter().enumerate() {
        for (s, role) in tr.roles.iter().enumerate() {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for (t2, tr2) in e.iter().enumerate() {
                for (s2, role2) in tr2.roles.iter().enumerate() {
                    if role2 != role {
                        continue;
                    }
                    if tr2.group == tr.group && t2 != t {
                        pos.push(&tr2.segs[s2]);
                    } else if tr2.group != tr.group {
                        neg.push(&tr2.segs[s2]);
                    }
                }
            }
            if !pos.is_empty() && !neg.is_empty() {
                sum += nce(&tr.segs[s], &pos, &neg, tau);
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

pub fn loss_inter(model: &RepresentationModel, batch: &OracleBatch, tau: f64) -> Option<f64> {
    let e = embed_all(model, batch);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t, tr) in e.iter().enumerate() {
        let pos: Vec<&Vec<f64>> = e
            .iter()
            .enumerate()
            .filter(|(t2, o)| *t2 != t && o.group == tr.group)
            .map(|(_, o)| &o.full)
            .collect();
        let neg: Vec<&Vec<f64>> = e
            .iter()
            .filter(|o| o.group != tr.group)
            .map(|o| &o.full)
            .collect();
        if !pos.is_empty() && !neg.is_empty() {
            sum += nce(&tr.full, &pos, &neg, tau);
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

pub fn loss_rank(model: &RepresentationModel, batch: &OracleBatch, tau: f64, gamma: f64) -> f64 {
    let e = embed_all(model, batch);
    let mut total = 0.0;
    for (t, tr) in e.iter().enumerate() {
        let m = tr.segs.len();
        if m < 2 {
            continue;
        }
        let mut mono = 0.0;
        for k in 1..=m.saturating_sub(2) {
            let gain = cosine(&tr.prefixes[k], &tr.full) - cosine(&tr.prefixes[k - 1], &tr.full);
            mono += (gamma - gain).max(0.0);
        }
        let negs: Vec<&Vec<f64>> = e
            .iter()
            .enumerate()
            .filter(|(t2, _)| *t2 != t)
            .map(|(_, o)| &o.full)
            .collect();
        let mut disc = 0.0;
        for k in 1..m {
            disc += nce(&tr.prefixes[k - 1], &[&tr.full], &negs, tau);
        }
        total += mono + disc / (m - 1) as f64;
    }
    total / e.len() as f64
}

// ---------------------------------------------------------------- retrieval

/// Full scan, sorted by descending score then ascending id.
pub fn full_scan_top_k(scores: &[(u64, f64)], k: usize) -> Vec<(u64, f64)> {
    let mut all = scores.to_vec();
    // insertion sort, deliberately unlike the library's implementation
    for i in 1..all.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (all[j - 1], all[j]);
            let b_first = b.1 > a.1 || (b.1 == a.1 && b.0 < a.0);
            if !b_first {
                break;
            }
            all.swap(j - 1, j);
            j -= 1;
        }
    }
    all.truncate(k);
    all
}

pub fn recall_at_k(ranking: &[usize], relevant: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for r in relevant {
        if let Some(pos) = ranking.iter().position(|x| x == r) {
            if pos < k {
                hits += 1;
            }
        }
    }
    hits as f64 / relevant.len() as f64
}

pub fn ndcg_at_k(ranking: &[usize], relevant: &[usize], k: usize) -> f64 {
    let mut dcg = 0.0;
    for (i, item) in ranking.iter().enumerate() {
        if i >= k {
            break;
        }
        if relevant.contains(item) {
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let mut ideal = 0.0;
    for i in 0..relevant.len().min(k) {
        ideal += 1.0 / ((i + 2) as f64).log2();
    }
    dcg / ideal
}

pub fn mrr_at_k(ranking: &[usize], relevant: &[usize], k: usize) -> f64 {
    for (i, item) in ranking.iter().enumerate().take(k) {
        if relevant.contains(item) {
            return 1.0 / (i + 1) as f64;
        }
    }
    0.0
}
