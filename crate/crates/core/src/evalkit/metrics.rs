//! Ranking and classification metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::trace::FailureType;

/// One ranked query: item ids in rank order and the ids that are relevant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedQuery {
    pub ranking: Vec<usize>,
    pub relevant: BTreeSet<usize>,
}

fn check_k(k: usize) -> Result<(), EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidConfig("k must be >= 1".into()));
    }
    Ok(())
}

/// `|relevant ∩ top-k| / |relevant|`.
pub fn query_recall(q: &RankedQuery, k: usize) -> f64 {
    let hits = q
        .ranking
        .iter()
        .take(k)
        .filter(|i| q.relevant.contains(i))
        .count();
    hits as f64 / q.relevant.len() as f64
}

/// DCG@k with gain `1 / log2(rank + 1)`, normalized by the ideal DCG.
pub fn query_ndcg(q: &RankedQuery, k: usize) -> f64 {
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = q
        .ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| q.relevant.contains(i))
        .map(|(pos, _)| gain(pos + 1))
        .sum();
    let ideal: f64 = (1..=q.relevant.len().min(k)).map(gain).sum();
    dcg / ideal
}

/// Reciprocal rank of the first relevant item within the top k, else 0.
pub fn query_mrr(q: &RankedQuery, k: usize) -> f64 {
    q.ranking
        .iter()
        .take(k)
        .position(|i| q.relevant.contains(i))
        .map_or(0.0, |pos| 1.0 / (pos + 1) as f64)
}

fn macro_average(
    queries: &[RankedQuery],
    k: usize,
    f: fn(&RankedQuery, usize) -> f64,
) -> Result<f64, EvalError> {
    check_k(k)?;
    let usable: Vec<&RankedQuery> = queries.iter().filter(|q| !q.relevant.is_empty()).collect();
    let skipped = queries.len() - usable.len();
    if skipped > 0 {
        tracing::warn!(skipped, "queries without relevant items skipped");
    }
    if usable.is_empty() {
        return Ok(0.0);
    }
    Ok(usable.iter().map(|q| f(q, k)).sum::<f64>() / usable.len() as f64)
}

/// Macro-averaged Recall@k. Queries with no relevant items are skipped.
pub fn recall_at_k(queries: &[RankedQuery], k: usize) -> Result<f64, EvalError> {
    macro_average(queries, k, query_recall)
}

pub fn ndcg_at_k(queries: &[RankedQuery], k: usize) -> Result<f64, EvalError> {
    macro_average(queries, k, query_ndcg)
}

pub fn mrr_at_k(queries: &[RankedQuery], k: usize) -> Result<f64, EvalError> {
    macro_average(queries, k, query_mrr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

pub fn retrieval_rows(
    queries: &[RankedQuery],
    ks: &[usize],
) -> Result<Vec<RetrievalRow>, EvalError> {
    ks.iter()
        .map(|&k| {
            Ok(RetrievalRow {
                k,
                recall: recall_at_k(queries, k)?,
                ndcg: ndcg_at_k(queries, k)?,
                mrr: mrr_at_k(queries, k)?,
            })
        })
        .collect()
}

/// Binary confusion counts with derived rates; empty denominators give 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Confusion::default();
        for (predicted, actual) in pairs {
            match (predicted, actual) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

impl From<Confusion> for Classification {
    fn from(c: Confusion) -> Self {
        Self {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            confusion: c,
        }
    }
}

/// Diagnosis quality over (predicted, actual) type pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisMetrics {
    pub evaluated: usize,
    pub accuracy: f64,
    /// Macro precision / recall / F1 over the actual types present.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn diagnosis_metrics(pairs: &[(Option<FailureType>, FailureType)]) -> DiagnosisMetrics {
    let evaluated = pairs.len();
    let correct = pairs.iter().filter(|(p, a)| *p == Some(*a)).count();
    let types: BTreeSet<FailureType> = pairs.iter().map(|(_, a)| *a).collect();
    let mut per: BTreeMap<FailureType, Confusion> = BTreeMap::new();
    for t in &types {
        let c = Confusion::from_pairs(pairs.iter().map(|(p, a)| (*p == Some(*t), a == t)));
        per.insert(*t, c);
    }
    let n = per.len().max(1) as f64;
    DiagnosisMetrics {
        evaluated,
        accuracy: ratio(correct, evaluated),
        precision: per.values().map(Confusion::precision).sum::<f64>() / n,
        recall: per.values().map(Confusion::recall).sum::<f64>() / n,
        f1: per.values().map(Confusion::f1).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub mean_us: f64,
    /// Nearest-rank 95th percentile.
    pub p95_us: u64,
}

pub fn latency_stats(samples: &[u64]) -> LatencyStats {
    if samples.is_empty() {
        return LatencyStats {
            samples: 0,
            mean_us: 0.0,
            p95_us: 0,
        };
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let rank = (0.95 * sorted.len() as f64).ceil() as usize;
    LatencyStats {
        samples: sorted.len(),
        mean_us: sorted.iter().sum::<u64>() as f64 / sorted.len() as f64,
        p95_us: sorted[rank.clamp(1, sorted.len()) - 1],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(ranking: &[usize], relevant: &[usize]) -> RankedQuery {
        RankedQuery {
            ranking: ranking.to_vec(),
            relevant: relevant.iter().copied().collect(),
        }
    }

    #[test]
    fn perfect_single_relevant() {
        let qs = [q(&[7, 1, 2], &[7])];
        assert_eq!(recall_at_k(&qs, 10).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&qs, 10).unwrap(), 1.0);
        assert_eq!(mrr_at_k(&qs, 10).unwrap(), 1.0);
    }

    #[test]
    fn ndcg_of_ranks_two_and_three() {
        let v = query_ndcg(&q(&[0, 1, 2, 3], &[1, 2]), 10);
        let expected = (1.0 / 3f64.log2() + 1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert_eq!(v, expected);
        assert!((v - 0.6934).abs() < 5e-5);
    }

    #[test]
    fn mrr_first_hit_at_four() {
        assert_eq!(query_mrr(&q(&[0, 1, 2, 3, 4], &[3, 4]), 10), 0.25);
        assert_eq!(query_mrr(&q(&[0, 1, 2, 3, 4], &[3, 4]), 3), 0.0);
    }

    #[test]
    fn empty_relevant_skipped_and_k_checked() {
        let qs = [q(&[0, 1], &[]), q(&[0, 1], &[1])];
        assert_eq!(recall_at_k(&qs, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&qs, 2).unwrap(), 1.0);
        assert!(recall_at_k(&qs, 0).is_err());
    }

    #[test]
    fn confusion_rates() {
        let c = Confusion::from_pairs([
            (true, true),
            (true, false),
            (false, true),
            (false, false),
            (true, true),
        ]);
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 1, 1, 1));
        assert!((c.f1() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(Confusion::default().f1(), 0.0);
    }

    #[test]
    fn diagnosis_accuracy_and_macro() {
        use FailureType::*;
        let m = diagnosis_metrics(&[
            (Some(IncorrectCode), IncorrectCode),
            (Some(EditingError), IncorrectCode),
            (None, EditingError),
            (Some(EditingError), EditingError),
        ]);
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.evaluated, 4);
        // IncorrectCode: p 1, r .5 ; EditingError: p .5, r .5
        assert!((m.precision - 0.75).abs() < 1e-15);
        assert!((m.recall - 0.5).abs() < 1e-15);
    }

    #[test]
    fn p95_nearest_rank() {
        let s: Vec<u64> = (1..=100).collect();
        assert_eq!(latency_stats(&s).p95_us, 95);
        assert_eq!(latency_stats(&[5]).p95_us, 5);
        assert_eq!(latency_stats(&[]).samples, 0);
    }
}
