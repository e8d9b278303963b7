//! Experiment reports as aligned text tables and JSON.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{Classification, DiagnosisMetrics, LatencyStats, RetrievalRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationStats {
    pub p: f64,
    pub budget: u32,
    pub trials: usize,
    pub resolved_with: f64,
    pub resolved_without: f64,
    /// `1 - (1 - p)^budget`.
    pub expected: f64,
    pub runtime_calls: u64,
    pub enqueued: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub title: String,
    /// Protocol notes printed under the title.
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retrieval: Vec<RetrievalRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<Classification>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<DiagnosisMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mitigation: Vec<MitigationStats>,
    /// Wall-clock; excluded from the machine-readable form so reports are
    /// reproducible byte for byte.
    #[serde(skip)]
    pub latency: Option<LatencyStats>,
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let _ = writeln!(out, "{}", line(header.to_vec()));
    let _ = writeln!(
        out,
        "{}",
        widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("  ")
    );
    for r in rows {
        let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
    }
}

impl MetricReport {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            notes: Vec::new(),
            retrieval: Vec::new(),
            detection: None,
            diagnosis: None,
            mitigation: Vec::new(),
            latency: None,
        }
    }

    pub fn retrieval_at(&self, k: usize) -> Option<&RetrievalRow> {
        self.retrieval.iter().find(|r| r.k == k)
    }

    /// Aligned text tables. Latency is included only if `with_latency`.
    pub fn render(&self, with_latency: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        for n in &self.notes {
            let _ = writeln!(out, "  {n}");
        }
        if !self.retrieval.is_empty() {
            out.push('\n');
            let rows: Vec<Vec<String>> = self
                .retrieval
                .iter()
                .map(|r| vec![format!("@{}", r.k), pct(r.recall), pct(r.ndcg), pct(r.mrr)])
                .collect();
            table(&mut out, &["k", "Recall", "NDCG", "MRR"], &rows);
        }
        if self.detection.is_some() || self.diagnosis.is_some() {
            out.push('\n');
            let mut rows = Vec::new();
            if let Some(d) = &self.detection {
                rows.push(vec![
                    "Anomaly Detection".into(),
                    pct(d.precision),
                    pct(d.recall),
                    pct(d.f1),
                    "-".into(),
                ]);
            }
            if let Some(d) = &self.diagnosis {
                rows.push(vec![
                    "Failure Diagnosis".into(),
                    pct(d.precision),
                    pct(d.recall),
                    pct(d.f1),
                    pct(d.accuracy),
                ]);
            }
            table(
                &mut out,
                &["Task", "Precision", "Recall", "F1", "Accuracy"],
                &rows,
            );
        }
        if !self.mitigation.is_empty() {
            out.push('\n');
            let rows: Vec<Vec<String>> = self
                .mitigation
                .iter()
                .map(|m| {
                    vec![
                        format!("{:.2}", m.p),
                        m.budget.to_string(),
                        m.trials.to_string(),
                        pct(m.resolved_without),
                        pct(m.resolved_with),
                        pct(m.expected),
                    ]
                })
                .collect();
            table(
                &mut out,
                &["p", "budget", "trials", "without", "with", "expected"],
                &rows,
            );
        }
        if let (true, Some(l)) = (with_latency, &self.latency) {
            out.push('\n');
            let _ = writeln!(
                out,
                "Detection latency (sidecar only): mean {:.1} us, p95 {} us over {} checks",
                l.mean_us, l.p95_us, l.samples
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
