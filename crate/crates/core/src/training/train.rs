use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{build_batches, loss_total, LossConfig, Optimizer, TrainConfig, TrainError};
use crate::representation::RepresentationModel;
use crate::trace::ReasoningTrace;

/// Mean losses over the batches of one epoch. Skipped components are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_total: f64,
    pub l_intra: Option<f64>,
    pub l_inter: Option<f64>,
    pub l_rank: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    pub batches_per_epoch: usize,
    pub dropped_groups: usize,
}

impl TrainingReport {
    /// Human-readable log, one line per epoch.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "epoch {:>4}  L_total {:.6}  L_intra {}  L_inter {}  L_rank {}",
                e.epoch,
                e.l_total,
                fmt(e.l_intra),
                fmt(e.l_inter),
                fmt(e.l_rank)
            );
        }
        out
    }

    /// JSON Lines, one record per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch record serializes") + "\n")
            .collect()
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.l_total)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.l_total)
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch as u64)
}

/// Runs `epochs` passes of optimizer steps on `loss_total`. Batches are
/// re-shuffled every epoch from a seed derived from `train_cfg.seed`.
/// The returned model's version is bumped when at least one epoch ran.
pub fn train(
    corpus: &[ReasoningTrace],
    model: &RepresentationModel,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(RepresentationModel, TrainingReport), TrainError> {
    train_cfg.validate()?;
    loss_cfg.validate()?;
    let mut model = model.clone();
    let mut report = TrainingReport::default();
    if train_cfg.epochs == 0 {
        return Ok((model, report));
    }
    let mut optimizer = Optimizer::new(train_cfg.optimizer, train_cfg.learning_rate, &model.params);
    for epoch in 0..train_cfg.epochs {
        let plan = build_batches(
            corpus,
            &TrainConfig {
                seed: epoch_seed(train_cfg.seed, epoch),
                ..*train_cfg
            },
        )?;
        report.batches_per_epoch = plan.batches.len();
        report.dropped_groups = plan.dropped_groups;
        let mut sums = [0.0f64; 4];
        for (b, batch) in plan.batches.iter().enumerate() {
            let out = loss_total(batch, &model, loss_cfg)?;
            let components = [
                ("L_total", Some(out.total)),
                ("L_intra", out.intra),
                ("L_inter", out.inter),
                ("L_rank", out.rank),
            ];
            for (i, (name, v)) in components.iter().enumerate() {
                if let Some(v) = v {
                    if !v.is_finite() {
                        return Err(TrainError::NonFinite {
                            epoch,
                            batch: b,
                            component: name.to_string(),
                        });
                    }
                    sums[i] += v;
                }
            }
            if !out.grad.all_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    component: "gradient".into(),
                });
            }
            optimizer.step(&mut model.params, &out.grad);
        }
        let n = plan.batches.len() as f64;
        let mean = |i: usize, w: f64| (w > 0.0).then(|| sums[i] / n);
        let record = EpochRecord {
            epoch: epoch + 1,
            l_total: sums[0] / n,
            l_intra: mean(1, loss_cfg.lambda_intra),
            l_inter: mean(2, loss_cfg.lambda_inter),
            l_rank: mean(3, loss_cfg.lambda_rank),
        };
        tracing::debug!(epoch = record.epoch, loss = record.l_total, "epoch done");
        report.epochs.push(record);
    }
    model.version += 1;
    Ok((model, report))
}
