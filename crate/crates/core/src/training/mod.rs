//! Reasoning-scoped contrastive training.
//!
//! Positives come from question variation: traces answering variants of the
//! same base question should embed close together, both per agent
//! (intra-scope, on segment embeddings) and as whole traces (inter-scope, on
//! trace embeddings). A prefix-to-full ranking term keeps partial traces
//! consistent with their completion. The encoders are trained jointly with
//! hand-derived gradients.

mod batch;
mod loss;
mod optim;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{build_batches, BatchGroup, BatchPlan, BatchTrace, TrainingBatch};
pub use loss::{
    info_nce_value, loss_inter, loss_intra, loss_rank, loss_total, BatchForward, LossBreakdown,
    LossComponent, LossValue,
};
pub use optim::{Optimizer, OptimizerKind};
pub use train::{train, EpochRecord, TrainingReport};

use crate::representation::RepresentationError;
use crate::trace::TraceError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid loss config: {0}")]
    InvalidLossConfig(String),
    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),
    #[error("trace {0:?} has no base_question_id")]
    MissingBaseQuestion(String),
    #[error("need at least 2 base-question groups with >= 2 variants, found {usable}")]
    InsufficientGroups { usable: usize },
    #[error("no anchor has both positives and negatives")]
    NoContrastivePairs,
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {component} in batch {batch} of epoch {epoch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        component: String,
    },
    #[error(transparent)]
    Representation(#[from] RepresentationError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Weights and knobs of `λ1·L_intra + λ2·L_inter + λ3·L_rank`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_intra: f64,
    pub lambda_inter: f64,
    pub lambda_rank: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Hinge margin of the prefix monotonicity term.
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_intra: 1.0,
            lambda_inter: 1.0,
            lambda_rank: 0.5,
            tau: 0.1,
            margin: 0.05,
        }
    }
}

impl LossConfig {
    pub fn new(
        lambda_intra: f64,
        lambda_inter: f64,
        lambda_rank: f64,
        tau: f64,
        margin: f64,
    ) -> Result<Self, TrainError> {
        let cfg = Self {
            lambda_intra,
            lambda_inter,
            lambda_rank,
            tau,
            margin,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let lambdas = [self.lambda_intra, self.lambda_inter, self.lambda_rank];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(TrainError::InvalidLossConfig(
                "lambdas must be finite and non-negative".into(),
            ));
        }
        if lambdas.iter().all(|&l| l == 0.0) {
            return Err(TrainError::InvalidLossConfig(
                "at least one lambda must be positive".into(),
            ));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(TrainError::InvalidLossConfig(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.margin >= 0.0) {
            return Err(TrainError::InvalidLossConfig(format!(
                "margin must be non-negative, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Base-question groups per batch.
    pub batch_groups: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_groups: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_groups < 2 {
            return Err(TrainError::InvalidTrainConfig(format!(
                "batch_groups must be >= 2, got {}",
                self.batch_groups
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidTrainConfig(
                "learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_lambdas_rejected() {
        assert!(matches!(
            LossConfig::new(0.0, 0.0, 0.0, 0.1, 0.05),
            Err(TrainError::InvalidLossConfig(_))
        ));
        assert!(LossConfig::new(1.0, 0.0, 0.0, 0.1, 0.05).is_ok());
        assert!(LossConfig::new(1.0, 0.0, 0.0, 0.0, 0.05).is_err());
        assert!(LossConfig::new(-1.0, 1.0, 0.0, 0.1, 0.05).is_err());
        assert!(LossConfig::new(1.0, 1.0, 0.0, 0.1, -0.1).is_err());
    }

    #[test]
    fn single_group_batches_rejected() {
        let cfg = TrainConfig {
            batch_groups: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
