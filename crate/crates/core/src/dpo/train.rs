//! Desk-scale adapter training: full-batch gradient descent on the masked
//! preference loss, with the base table frozen as both the trainable
//! policy's backbone and the reference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{dpo_loss, dpo_loss_grad, AdapterDelta, LossError, TokenizedPair, ToyPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u32,
    pub lr: f64,
    pub beta: f64,
    pub rank: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 400, lr: 0.5, beta: 0.1, rank: 4, seed: 0 }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged (non-finite) at step {step}")]
    Divergence { step: u32 },
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapter: AdapterDelta,
    /// Loss before each step, then the final post-training loss.
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
}

/// Train a per-domain adapter against a frozen base. The base serves as both
/// the composed policy's backbone and the reference; only the adapter factors
/// move. With zero steps the returned adapter is exactly neutral.
pub fn train_adapter(
    dataset: &[TokenizedPair],
    base: &ToyPolicy,
    domain_id: &str,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let adapter = AdapterDelta::init(domain_id, base.vocab_size(), config.rank, config.seed);
    let mut policy = base.with_adapter(adapter);
    let reference = base.clone();

    let mut loss_curve = Vec::with_capacity(config.steps as usize + 1);
    for step in 0..config.steps {
        let (report, grads) = dpo_loss_grad(dataset, &policy, &reference, config.beta)?;
        if !report.loss.is_finite() {
            return Err(TrainError::Divergence { step });
        }
        loss_curve.push(report.loss);
        let (da, db) = grads.adapter.expect("training policy carries an adapter");
        let delta = policy.adapter.as_mut().expect("adapter attached");
        delta.a.scaled_add(-config.lr, &da);
        delta.b.scaled_add(-config.lr, &db);
    }
    let final_loss = dpo_loss(dataset, &policy, &reference, config.beta)?.loss;
    if !final_loss.is_finite() {
        return Err(TrainError::Divergence { step: config.steps });
    }
    loss_curve.push(final_loss);
    Ok(TrainOutcome {
        adapter: policy.adapter.expect("adapter attached"),
        loss_curve,
        final_loss,
    })
}
