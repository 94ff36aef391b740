//! Training losses, their mixing schedules, and the training loop.

mod config;
mod losses;
mod optim;
mod train;

pub use config::{KlReference, Mode, OptimizerKind, RlConfig, TrainConfig, WeightMode};
pub use losses::{
    group_advantages, hybrid_loss, kl_penalty, mixed_loss, rd_loss, rlif_loss, rlvr_loss,
    GroupTerms, Mixing, RdItem, ADVANTAGE_STD_FLOOR,
};
pub use optim::Optimizer;
pub use train::{probe_stats, run_training, MetricsRecord, ProbeStats, TrainingOutcome};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::scalar::Scalar;

/// Parts of one assembled loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown<S> {
    pub total: S,
    pub rlif_term: S,
    pub rd_term: S,
    /// `beta * mean KL`, already included in `rlif_term`.
    pub kl_term: S,
    pub prg_weight_used: S,
    pub advantages: Vec<S>,
}

/// A scalar function of the policy parameters.
pub trait Objective<S: Scalar> {
    /// Returns the loss; when `grad` is given, adds its gradient into it.
    fn evaluate(&self, policy: &Policy<S>, grad: Option<&mut [S]>) -> Result<S>;
}

/// Gradient of `objective` at the policy's current parameters.
pub fn loss_gradient<S: Scalar>(policy: &Policy<S>, objective: &dyn Objective<S>) -> Result<Vec<S>> {
    let mut grad = policy.zeros_like();
    let value = objective.evaluate(policy, Some(&mut grad))?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {value}")));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(grad)
}

/// A loss that ignores the parameters.
pub struct ConstantLoss<S>(pub S);

impl<S: Scalar> Objective<S> for ConstantLoss<S> {
    fn evaluate(&self, _: &Policy<S>, _: Option<&mut [S]>) -> Result<S> {
        Ok(self.0)
    }
}

/// `||params||^2`.
pub struct SquaredNorm;

impl<S: Scalar> Objective<S> for SquaredNorm {
    fn evaluate(&self, policy: &Policy<S>, grad: Option<&mut [S]>) -> Result<S> {
        if let Some(g) = grad {
            for (gi, &p) in g.iter_mut().zip(policy.params()) {
                *gi += S::lit(2.0) * p;
            }
        }
        Ok(policy.params().iter().map(|&p| p * p).sum())
    }
}
