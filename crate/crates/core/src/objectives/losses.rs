use crate::certainty::{certainty_report, self_certainty, PrgConfig, WeightConfig};
use crate::error::{invalid, Error, Result};
use crate::policy::{Policy, RolloutGroup, Snapshot};
use crate::scalar::Scalar;
use crate::vocab::{canonical_answer, AnswerGrammar, Token};

use super::{KlReference, LossBreakdown, RlConfig, WeightMode};

/// Below this population standard deviation a group's advantages are all zero.
pub const ADVANTAGE_STD_FLOOR: f64 = 1e-8;

/// One teacher-forced target with the prompt it continues.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RdItem {
    pub id: String,
    pub context: Vec<Token>,
    pub target: Vec<Token>,
}

fn overflow_named(id: &str, err: Error) -> Error {
    match err {
        Error::ContextOverflow { needed, max, .. } => Error::ExampleOverflow {
            id: id.to_string(),
            needed,
            max,
        },
        other => other,
    }
}

/// Mean over items of the negative mean per-token log-likelihood.
///
/// Consecutive identical items (as produced by repeating a batch across a
/// rollout group) are scored once and weighted by their multiplicity.
/// The gradient, scaled by `scale`, is added into `grad`.
pub fn rd_loss<S: Scalar>(
    policy: &Policy<S>,
    batch: &[RdItem],
    scale: S,
    mut grad: Option<&mut [S]>,
) -> Result<S> {
    if batch.is_empty() {
        return Err(invalid("RD batch is empty"));
    }
    let n = S::lit(batch.len() as f64);
    let mut loss = S::zero();
    let mut i = 0;
    while i < batch.len() {
        let item = &batch[i];
        let mut count = 1;
        while i + count < batch.len() && batch[i + count] == *item {
            count += 1;
        }
        i += count;
        if item.target.is_empty() {
            return Err(invalid(format!("example {} has an empty target", item.id)));
        }
        let scored = policy
            .score(&item.context, &item.target, S::one())
            .map_err(|e| overflow_named(&item.id, e))?;
        let len = S::lit(item.target.len() as f64);
        let weight = S::lit(count as f64) / n;
        loss -= weight * scored.total() / len;
        if let Some(g) = grad.as_deref_mut() {
            if scale != S::zero() {
                let up = vec![-scale * weight / len; item.target.len()];
                policy.backprop(&scored, &up, g);
            }
        }
    }
    Ok(loss)
}

/// Group-normalized advantages `(r - mean) / std` with the population std.
pub fn group_advantages<S: Scalar>(rewards: &[S]) -> Result<Vec<S>> {
    if rewards.len() < 2 {
        return Err(invalid("a rollout group needs at least two rewards"));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("reward {r}")));
    }
    let n = S::lit(rewards.len() as f64);
    let mean = rewards.iter().copied().sum::<S>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<S>() / n;
    let std = var.sqrt();
    if std < S::lit(ADVANTAGE_STD_FLOOR) {
        return Ok(vec![S::zero(); rewards.len()]);
    }
    Ok(rewards.iter().map(|&r| (r - mean) / std).collect())
}

/// `r - ln r - 1` with `r = exp(ref - cur)`, for sequence log-probabilities.
pub fn kl_penalty<S: Scalar>(cur: S, reference: S) -> Result<S> {
    let d = reference - cur;
    if !d.is_finite() || !d.exp().is_finite() {
        return Err(Error::NonFinite(format!(
            "KL ratio exp({d}) for log-probabilities {reference} and {cur}"
        )));
    }
    Ok((d.exp_m1() - d).max(S::zero()))
}

fn check_advantages<S: Scalar>(adv: &[S]) -> Result<()> {
    if adv.iter().all(|a| *a == S::zero()) {
        return Ok(());
    }
    let n = S::lit(adv.len() as f64);
    let mean = adv.iter().copied().sum::<S>() / n;
    let std = (adv.iter().map(|&a| (a - mean) * (a - mean)).sum::<S>() / n).sqrt();
    let tol = S::epsilon().sqrt() * S::lit(10.0);
    if mean.abs() > tol || (std - S::one()).abs() > tol {
        return Err(Error::Invariant(format!(
            "advantages have mean {mean} and std {std}"
        )));
    }
    Ok(())
}

/// Summary of the clipped group-policy term over one or more groups.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupTerms<S> {
    /// `-surrogate + beta * kl`, averaged over rollouts and then groups.
    pub loss: S,
    /// The same with each rollout scaled by its coefficient.
    pub weighted_loss: S,
    pub surrogate: S,
    /// Unscaled mean KL estimate.
    pub kl: S,
    pub rewards: Vec<S>,
    pub advantages: Vec<S>,
}

#[allow(clippy::too_many_arguments)]
fn policy_gradient_terms<S: Scalar>(
    policy: &Policy<S>,
    old: &Snapshot<S>,
    reference: &Policy<S>,
    groups: &[RolloutGroup<S>],
    rewards: Vec<Vec<S>>,
    coefs: Option<&[Vec<S>]>,
    cfg: &RlConfig,
    scale: S,
    mut grad: Option<&mut [S]>,
) -> Result<GroupTerms<S>> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(invalid("no rollout groups"));
    }
    let eps = S::lit(cfg.clip_eps);
    let beta = S::lit(cfg.kl_beta);
    let n_groups = S::lit(groups.len() as f64);
    let mut out = GroupTerms {
        loss: S::zero(),
        weighted_loss: S::zero(),
        surrogate: S::zero(),
        kl: S::zero(),
        rewards: Vec::new(),
        advantages: Vec::new(),
    };
    for (gi, (group, rewards)) in groups.iter().zip(rewards).enumerate() {
        if group.snapshot != old.id() {
            return Err(Error::SnapshotMismatch {
                group: group.snapshot.0,
                old: old.id().0,
            });
        }
        if group.len() != cfg.group_size {
            return Err(invalid(format!(
                "group has {} rollouts, expected {}",
                group.len(),
                cfg.group_size
            )));
        }
        let adv = group_advantages(&rewards)?;
        check_advantages(&adv)?;
        let g = S::lit(group.len() as f64);
        for (ri, (rollout, &a)) in group.rollouts.iter().zip(&adv).enumerate() {
            if rollout.is_empty() {
                return Err(invalid("empty rollout"));
            }
            let coef = coefs.map_or(S::one(), |c| c[gi][ri]);
            let scored = policy.score(&rollout.query, &rollout.tokens, group.temperature)?;
            let len = S::lit(rollout.len() as f64);
            let mut surrogate = S::zero();
            let mut dsur = Vec::with_capacity(rollout.len());
            for (&lp, &lp_old) in scored.logprobs().iter().zip(&rollout.logprobs) {
                let w = (lp - lp_old).exp();
                let unclipped = w * a;
                let clipped = w.max(S::one() - eps).min(S::one() + eps) * a;
                if unclipped <= clipped {
                    surrogate += unclipped;
                    dsur.push(unclipped);
                } else {
                    surrogate += clipped;
                    dsur.push(S::zero());
                }
            }
            surrogate /= len;
            let cur = scored.total();
            let ref_total = match cfg.kl_reference {
                KlReference::Reference => {
                    reference
                        .sequence_logprob_at(&rollout.query, &rollout.tokens, group.temperature)?
                        .total
                }
                KlReference::Old => rollout.total_logprob(),
            };
            let kl = kl_penalty(cur, ref_total)?;
            let term = -surrogate + beta * kl;
            out.surrogate += surrogate / (g * n_groups);
            out.kl += kl / (g * n_groups);
            out.loss += term / (g * n_groups);
            out.weighted_loss += coef * term / (g * n_groups);
            if let Some(gr) = grad.as_deref_mut() {
                let c = scale * coef / (g * n_groups);
                if c != S::zero() {
                    let dkl = S::one() - (ref_total - cur).exp();
                    let up: Vec<S> = dsur.iter().map(|&d| c * (-d / len + beta * dkl)).collect();
                    policy.backprop(&scored, &up, gr);
                }
            }
        }
        out.rewards.extend_from_slice(&rewards);
        out.advantages.extend(adv);
    }
    Ok(out)
}

/// Self-certainty rewards of each group, read from the stored distributions.
fn certainty_rewards<S: Scalar>(groups: &[RolloutGroup<S>]) -> Result<Vec<Vec<S>>> {
    groups
        .iter()
        .map(|g| g.rollouts.iter().map(self_certainty).collect())
        .collect()
}

/// Clipped group-policy loss with self-certainty rewards.
pub fn rlif_loss<S: Scalar>(
    policy: &Policy<S>,
    old: &Snapshot<S>,
    reference: &Policy<S>,
    groups: &[RolloutGroup<S>],
    cfg: &RlConfig,
    grad: Option<&mut [S]>,
) -> Result<GroupTerms<S>> {
    let rewards = certainty_rewards(groups)?;
    policy_gradient_terms(policy, old, reference, groups, rewards, None, cfg, S::one(), grad)
}

/// The same loss with a 0/1 reward for matching the gold answer.
#[allow(clippy::too_many_arguments)]
pub fn rlvr_loss<S: Scalar>(
    policy: &Policy<S>,
    old: &Snapshot<S>,
    reference: &Policy<S>,
    groups: &[RolloutGroup<S>],
    gold: &[String],
    grammar: &AnswerGrammar,
    cfg: &RlConfig,
    grad: Option<&mut [S]>,
) -> Result<GroupTerms<S>> {
    if gold.len() != groups.len() {
        return Err(invalid(format!(
            "{} gold answers for {} groups",
            gold.len(),
            groups.len()
        )));
    }
    let rewards = groups
        .iter()
        .zip(gold)
        .map(|(g, gold)| {
            g.rollouts
                .iter()
                .map(|r| match grammar.extract(&r.tokens) {
                    Some(v) if canonical_answer(&v) == *gold => S::one(),
                    _ => S::zero(),
                })
                .collect()
        })
        .collect();
    policy_gradient_terms(policy, old, reference, groups, rewards, None, cfg, S::one(), grad)
}

/// How the RLIF and RD terms are combined.
#[derive(Clone, Copy, Debug)]
pub enum Mixing<'a, S> {
    /// `w * rlif + (1 - w) * rd`.
    Fixed(S),
    /// PRG-derived weights, one per rollout, in group order.
    Adaptive { weights: &'a [Vec<S>], mode: WeightMode },
}

/// Mixture of the self-certainty RLIF term and the RD term.
///
/// With `Fixed(0)` the groups may be empty and the RLIF term is skipped;
/// with `Fixed(1)` the RD batch may be empty.
#[allow(clippy::too_many_arguments)]
pub fn mixed_loss<S: Scalar>(
    policy: &Policy<S>,
    old: &Snapshot<S>,
    reference: &Policy<S>,
    groups: &[RolloutGroup<S>],
    rd_batch: &[RdItem],
    cfg: &RlConfig,
    mixing: Mixing<'_, S>,
    mut grad: Option<&mut [S]>,
) -> Result<LossBreakdown<S>> {
    let (w, coefs, per_trajectory) = match mixing {
        Mixing::Fixed(w) => {
            if !(w >= S::zero() && w <= S::one()) {
                return Err(invalid(format!("mixing weight {w} outside [0, 1]")));
            }
            (w, None, false)
        }
        Mixing::Adaptive { weights, mode } => {
            if weights.len() != groups.len()
                || weights.iter().zip(groups).any(|(w, g)| w.len() != g.len())
            {
                return Err(invalid("one PRG weight per rollout is required"));
            }
            let all: Vec<S> = weights.iter().flatten().copied().collect();
            if all.is_empty() {
                return Err(invalid("no PRG weights"));
            }
            if let Some(w) = all.iter().find(|w| !(**w >= S::zero() && **w <= S::one())) {
                return Err(invalid(format!("PRG weight {w} outside [0, 1]")));
            }
            let mean = all.iter().copied().sum::<S>() / S::lit(all.len() as f64);
            let per = mode == WeightMode::PerTrajectory;
            (mean, per.then_some(weights), per)
        }
    };
    let skip_rlif = matches!(mixing, Mixing::Fixed(_)) && w == S::zero() && groups.is_empty();
    let skip_rd = matches!(mixing, Mixing::Fixed(_)) && w == S::one() && rd_batch.is_empty();

    let mut out = LossBreakdown {
        prg_weight_used: w,
        ..LossBreakdown::default()
    };
    let mut weighted_rlif = S::zero();
    if !skip_rlif {
        let rewards = certainty_rewards(groups)?;
        // Per-trajectory weights already sit inside the coefficients.
        let scale = if per_trajectory { S::one() } else { w };
        let terms = policy_gradient_terms(
            policy,
            old,
            reference,
            groups,
            rewards,
            coefs,
            cfg,
            scale,
            grad.as_deref_mut(),
        )?;
        out.rlif_term = terms.loss;
        out.kl_term = S::lit(cfg.kl_beta) * terms.kl;
        out.advantages = terms.advantages;
        weighted_rlif = if per_trajectory {
            terms.weighted_loss
        } else {
            w * terms.loss
        };
    }
    if !skip_rd {
        out.rd_term = rd_loss(policy, rd_batch, S::one() - w, grad)?;
    }
    out.total = weighted_rlif + (S::one() - w) * out.rd_term;
    Ok(out)
}

/// PRG-weighted hybrid loss. Weights are computed under the old snapshot
/// and treated as constants.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_loss<S: Scalar>(
    policy: &Policy<S>,
    old: &Snapshot<S>,
    reference: &Policy<S>,
    groups: &[RolloutGroup<S>],
    rd_batch: &[RdItem],
    cfg: &RlConfig,
    weight: &WeightConfig,
    prg_cfg: &PrgConfig,
    grammar: &AnswerGrammar,
    mode: WeightMode,
    grad: Option<&mut [S]>,
) -> Result<LossBreakdown<S>> {
    let weights = groups
        .iter()
        .map(|g| {
            g.rollouts
                .iter()
                .map(|r| Ok(certainty_report(old.policy(), r, grammar, weight, prg_cfg)?.prg_weight))
                .collect::<Result<Vec<S>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    mixed_loss(
        policy,
        old,
        reference,
        groups,
        rd_batch,
        cfg,
        Mixing::Adaptive {
            weights: &weights,
            mode,
        },
        grad,
    )
}
