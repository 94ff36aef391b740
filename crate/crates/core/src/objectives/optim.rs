use crate::error::{invalid, Result};
use crate::scalar::Scalar;

use super::{OptimizerKind, TrainConfig};

/// First-order update rule with its state.
#[derive(Clone, Debug)]
pub enum Optimizer<S> {
    Sgd {
        lr: S,
        weight_decay: S,
    },
    /// Adam with decoupled weight decay.
    Adam {
        lr: S,
        beta1: S,
        beta2: S,
        eps: S,
        weight_decay: S,
        m: Vec<S>,
        v: Vec<S>,
        t: i32,
    },
}

impl<S: Scalar> Optimizer<S> {
    pub fn from_config(cfg: &TrainConfig, n_params: usize) -> Result<Self> {
        let lr = S::lit(cfg.lr);
        let weight_decay = S::lit(cfg.weight_decay);
        Ok(match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd { lr, weight_decay },
            OptimizerKind::Adam => {
                if !(0.0..1.0).contains(&cfg.adam_beta1) || !(0.0..1.0).contains(&cfg.adam_beta2) {
                    return Err(invalid("Adam betas must lie in [0, 1)"));
                }
                Optimizer::Adam {
                    lr,
                    beta1: S::lit(cfg.adam_beta1),
                    beta2: S::lit(cfg.adam_beta2),
                    eps: S::lit(cfg.adam_eps),
                    weight_decay,
                    m: vec![S::zero(); n_params],
                    v: vec![S::zero(); n_params],
                    t: 0,
                }
            }
        })
    }

    pub fn step(&mut self, params: &mut [S], grad: &[S]) {
        assert_eq!(params.len(), grad.len());
        match self {
            Optimizer::Sgd { lr, weight_decay } => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p -= *lr * (g + *weight_decay * *p);
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
                m,
                v,
                t,
            } => {
                *t += 1;
                let c1 = S::one() - beta1.powi(*t);
                let c2 = S::one() - beta2.powi(*t);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = *beta1 * m[i] + (S::one() - *beta1) * g;
                    v[i] = *beta2 * v[i] + (S::one() - *beta2) * g * g;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    params[i] -= *lr * (mhat / (vhat.sqrt() + *eps) + *weight_decay * params[i]);
                }
            }
        }
    }
}

/// Rescales `grad` so its L2 norm is at most `max_norm`; returns the prior norm.
pub(crate) fn clip_global_norm<S: Scalar>(grad: &mut [S], max_norm: S) -> S {
    let norm = grad.iter().map(|&g| g * g).sum::<S>().sqrt();
    if max_norm > S::zero() && norm > max_norm {
        let f = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= f);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_moves_against_the_gradient() {
        let cfg = TrainConfig {
            lr: 0.5,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::<f64>::from_config(&cfg, 2).unwrap();
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[2.0, -4.0]);
        assert_eq!(p, vec![0.0, 1.0]);
    }

    #[test]
    fn adam_first_step_has_unit_magnitude() {
        let cfg = TrainConfig {
            lr: 0.1,
            optimizer: OptimizerKind::Adam,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::<f64>::from_config(&cfg, 2).unwrap();
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.01]);
        assert!((p[0] + 0.1).abs() < 1e-6 && (p[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![3.0_f64, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
