use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::scalar::{softmax_into, Scalar};
use crate::vocab::Token;

use super::{Policy, Snapshot, SnapshotId};

/// One sampled completion with the distributions it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout<S> {
    /// Prompt the completion continues.
    pub query: Vec<Token>,
    pub tokens: Vec<Token>,
    /// Next-token distribution at each generated position.
    pub distributions: Vec<Vec<S>>,
    /// Log-probability of each generated token under its distribution.
    pub logprobs: Vec<S>,
    /// True when generation stopped at the end token.
    pub terminated: bool,
}

impl<S: Scalar> Rollout<S> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn total_logprob(&self) -> S {
        self.logprobs.iter().copied().sum()
    }

    fn push(&mut self, token: Token, dist: Vec<S>) {
        self.logprobs.push(dist[token.idx()].ln());
        self.distributions.push(dist);
        self.tokens.push(token);
    }
}

/// `G` rollouts of one prompt drawn from the same snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup<S> {
    pub query: Vec<Token>,
    pub rollouts: Vec<Rollout<S>>,
    pub snapshot: SnapshotId,
    pub temperature: S,
}

impl<S> RolloutGroup<S> {
    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig<S> {
    pub group_size: usize,
    pub temperature: S,
    pub max_len: usize,
    pub eos: Token,
}

fn draw<S: Scalar>(probs: &[S], rng: &mut impl Rng) -> Token {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return Token(i as u32);
        }
    }
    // Rounding left u above the cumulative total; take the last supported token.
    let last = probs.iter().rposition(|p| *p > S::zero()).unwrap_or(probs.len() - 1);
    Token(last as u32)
}

fn generation_budget<S: Scalar>(policy: &Policy<S>, prompt: &[Token], max_len: usize) -> usize {
    max_len.min(policy.config().max_context.saturating_sub(prompt.len()))
}

/// Ancestral sampling of `group_size` completions, deterministic in `seed`.
pub fn sample_rollouts<S: Scalar>(
    old: &Snapshot<S>,
    prompt: &[Token],
    cfg: &SamplingConfig<S>,
    seed: u64,
) -> Result<RolloutGroup<S>> {
    if cfg.group_size == 0 {
        return Err(invalid("group size must be at least 1"));
    }
    if !(cfg.temperature > S::zero()) {
        return Err(invalid("temperature must be positive"));
    }
    if cfg.max_len == 0 {
        return Err(invalid("max_len must be at least 1"));
    }
    let policy = old.policy();
    let (cache, logits) = policy.prefill(prompt)?;
    let budget = generation_budget(policy, prompt, cfg.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rollouts = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let mut cache = cache.clone();
        let mut logits = logits.clone();
        let mut rollout = Rollout {
            query: prompt.to_vec(),
            tokens: Vec::new(),
            distributions: Vec::new(),
            logprobs: Vec::new(),
            terminated: false,
        };
        while rollout.len() < budget {
            let mut probs = Vec::new();
            softmax_into(&logits, cfg.temperature, &mut probs);
            let tok = draw(&probs, &mut rng);
            rollout.push(tok, probs);
            if tok == cfg.eos {
                rollout.terminated = true;
                break;
            }
            if rollout.len() < budget {
                logits = policy.advance(&mut cache, tok)?;
            }
        }
        rollouts.push(rollout);
    }
    Ok(RolloutGroup {
        query: prompt.to_vec(),
        rollouts,
        snapshot: old.id(),
        temperature: cfg.temperature,
    })
}

/// Argmax decoding (ties to the lowest index); distributions at temperature 1.
pub fn decode_greedy<S: Scalar>(
    policy: &Policy<S>,
    prompt: &[Token],
    max_len: usize,
    eos: Token,
) -> Result<Rollout<S>> {
    let (mut cache, mut logits) = policy.prefill(prompt)?;
    let budget = generation_budget(policy, prompt, max_len);
    let mut rollout = Rollout {
        query: prompt.to_vec(),
        tokens: Vec::new(),
        distributions: Vec::new(),
        logprobs: Vec::new(),
        terminated: false,
    };
    while rollout.len() < budget {
        let mut probs = Vec::new();
        softmax_into(&logits, S::one(), &mut probs);
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        let tok = Token(best as u32);
        rollout.push(tok, probs);
        if tok == eos {
            rollout.terminated = true;
            break;
        }
        if rollout.len() < budget {
            logits = policy.advance(&mut cache, tok)?;
        }
    }
    Ok(rollout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ModelConfig;

    fn toy() -> Policy<f64> {
        let cfg = ModelConfig {
            vocab_size: 6,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_context: 32,
            d_ff: 8,
        };
        Policy::init(cfg, 11).unwrap()
    }

    fn sampling(g: usize) -> SamplingConfig<f64> {
        SamplingConfig {
            group_size: g,
            temperature: 1.0,
            max_len: 12,
            eos: Token(2),
        }
    }

    #[test]
    fn group_has_requested_size_and_valid_rows() {
        let snap = Snapshot::of(&toy(), 3);
        let g = sample_rollouts(&snap, &[Token(0), Token(4)], &sampling(8), 5).unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g.snapshot, SnapshotId(3));
        for r in &g.rollouts {
            assert_eq!(r.tokens.len(), r.logprobs.len());
            assert_eq!(r.tokens.len(), r.distributions.len());
            for (i, d) in r.distributions.iter().enumerate() {
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!((d[r.tokens[i].idx()].ln() - r.logprobs[i]).abs() < 1e-15);
            }
            assert!(r.len() <= 12);
        }
    }

    #[test]
    fn same_seed_same_group() {
        let snap = Snapshot::of(&toy(), 0);
        let a = sample_rollouts(&snap, &[Token(0)], &sampling(4), 9).unwrap();
        let b = sample_rollouts(&snap, &[Token(0)], &sampling(4), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn end_token_certain_gives_unit_rollouts() {
        let mut p = toy();
        p.zero_head();
        p.head_bias_mut()[2] = 1e4;
        let g = sample_rollouts(&Snapshot::of(&p, 0), &[Token(0)], &sampling(8), 1).unwrap();
        for r in &g.rollouts {
            assert_eq!(r.tokens, vec![Token(2)]);
            assert!(r.terminated);
        }
    }

    #[test]
    fn rollouts_stop_at_context_limit() {
        let p = toy();
        let mut cfg = sampling(1);
        cfg.max_len = 100;
        cfg.eos = Token(99); // never sampled
        let prompt = vec![Token(1); 30];
        let g = sample_rollouts(&Snapshot::of(&p, 0), &prompt, &cfg, 1).unwrap();
        assert_eq!(g.rollouts[0].len(), 2);
        assert!(!g.rollouts[0].terminated);
    }

    #[test]
    fn rejects_bad_sampling_config() {
        let snap = Snapshot::of(&toy(), 0);
        let mut cfg = sampling(0);
        assert!(sample_rollouts(&snap, &[Token(0)], &cfg, 1).is_err());
        cfg.group_size = 2;
        cfg.temperature = 0.0;
        assert!(sample_rollouts(&snap, &[Token(0)], &cfg, 1).is_err());
    }

    #[test]
    fn greedy_is_deterministic() {
        let p = toy();
        let a = decode_greedy(&p, &[Token(0), Token(3)], 10, Token(2)).unwrap();
        assert_eq!(a, decode_greedy(&p, &[Token(0), Token(3)], 10, Token(2)).unwrap());
    }
}
