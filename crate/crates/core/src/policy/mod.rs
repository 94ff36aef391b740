//! A small decoder-only transformer policy with exact gradients.

mod checkpoint;
mod model;
mod sample;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use model::KvCache;
pub use sample::{decode_greedy, sample_rollouts, Rollout, RolloutGroup, SamplingConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::{log_softmax_at, softmax_into, Scalar};
use crate::vocab::Token;

use model::Trace;

/// Architecture of the policy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_context: usize,
    pub d_ff: usize,
}

impl ModelConfig {
    /// Two layers, width 64, two heads, context 256.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_context: 256,
            d_ff: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(invalid("vocab_size must be at least 2"));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(invalid("d_model must be divisible by n_heads"));
        }
        if self.max_context == 0 {
            return Err(invalid("max_context must be positive"));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct LayerLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

/// Offsets of each tensor in the flat parameter vector. Every weight is
/// immediately followed by its bias or shift.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let tok_emb = take(v * d);
        let pos_emb = take(cfg.max_context * d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_fc: take(d * ff),
                b_fc: take(ff),
                w_proj: take(ff * d),
                b_proj: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let head_w = take(d * v);
        let head_b = take(v);
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            total: at,
        }
    }
}

/// Architecture plus flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy<S> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<S>,
}

impl<S: Scalar> Policy<S> {
    /// Gaussian init (std 0.02, residual projections scaled down by depth),
    /// unit layer-norm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let normal = Normal::new(0.0, std).expect("valid std");
        let resid = Normal::new(0.0, std / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        let mut params = vec![S::zero(); layout.total];
        let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut fill = |params: &mut [S], start: usize, len: usize, dist: &Normal<f64>| {
            for p in &mut params[start..start + len] {
                *p = S::lit(dist.sample(&mut rng));
            }
        };
        fill(&mut params, layout.tok_emb, v * d, &normal);
        fill(&mut params, layout.pos_emb, config.max_context * d, &normal);
        for ll in &layout.layers {
            fill(&mut params, ll.w_qkv, d * 3 * d, &normal);
            fill(&mut params, ll.w_o, d * d, &resid);
            fill(&mut params, ll.w_fc, d * ff, &normal);
            fill(&mut params, ll.w_proj, ff * d, &resid);
        }
        fill(&mut params, layout.head_w, d * v, &normal);
        let mut policy = Self {
            config,
            layout,
            params,
        };
        policy.reset_gains();
        Ok(policy)
    }

    fn reset_gains(&mut self) {
        let d = self.config.d_model;
        let gains: Vec<usize> = self
            .layout
            .layers
            .iter()
            .flat_map(|ll| [ll.ln1_g, ll.ln2_g])
            .chain([self.layout.lnf_g])
            .collect();
        for g in gains {
            self.params[g..g + d].iter_mut().for_each(|x| *x = S::one());
        }
    }

    pub fn from_params(config: ModelConfig, params: Vec<S>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(invalid(format!(
                "parameter vector has {} entries, architecture needs {}",
                params.len(),
                layout.total
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("policy parameters".into()));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Zeroes the output projection, making every next-token distribution uniform.
    pub fn zero_head(&mut self) {
        let v = self.config.vocab_size;
        let d = self.config.d_model;
        let (w, b) = (self.layout.head_w, self.layout.head_b);
        self.params[w..w + d * v].iter_mut().for_each(|x| *x = S::zero());
        self.params[b..b + v].iter_mut().for_each(|x| *x = S::zero());
    }

    /// Mutable view of the output bias, one entry per token.
    pub fn head_bias_mut(&mut self) -> &mut [S] {
        let b = self.layout.head_b;
        &mut self.params[b..b + self.config.vocab_size]
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn zeros_like(&self) -> Vec<S> {
        vec![S::zero(); self.params.len()]
    }

    fn check_fits(&self, needed: usize) -> Result<()> {
        if needed > self.config.max_context {
            return Err(Error::ContextOverflow {
                needed,
                max: self.config.max_context,
                step: None,
            });
        }
        Ok(())
    }

    /// Cache primed with `prefix`; returns the logits after its last token.
    pub fn prefill(&self, prefix: &[Token]) -> Result<(KvCache<S>, Vec<S>)> {
        if prefix.is_empty() {
            return Err(invalid("prefix must contain at least one token"));
        }
        self.check_fits(prefix.len())?;
        let mut cache = self.new_cache();
        let mut logits = Vec::new();
        let last = prefix.len() - 1;
        for (i, &tok) in prefix.iter().enumerate() {
            let out = (i == last).then_some(&mut logits);
            self.step(tok, &mut cache, None, out)?;
        }
        Ok((cache, logits))
    }

    /// Feeds one more token and returns the logits that follow it.
    pub fn advance(&self, cache: &mut KvCache<S>, token: Token) -> Result<Vec<S>> {
        let mut logits = Vec::new();
        self.step(token, cache, None, Some(&mut logits))?;
        Ok(logits)
    }

    /// Distribution over the next token given `prefix` (temperature 1).
    pub fn next_token_distribution(&self, prefix: &[Token]) -> Result<Vec<S>> {
        if prefix.len() >= self.config.max_context {
            return Err(Error::ContextOverflow {
                needed: prefix.len() + 1,
                max: self.config.max_context,
                step: None,
            });
        }
        let (_, logits) = self.prefill(prefix)?;
        let mut probs = Vec::new();
        softmax_into(&logits, S::one(), &mut probs);
        Ok(probs)
    }

    /// Teacher-forced log-probabilities of `target` after `prefix`.
    pub fn sequence_logprob(&self, prefix: &[Token], target: &[Token]) -> Result<SequenceLogprob<S>> {
        self.sequence_logprob_at(prefix, target, S::one())
    }

    pub fn sequence_logprob_at(
        &self,
        prefix: &[Token],
        target: &[Token],
        temperature: S,
    ) -> Result<SequenceLogprob<S>> {
        if target.is_empty() {
            return Err(invalid("target must be non-empty"));
        }
        self.check_fits(prefix.len() + target.len())?;
        let (mut cache, logits) = self.prefill(prefix)?;
        continue_logprob(self, &mut cache, logits, target, temperature)
    }

    /// Teacher-forced scoring that keeps activations for [`Policy::backprop`].
    pub fn score(&self, context: &[Token], target: &[Token], temperature: S) -> Result<Scored<S>> {
        if context.is_empty() {
            return Err(invalid("context must contain at least one token"));
        }
        if target.is_empty() {
            return Err(invalid("target must be non-empty"));
        }
        self.check_fits(context.len() + target.len())?;
        let mut cache = self.new_cache();
        let mut trace = self.new_trace();
        let mut logits = Vec::new();
        let mut probs = Vec::with_capacity(target.len());
        let mut logprobs = Vec::with_capacity(target.len());
        let fed = context.iter().chain(&target[..target.len() - 1]);
        let first_scored = context.len() - 1;
        for (pos, &tok) in fed.enumerate() {
            let want = pos >= first_scored;
            self.step(tok, &mut cache, Some(&mut trace), want.then_some(&mut logits))?;
            if want {
                let next = target[pos - first_scored];
                let mut p = Vec::new();
                softmax_into(&logits, temperature, &mut p);
                logprobs.push(log_softmax_at(&logits, temperature, next.idx()));
                probs.push(p);
            }
        }
        Ok(Scored {
            trace,
            first_scored,
            target: target.to_vec(),
            temperature,
            probs,
            logprobs,
        })
    }

    /// Accumulates `sum_t upstream[t] * d logprob_t / d params` into `grad`.
    pub fn backprop(&self, scored: &Scored<S>, upstream: &[S], grad: &mut [S]) {
        assert_eq!(upstream.len(), scored.logprobs.len());
        let v = self.config.vocab_size;
        let mut dlogits = vec![S::zero(); scored.trace.len() * v];
        for (i, (&up, probs)) in upstream.iter().zip(&scored.probs).enumerate() {
            if up == S::zero() {
                continue;
            }
            let row = &mut dlogits[(scored.first_scored + i) * v..][..v];
            let coef = up / scored.temperature;
            for (dl, &p) in row.iter_mut().zip(probs) {
                *dl = -coef * p;
            }
            row[scored.target[i].idx()] += coef;
        }
        self.backward(&scored.trace, &dlogits, grad);
    }
}

/// Per-token log-probabilities of a target and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLogprob<S> {
    pub per_token: Vec<S>,
    pub total: S,
}

/// Log-probabilities of `target` continuing from a primed cache whose last
/// logits are `logits`. The cache is advanced through `target[..n-1]`.
pub(crate) fn continue_logprob<S: Scalar>(
    policy: &Policy<S>,
    cache: &mut KvCache<S>,
    mut logits: Vec<S>,
    target: &[Token],
    temperature: S,
) -> Result<SequenceLogprob<S>> {
    let mut per_token = Vec::with_capacity(target.len());
    for (i, &tok) in target.iter().enumerate() {
        per_token.push(log_softmax_at(&logits, temperature, tok.idx()));
        if i + 1 < target.len() {
            logits = policy.advance(cache, tok)?;
        }
    }
    let total = per_token.iter().copied().sum();
    Ok(SequenceLogprob { per_token, total })
}

/// A teacher-forced evaluation with its activation trace.
pub struct Scored<S> {
    trace: Trace<S>,
    first_scored: usize,
    target: Vec<Token>,
    temperature: S,
    probs: Vec<Vec<S>>,
    logprobs: Vec<S>,
}

impl<S: Scalar> Scored<S> {
    pub fn logprobs(&self) -> &[S] {
        &self.logprobs
    }

    pub fn total(&self) -> S {
        self.logprobs.iter().copied().sum()
    }

    pub fn distributions(&self) -> &[Vec<S>] {
        &self.probs
    }
}

/// Identifier of a frozen parameter snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SnapshotId(pub u64);

/// A frozen copy of the policy (the sampling policy or the reference).
#[derive(Clone, Debug)]
pub struct Snapshot<S> {
    id: SnapshotId,
    policy: Policy<S>,
}

impl<S: Scalar> Snapshot<S> {
    pub fn of(policy: &Policy<S>, id: u64) -> Self {
        Self {
            id: SnapshotId(id),
            policy: policy.clone(),
        }
    }

    pub fn id(&self) -> SnapshotId {
        self.id
    }

    pub fn policy(&self) -> &Policy<S> {
        &self.policy
    }
}

impl<S> std::ops::Deref for Snapshot<S> {
    type Target = Policy<S>;
    fn deref(&self) -> &Policy<S> {
        &self.policy
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(seed: u64) -> Policy<f64> {
        let cfg = ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_context: 16,
            d_ff: 16,
        };
        Policy::init(cfg, seed).unwrap()
    }

    fn toks(ids: &[u32]) -> Vec<Token> {
        ids.iter().map(|&i| Token(i)).collect()
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut p = toy(1);
        p.zero_head();
        let dist = p.next_token_distribution(&toks(&[0, 3, 4])).unwrap();
        for x in dist {
            assert!((x - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn distribution_normalized_and_pure() {
        let p = toy(2);
        let prefix = toks(&[1, 2, 3, 9]);
        let a = p.next_token_distribution(&prefix).unwrap();
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(a.iter().all(|&x| x >= 0.0));
        assert_eq!(a, p.next_token_distribution(&prefix).unwrap());
    }

    #[test]
    fn prefix_too_long_is_rejected() {
        let p = toy(3);
        let prefix = vec![Token(1); 16];
        assert!(matches!(
            p.next_token_distribution(&prefix),
            Err(Error::ContextOverflow { .. })
        ));
        assert!(p.sequence_logprob(&toks(&[1; 10]), &toks(&[2; 7])).is_err());
    }

    #[test]
    fn uniform_sequence_logprob() {
        let mut p = toy(4);
        p.zero_head();
        let lp = p.sequence_logprob(&toks(&[0]), &toks(&[5, 6, 7])).unwrap();
        assert!((lp.total - 3.0 * (0.1_f64).ln()).abs() < 1e-12);
        assert!((lp.total + 6.907755).abs() < 1e-6);
    }

    #[test]
    fn context_free_policy_ignores_prefix() {
        // Head weights zero, bias alone decides: conditioning is irrelevant.
        let mut p = toy(5);
        p.zero_head();
        p.head_bias_mut()[3] = 1.5;
        let a = p.sequence_logprob(&toks(&[0]), &toks(&[3, 1])).unwrap();
        let b = p.sequence_logprob(&toks(&[0, 7, 7, 2]), &toks(&[3, 1])).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
        assert!(a.per_token.iter().all(|&l| l.exp() > 0.0 && l.exp() <= 1.0));
    }

    #[test]
    fn score_agrees_with_incremental_logprob() {
        let p = toy(6);
        let ctx = toks(&[0, 4, 2]);
        let tgt = toks(&[7, 1, 1, 9]);
        let s = p.score(&ctx, &tgt, 1.0).unwrap();
        let lp = p.sequence_logprob(&ctx, &tgt).unwrap();
        assert_eq!(s.logprobs(), lp.per_token.as_slice());
    }

    #[test]
    fn snapshot_is_immune_to_updates() {
        let mut p = toy(7);
        let snap = Snapshot::of(&p, 0);
        let before = snap.next_token_distribution(&toks(&[1, 2])).unwrap();
        p.params_mut().iter_mut().for_each(|x| *x += 0.5);
        assert_eq!(snap.next_token_distribution(&toks(&[1, 2])).unwrap(), before);
        assert_ne!(p.next_token_distribution(&toks(&[1, 2])).unwrap(), before);
    }

    #[test]
    fn from_params_checks_length_and_finiteness() {
        let p = toy(8);
        let cfg = p.config().clone();
        assert!(Policy::from_params(cfg.clone(), vec![0.0; 3]).is_err());
        let mut bad = p.params().to_vec();
        bad[0] = f64::NAN;
        assert!(Policy::from_params(cfg, bad).is_err());
    }
}
