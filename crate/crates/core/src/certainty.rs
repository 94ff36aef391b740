//! Intrinsic signals of a rollout: self-certainty, progressive reasoning
//! gain (PRG) and the bounded weight derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::policy::{continue_logprob, Policy, Rollout};
use crate::scalar::Scalar;
use crate::vocab::{canonical_answer, AnswerGrammar, Token, STEP};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Maps PRG into `[0, alpha)` via `alpha * (1 - exp(-tau * P))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    pub alpha: f64,
    pub tau: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self { alpha: 0.5, tau: 0.8 }
    }
}

impl WeightConfig {
    pub fn new(alpha: f64, tau: f64) -> Result<Self> {
        let cfg = Self { alpha, tau };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(invalid(format!("tau {} must be positive", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelfCertainty<S> {
    pub value: S,
    /// Probabilities that had to be raised to [`PROB_FLOOR`].
    pub floored: usize,
}

/// Mean over positions of `KL(U || p)`:
/// `-(1 / (n |V|)) * sum_i sum_j ln(|V| p_ij)`.
pub fn self_certainty_of<S: Scalar>(distributions: &[Vec<S>]) -> Result<SelfCertainty<S>> {
    if distributions.is_empty() {
        return Err(invalid("self-certainty needs at least one position"));
    }
    let floor = S::lit(PROB_FLOOR);
    let mut floored = 0;
    let mut total = S::zero();
    let mut cells = 0usize;
    for dist in distributions {
        let v = S::lit(dist.len() as f64);
        for &p in dist {
            let p = if p < floor {
                floored += 1;
                floor
            } else {
                p
            };
            total += (v * p).ln();
        }
        cells += dist.len();
    }
    let value = -total / S::lit(cells as f64);
    // Floored mass can push the estimate a hair below zero.
    Ok(SelfCertainty {
        value: value.max(S::zero()),
        floored,
    })
}

pub fn self_certainty<S: Scalar>(rollout: &Rollout<S>) -> Result<S> {
    Ok(self_certainty_of(&rollout.distributions)?.value)
}

/// How reasoning is cut into the steps PRG averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepGranularity {
    /// Each segment ends at a `<step>` delimiter.
    #[default]
    Segment,
    Token,
}

/// How `log p(y | ...)` aggregates the answer tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerScoring {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrgConfig {
    pub granularity: StepGranularity,
    pub scoring: AnswerScoring,
}

/// `(1/T) sum_t ReLU(L_t - L_{t-1})` for `L_0..=L_T`.
pub fn prg_from_logprobs<S: Scalar>(levels: &[S]) -> Result<S> {
    if levels.len() < 2 {
        return Err(invalid("PRG needs L_0 and at least one step"));
    }
    let steps = levels.len() - 1;
    let gain: S = levels
        .windows(2)
        .map(|w| (w[1] - w[0]).max(S::zero()))
        .sum();
    Ok(gain / S::lit(steps as f64))
}

/// `L_t = log p(answer | prompt, steps[..t])` for `t = 0..=T`.
pub fn answer_logprob_levels<S: Scalar>(
    policy: &Policy<S>,
    prompt: &[Token],
    steps: &[Vec<Token>],
    answer: &[Token],
    scoring: AnswerScoring,
) -> Result<Vec<S>> {
    if answer.is_empty() {
        return Err(invalid("answer must be non-empty"));
    }
    let max = policy.config().max_context;
    let d = policy.config().d_model;
    let mut needed = prompt.len() + answer.len();
    if needed > max {
        return Err(Error::ContextOverflow {
            needed,
            max,
            step: Some(0),
        });
    }
    let (mut cache, mut logits) = policy.prefill(prompt)?;
    let level = |cache: &mut crate::policy::KvCache<S>, logits: &[S]| -> Result<S> {
        let len = cache.len();
        let lp = continue_logprob(policy, cache, logits.to_vec(), answer, S::one())?;
        cache.truncate(len, d);
        Ok(match scoring {
            AnswerScoring::Sum => lp.total,
            AnswerScoring::Mean => lp.total / S::lit(answer.len() as f64),
        })
    };
    let mut levels = Vec::with_capacity(steps.len() + 1);
    levels.push(level(&mut cache, &logits)?);
    for (t, step) in steps.iter().enumerate() {
        needed += step.len();
        if needed > max {
            return Err(Error::ContextOverflow {
                needed,
                max,
                step: Some(t + 1),
            });
        }
        for &tok in step {
            logits = policy.advance(&mut cache, tok)?;
        }
        levels.push(level(&mut cache, &logits)?);
    }
    Ok(levels)
}

pub fn prg<S: Scalar>(
    policy: &Policy<S>,
    prompt: &[Token],
    steps: &[Vec<Token>],
    answer: &[Token],
    scoring: AnswerScoring,
) -> Result<S> {
    if steps.is_empty() {
        return Err(invalid("PRG needs at least one reasoning step"));
    }
    prg_from_logprobs(&answer_logprob_levels(policy, prompt, steps, answer, scoring)?)
}

pub fn prg_weight<S: Scalar>(prg: S, cfg: &WeightConfig) -> S {
    debug_assert!(prg >= S::zero());
    S::lit(cfg.alpha) * (S::one() - (-S::lit(cfg.tau) * prg).exp())
}

/// Splits reasoning tokens into steps. Segment steps include their closing
/// delimiter; a trailing run without one is a final step.
pub fn segment_reasoning(reasoning: &[Token], granularity: StepGranularity) -> Vec<Vec<Token>> {
    match granularity {
        StepGranularity::Token => reasoning.iter().map(|&t| vec![t]).collect(),
        StepGranularity::Segment => reasoning
            .split_inclusive(|&t| t == STEP)
            .map(<[Token]>::to_vec)
            .collect(),
    }
}

/// Reasoning steps and the answer span of a completion, if it has one.
pub fn split_completion(
    tokens: &[Token],
    grammar: &AnswerGrammar,
    granularity: StepGranularity,
) -> Option<(Vec<Vec<Token>>, Vec<Token>)> {
    let value = grammar.extract(tokens)?;
    let start = grammar.answer_start(tokens)?;
    let steps = segment_reasoning(&tokens[..start], granularity);
    Some((steps, grammar.render(&value)))
}

pub fn extract_answer(tokens: &[Token], grammar: &AnswerGrammar) -> Option<Vec<Token>> {
    grammar.extract(tokens)
}

/// Intrinsic signals of one rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertaintyReport<S> {
    pub self_certainty: S,
    pub prg: S,
    pub prg_weight: S,
    pub extracted_answer: Option<String>,
    pub valid: bool,
    pub floored: usize,
}

/// Scores a rollout under `policy`, using its own extracted answer as the
/// PRG target. Invalid rollouts get `prg = 0`; rollouts that answer with no
/// reasoning at all also get `prg = 0`.
pub fn certainty_report<S: Scalar>(
    policy: &Policy<S>,
    rollout: &Rollout<S>,
    grammar: &AnswerGrammar,
    weight: &WeightConfig,
    prg_cfg: &PrgConfig,
) -> Result<CertaintyReport<S>> {
    let sc = self_certainty_of(&rollout.distributions)?;
    let (extracted_answer, prg_value) = match split_completion(&rollout.tokens, grammar, prg_cfg.granularity) {
        None => (None, S::zero()),
        Some((steps, answer)) => {
            let value = grammar.extract(&answer).expect("rendered answer parses");
            let p = if steps.is_empty() {
                S::zero()
            } else {
                prg(policy, &rollout.query, &steps, &answer, prg_cfg.scoring)?
            };
            (Some(canonical_answer(&value)), p)
        }
    };
    Ok(CertaintyReport {
        self_certainty: sc.value,
        prg: prg_value,
        prg_weight: prg_weight(prg_value, weight),
        valid: extracted_answer.is_some(),
        extracted_answer,
        floored: sc.floored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ModelConfig;
    use crate::vocab::{Vocab, EOS};

    #[test]
    fn uniform_is_zero() {
        let d = vec![vec![0.25_f64; 4]; 3];
        assert_eq!(self_certainty_of(&d).unwrap().value, 0.0);
    }

    #[test]
    fn two_token_case() {
        let d = vec![vec![0.9_f64, 0.1]];
        let expected = -0.5 * (1.8_f64.ln() + 0.2_f64.ln());
        let got = self_certainty_of(&d).unwrap().value;
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.5108256).abs() < 1e-6);
    }

    #[test]
    fn zero_probability_is_floored_and_counted() {
        let d = vec![vec![1.0_f64, 0.0, 0.0]];
        let sc = self_certainty_of(&d).unwrap();
        assert_eq!(sc.floored, 2);
        assert!(sc.value.is_finite() && sc.value > 0.0);
        assert!(self_certainty_of::<f64>(&[]).is_err());
    }

    #[test]
    fn prg_formula_examples() {
        let p = prg_from_logprobs(&[-2.0_f64, -1.5, -1.7]).unwrap();
        assert!((p - 0.25).abs() < 1e-15);
        assert_eq!(prg_from_logprobs(&[-1.0_f64, -1.0, -2.0, -3.5]).unwrap(), 0.0);
        assert!((prg_from_logprobs(&[-3.0_f64, -2.25]).unwrap() - 0.75).abs() < 1e-15);
        assert!(prg_from_logprobs(&[-1.0_f64]).is_err());
    }

    #[test]
    fn weight_examples() {
        let cfg = WeightConfig::default();
        assert_eq!(prg_weight(0.0_f64, &cfg), 0.0);
        assert!((prg_weight(1.0_f64, &cfg) - 0.5 * (1.0 - (-0.8_f64).exp())).abs() < 1e-15);
        assert!((prg_weight(1.0_f64, &cfg) - 0.2753355).abs() < 1e-6);
        assert!((prg_weight(1e6_f64, &cfg) - 0.5).abs() < 1e-9);
        assert!(WeightConfig::new(1.5, 0.8).is_err());
        assert!(WeightConfig::new(0.5, 0.0).is_err());
    }

    #[test]
    fn segments_keep_delimiters() {
        let v = Vocab::standard();
        let toks = v.encode("3+4=7 <step> 7*2=4 <step> 4").unwrap();
        let segs = segment_reasoning(&toks, StepGranularity::Segment);
        assert_eq!(segs.len(), 3);
        assert_eq!(*segs[0].last().unwrap(), STEP);
        assert_eq!(segs.concat(), toks);
        assert_eq!(segment_reasoning(&toks, StepGranularity::Token).len(), toks.len());
    }

    fn tiny_policy() -> Policy<f64> {
        let cfg = ModelConfig {
            vocab_size: Vocab::standard().len(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_context: 48,
            d_ff: 8,
        };
        Policy::init(cfg, 4).unwrap()
    }

    #[test]
    fn levels_match_direct_teacher_forcing() {
        let v = Vocab::standard();
        let policy = tiny_policy();
        let prompt = crate::vocab::prompt(&v.encode("start 3; add 4 (mod 10)").unwrap());
        let steps = vec![v.encode("3+4=7 <step>").unwrap(), v.encode("7-1=6 <step>").unwrap()];
        let answer = v.encode("Answer : 6").unwrap();
        let levels = answer_logprob_levels(&policy, &prompt, &steps, &answer, AnswerScoring::Sum).unwrap();
        let mut ctx = prompt.clone();
        for (t, level) in levels.iter().enumerate() {
            if t > 0 {
                ctx.extend_from_slice(&steps[t - 1]);
            }
            let direct = policy.sequence_logprob(&ctx, &answer).unwrap().total;
            assert!((direct - level).abs() < 1e-12);
        }
    }

    #[test]
    fn overflow_names_the_step() {
        let v = Vocab::standard();
        let policy = tiny_policy();
        let prompt = vec![crate::vocab::BOS; 30];
        let steps = vec![vec![STEP; 5], vec![STEP; 20]];
        let answer = v.encode("Answer : 6").unwrap();
        match prg(&policy, &prompt, &steps, &answer, AnswerScoring::Sum) {
            Err(Error::ContextOverflow { step, .. }) => assert_eq!(step, Some(2)),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn invalid_rollout_reports_zero_prg() {
        let v = Vocab::standard();
        let policy = tiny_policy();
        let rollout = Rollout {
            query: vec![crate::vocab::BOS],
            tokens: vec![v.digit(3), EOS],
            distributions: vec![vec![1.0 / 38.0; v.len()]; 2],
            logprobs: vec![(1.0_f64 / 38.0).ln(); 2],
            terminated: true,
        };
        let r = certainty_report(&policy, &rollout, &AnswerGrammar::default(), &WeightConfig::default(), &PrgConfig::default()).unwrap();
        assert!(!r.valid && r.extracted_answer.is_none());
        assert_eq!((r.prg, r.prg_weight), (0.0, 0.0));
    }
}
