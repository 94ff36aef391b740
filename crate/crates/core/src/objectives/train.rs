use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::certainty::{certainty_report, self_certainty, CertaintyReport, PrgConfig};
use crate::corpus::{repeat_for_rollouts, CorpusBundle, SupervisedExample};
use crate::error::{invalid, Error, Result};
use crate::policy::{decode_greedy, sample_rollouts, Policy, RolloutGroup, SamplingConfig, Snapshot};
use crate::scalar::Scalar;
use crate::vocab::{canonical_answer, count_transitional_tokens, prompt, AnswerGrammar, Lexicon, Vocab, EOS};

use super::losses::{mixed_loss, rlvr_loss, Mixing, RdItem};
use super::optim::{clip_global_norm, Optimizer};
use super::{LossBreakdown, Mode, TrainConfig};

/// Greedy-decoding statistics on the held-out probe set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub accuracy: f64,
    pub invalid_ratio: f64,
    pub self_certainty_mean: f64,
    /// Mean number of transitional words per output.
    pub transitional_freq: f64,
}

/// One row of the metrics stream, emitted after each update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub mode: Mode,
    /// Which objective ran this step; differs from `mode` only for the
    /// curriculum baselines.
    pub phase: String,
    pub loss: f64,
    pub rlif_term: f64,
    pub rd_term: f64,
    pub kl_term: f64,
    pub prg_weight_used: f64,
    /// Means over this step's rollouts; absent when no rollouts were drawn.
    pub prg_mean: Option<f64>,
    pub ps_mean: Option<f64>,
    pub rollout_certainty_mean: Option<f64>,
    pub self_certainty_mean: f64,
    pub transitional_freq: f64,
    pub probe_accuracy: f64,
    pub probe_invalid_ratio: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub certainty: Vec<CertaintyReport<f64>>,
}

pub struct TrainingOutcome<S> {
    pub policy: Policy<S>,
    pub metrics: Vec<MetricsRecord>,
    /// Probe statistics of the initial policy.
    pub initial_probe: ProbeStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Rd,
    Rlif,
    Hybrid,
    Equal,
    Rlvr,
    Sft,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Rd => "rd",
            Phase::Rlif => "rlif",
            Phase::Hybrid => "hybrid",
            Phase::Equal => "equal",
            Phase::Rlvr => "rlvr",
            Phase::Sft => "sft",
        }
    }

    fn unsupervised_rollouts(self) -> bool {
        matches!(self, Phase::Rlif | Phase::Hybrid | Phase::Equal)
    }

    fn uses_rd(self) -> bool {
        matches!(self, Phase::Rd | Phase::Hybrid | Phase::Equal | Phase::Sft)
    }
}

fn phase_at(cfg: &TrainConfig, step: usize) -> Phase {
    let first = step <= (cfg.switch_fraction * cfg.steps as f64).round() as usize;
    match cfg.mode {
        Mode::Hybrid => Phase::Hybrid,
        Mode::RdOnly => Phase::Rd,
        Mode::RlifOnly => Phase::Rlif,
        Mode::Rlvr => Phase::Rlvr,
        Mode::Sft => Phase::Sft,
        Mode::EqualWeight => Phase::Equal,
        Mode::CtRdThenRlif => {
            if first {
                Phase::Rd
            } else {
                Phase::Rlif
            }
        }
        Mode::CtRlifThenRd => {
            if first {
                Phase::Rlif
            } else {
                Phase::Rd
            }
        }
    }
}

/// SplitMix64 finalizer over a combined key.
fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(c.wrapping_mul(0x94d0_49bb_1331_11eb))
        .wrapping_add(0x2545_f491_4f6c_dd1d);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Greedy-decodes every probe query and scores the outputs.
pub fn probe_stats<S: Scalar>(
    policy: &Policy<S>,
    probe: &[SupervisedExample],
    max_len: usize,
    grammar: &AnswerGrammar,
    lexicon: &Lexicon,
) -> Result<ProbeStats> {
    if probe.is_empty() {
        return Err(invalid("probe set is empty"));
    }
    let mut stats = ProbeStats::default();
    for ex in probe {
        let out = decode_greedy(policy, &prompt(&ex.query), max_len, EOS)?;
        let gold = ex
            .gold_value(grammar)
            .ok_or_else(|| invalid(format!("probe example {} has no gold answer", ex.id)))?;
        match grammar.extract(&out.tokens) {
            Some(v) if canonical_answer(&v) == canonical_answer(&gold) => stats.accuracy += 1.0,
            Some(_) => {}
            None => stats.invalid_ratio += 1.0,
        }
        stats.self_certainty_mean += self_certainty(&out)?.as_f64();
        stats.transitional_freq += count_transitional_tokens(&out.tokens, lexicon) as f64;
    }
    let n = probe.len() as f64;
    stats.accuracy /= n;
    stats.invalid_ratio /= n;
    stats.self_certainty_mean /= n;
    stats.transitional_freq /= n;
    Ok(stats)
}

fn report_f64<S: Scalar>(r: &CertaintyReport<S>) -> CertaintyReport<f64> {
    CertaintyReport {
        self_certainty: r.self_certainty.as_f64(),
        prg: r.prg.as_f64(),
        prg_weight: r.prg_weight.as_f64(),
        extracted_answer: r.extracted_answer.clone(),
        valid: r.valid,
        floored: r.floored,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Reduces an error raised while computing the loss at `step` to a
/// divergence report when it comes from non-finite arithmetic.
fn at_step(step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite(reason) => Error::Diverged { step, reason },
        other => other,
    }
}

/// Trains a fresh policy under `cfg`, calling `observer` with each metrics
/// row as soon as it exists.
pub fn run_training<S: Scalar>(
    cfg: &TrainConfig,
    corpus: &CorpusBundle,
    probe: &[SupervisedExample],
    mut observer: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainingOutcome<S>> {
    cfg.validate()?;
    let vocab = Vocab::standard();
    let grammar = AnswerGrammar::default();
    let lexicon = Lexicon::default();
    let rl = cfg.rl();
    let weight = cfg.weight();
    let prg_cfg = PrgConfig {
        granularity: cfg.prg_granularity,
        scoring: cfg.answer_scoring,
    };
    let phases: Vec<Phase> = (1..=cfg.steps).map(|s| phase_at(cfg, s)).collect();
    if phases.iter().any(|p| p.unsupervised_rollouts()) && corpus.unsupervised.is_empty() {
        return Err(invalid("this mode needs unsupervised queries"));
    }
    if phases.iter().any(|p| matches!(p, Phase::Rlvr | Phase::Sft)) && corpus.supervised.is_empty() {
        return Err(invalid("this mode needs supervised examples"));
    }
    let rd_pool: Vec<RdItem> = corpus
        .supervised
        .iter()
        .map(|e| RdItem {
            id: e.id.clone(),
            context: prompt(&e.query),
            target: e.teacher_sequence(),
        })
        .chain(corpus.dummy.iter().map(|d| RdItem {
            id: d.id.clone(),
            context: prompt(&d.query),
            target: d.pseudo_target.clone(),
        }))
        .collect();
    let sft_pool: Vec<RdItem> = corpus
        .supervised
        .iter()
        .map(|e| RdItem {
            id: e.id.clone(),
            context: prompt(&e.query),
            target: e.answer_sequence(),
        })
        .collect();
    if phases.iter().any(|p| matches!(p, Phase::Rd | Phase::Hybrid | Phase::Equal)) && rd_pool.is_empty() {
        return Err(invalid("this mode needs supervised or dummy examples"));
    }

    let mut policy = Policy::<S>::init(cfg.model(vocab.len()), cfg.seed)?;
    let reference = Snapshot::of(&policy, 0);
    let mut optimizer = Optimizer::from_config(cfg, policy.n_params())?;
    // Independent streams, so switching one consumer off leaves the others intact.
    let mut query_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1, 0));
    let mut rd_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2, 0));
    let mut sup_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 3, 0));
    let sampling = SamplingConfig {
        group_size: cfg.group_size,
        temperature: S::lit(cfg.temperature),
        max_len: cfg.max_len,
        eos: EOS,
    };
    let probe = &probe[..cfg.probe_size.min(probe.len())];
    let initial_probe = probe_stats(&policy, probe, cfg.max_len, &grammar, &lexicon)?;
    let mut metrics = Vec::with_capacity(cfg.steps);

    for (step, &phase) in (1..=cfg.steps).zip(&phases) {
        let old = Snapshot::of(&policy, step as u64);
        let mut groups: Vec<RolloutGroup<S>> = Vec::new();
        let mut gold = Vec::new();
        if phase.unsupervised_rollouts() {
            for q in 0..cfg.unsup_batch {
                let i = query_rng.gen_range(0..corpus.unsupervised.len());
                let p = prompt(&corpus.unsupervised[i].query);
                groups.push(sample_rollouts(&old, &p, &sampling, mix_seed(cfg.seed, step as u64, q as u64))?);
            }
        } else if phase == Phase::Rlvr {
            for q in 0..cfg.unsup_batch {
                let ex = &corpus.supervised[sup_rng.gen_range(0..corpus.supervised.len())];
                let value = ex
                    .gold_value(&grammar)
                    .ok_or_else(|| invalid(format!("example {} has no gold answer", ex.id)))?;
                gold.push(canonical_answer(&value));
                let p = prompt(&ex.query);
                groups.push(sample_rollouts(&old, &p, &sampling, mix_seed(cfg.seed, step as u64, q as u64))?);
            }
        }
        let reports: Vec<Vec<CertaintyReport<S>>> = groups
            .iter()
            .map(|g| {
                g.rollouts
                    .iter()
                    .map(|r| certainty_report(old.policy(), r, &grammar, &weight, &prg_cfg))
                    .collect()
            })
            .collect::<Result<_>>()?;

        let mut rd_batch = Vec::new();
        if phase.uses_rd() {
            let pool = if phase == Phase::Sft { &sft_pool } else { &rd_pool };
            let picked: Vec<RdItem> = (0..cfg.sup_batch)
                .map(|_| pool[rd_rng.gen_range(0..pool.len())].clone())
                .collect();
            rd_batch = repeat_for_rollouts(&picked, cfg.group_size);
        }

        let mut grad = policy.zeros_like();
        let breakdown: LossBreakdown<S> = match phase {
            Phase::Rd | Phase::Sft => mixed_loss(
                &policy,
                &old,
                &reference,
                &[],
                &rd_batch,
                &rl,
                Mixing::Fixed(S::zero()),
                Some(&mut grad),
            ),
            Phase::Rlif => mixed_loss(
                &policy,
                &old,
                &reference,
                &groups,
                &[],
                &rl,
                Mixing::Fixed(S::one()),
                Some(&mut grad),
            ),
            Phase::Equal => mixed_loss(
                &policy,
                &old,
                &reference,
                &groups,
                &rd_batch,
                &rl,
                Mixing::Fixed(S::lit(0.5)),
                Some(&mut grad),
            ),
            Phase::Hybrid => {
                let weights: Vec<Vec<S>> = reports
                    .iter()
                    .map(|g| g.iter().map(|r| r.prg_weight).collect())
                    .collect();
                mixed_loss(
                    &policy,
                    &old,
                    &reference,
                    &groups,
                    &rd_batch,
                    &rl,
                    Mixing::Adaptive {
                        weights: &weights,
                        mode: cfg.weight_mode,
                    },
                    Some(&mut grad),
                )
            }
            Phase::Rlvr => rlvr_loss(
                &policy,
                &old,
                &reference,
                &groups,
                &gold,
                &grammar,
                &rl,
                Some(&mut grad),
            )
            .map(|t| LossBreakdown {
                total: t.loss,
                rlif_term: t.loss,
                rd_term: S::zero(),
                kl_term: S::lit(rl.kl_beta) * t.kl,
                prg_weight_used: S::one(),
                advantages: t.advantages,
            }),
        }
        .map_err(|e| at_step(step, e))?;

        if !breakdown.total.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {}", breakdown.total),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                reason: format!("gradient coordinate {i} is {}", grad[i]),
            });
        }
        let grad_norm = clip_global_norm(&mut grad, S::lit(cfg.grad_clip));
        optimizer.step(policy.params_mut(), &grad);
        if policy.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                step,
                reason: "parameters became non-finite".into(),
            });
        }

        let stats = probe_stats(&policy, probe, cfg.max_len, &grammar, &lexicon)?;
        let flat: Vec<&CertaintyReport<S>> = reports.iter().flatten().collect();
        let record = MetricsRecord {
            step,
            mode: cfg.mode,
            phase: phase.name().to_string(),
            loss: breakdown.total.as_f64(),
            rlif_term: breakdown.rlif_term.as_f64(),
            rd_term: breakdown.rd_term.as_f64(),
            kl_term: breakdown.kl_term.as_f64(),
            prg_weight_used: breakdown.prg_weight_used.as_f64(),
            prg_mean: mean(flat.iter().map(|r| r.prg.as_f64())),
            ps_mean: mean(flat.iter().map(|r| r.prg_weight.as_f64())),
            rollout_certainty_mean: mean(flat.iter().map(|r| r.self_certainty.as_f64())),
            self_certainty_mean: stats.self_certainty_mean,
            transitional_freq: stats.transitional_freq,
            probe_accuracy: stats.accuracy,
            probe_invalid_ratio: stats.invalid_ratio,
            grad_norm: grad_norm.as_f64(),
            certainty: flat.iter().map(|r| report_f64(r)).collect(),
        };
        observer(&record)?;
        metrics.push(record);
    }
    Ok(TrainingOutcome {
        policy,
        metrics,
        initial_probe,
    })
}
