//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use hylab::certainty::{
    prg_from_logprobs, prg_weight, self_certainty_of, split_completion, PrgConfig, StepGranularity, WeightConfig,
};
use hylab::corpus::{build_bundle, BundleSpec};
use hylab::eval::{confidence_bins, faithfulness_auroc, EvalRecord};
use hylab::objectives::{
    group_advantages, hybrid_loss, kl_penalty, loss_gradient, mixed_loss, rd_loss, rlif_loss, rlvr_loss,
    run_training, Mixing, Mode, Objective, OptimizerKind, RdItem, RlConfig, TrainConfig, WeightMode,
};
use hylab::oracle::{bundled_tables, exact_posterior_entropy, random_table, surrogate_decomposition};
use hylab::policy::{sample_rollouts, ModelConfig, Policy, RolloutGroup, SamplingConfig, Snapshot};
use hylab::vocab::{prompt, AnswerGrammar, Vocab, EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn oracle_identity() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let size = rng.gen_range(2..=64);
        let table = random_table::<f64>(&mut rng, size).unwrap();
        worst = worst.max(surrogate_decomposition(&table).unwrap().residual);
    }
    let fixture = &bundled_tables::<f64>().unwrap()[0].table;
    let h = exact_posterior_entropy(fixture).unwrap().entropy;
    let elapsed = t0.elapsed();
    let pass = worst < 1e-10 && (h - 0.823960).abs() < 1e-6 && elapsed < Duration::from_secs(10);
    outcome(
        pass,
        format!("max residual {worst:.2e} over 1000 tables, fixture H = {h:.6}, {}", secs(elapsed)),
    )
}

struct Loss<F>(F);

impl<F: Fn(&Policy<f64>, Option<&mut [f64]>) -> hylab::Result<f64>> Objective<f64> for Loss<F> {
    fn evaluate(&self, policy: &Policy<f64>, grad: Option<&mut [f64]>) -> hylab::Result<f64> {
        (self.0)(policy, grad)
    }
}

/// Worst relative error against central differences on 200 coordinates.
fn fd_error(policy: &Policy<f64>, objective: &dyn Objective<f64>, seed: u64) -> f64 {
    const H: f64 = 1e-5;
    let analytic = loss_gradient(policy, objective).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = policy.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let i = rng.gen_range(0..policy.n_params());
        let x = policy.params()[i];
        probe.params_mut()[i] = x + H;
        let up = objective.evaluate(&probe, None).unwrap();
        probe.params_mut()[i] = x - H;
        let down = objective.evaluate(&probe, None).unwrap();
        probe.params_mut()[i] = x;
        let fd = (up - down) / (2.0 * H);
        worst = worst.max((analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6));
    }
    worst
}

fn perturbed(base: &Policy<f64>, scale: f64, seed: u64) -> Policy<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = base.clone();
    for x in p.params_mut() {
        *x += scale * rng.gen_range(-1.0..1.0);
    }
    p
}

fn toy_groups(old: &Snapshot<f64>, group_size: usize, max_len: usize, seed: u64) -> Vec<RolloutGroup<f64>> {
    let v = Vocab::standard();
    let sampling = SamplingConfig {
        group_size,
        temperature: 1.0,
        max_len,
        eos: EOS,
    };
    ["start 3; add 4 (mod 10)", "start 9; mul 2; sub 5 (mod 10)"]
        .iter()
        .enumerate()
        .map(|(i, q)| sample_rollouts(old, &prompt(&v.encode(q).unwrap()), &sampling, seed + i as u64).unwrap())
        .collect()
}

fn toy_rd_batch() -> Vec<RdItem> {
    let v = Vocab::standard();
    [
        ("s1", "start 3; add 4 (mod 10)", "3+4=7 <step> Answer : 7 <eos>"),
        ("s2", "start 2; mul 5; sub 1 (mod 10)", "2*5=0 <step> 0-1=9 <step> Answer : 9 <eos>"),
        ("dummy-u", "start 8; add 1 (mod 10)", "Wait 4 ( : 7"),
    ]
    .iter()
    .map(|(id, q, t)| RdItem {
        id: id.to_string(),
        context: prompt(&v.encode(q).unwrap()),
        target: v.encode(t).unwrap(),
    })
    .collect()
}

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let config = ModelConfig {
        vocab_size: Vocab::standard().len(),
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_context: 64,
        d_ff: 32,
    };
    let base = Policy::<f64>::init(config, 77).unwrap();
    let old = Snapshot::of(&base, 1);
    let groups = toy_groups(&old, 4, 10, 5);
    let theta = perturbed(&base, 2e-3, 6);
    let reference = perturbed(&base, 2e-2, 7);
    let batch = toy_rd_batch();
    let cfg = RlConfig {
        group_size: 4,
        kl_beta: 0.05,
        ..RlConfig::default()
    };
    let grammar = AnswerGrammar::default();
    let (weight, prg) = (WeightConfig::default(), PrgConfig::default());
    let gold = vec!["7".to_string(), "3".to_string()];

    let rd = Loss(|p: &Policy<f64>, g: Option<&mut [f64]>| rd_loss(p, &batch, 1.0, g));
    let rlif = Loss(|p: &Policy<f64>, g: Option<&mut [f64]>| {
        rlif_loss(p, &old, &reference, &groups, &cfg, g).map(|t| t.loss)
    });
    let rlvr = Loss(|p: &Policy<f64>, g: Option<&mut [f64]>| {
        rlvr_loss(p, &old, &reference, &groups, &gold, &grammar, &cfg, g).map(|t| t.loss)
    });
    let hybrid = Loss(|p: &Policy<f64>, g: Option<&mut [f64]>| {
        hybrid_loss(p, &old, &reference, &groups, &batch, &cfg, &weight, &prg, &grammar, WeightMode::BatchScalar, g)
            .map(|b| b.total)
    });
    let errors = [
        ("rd", fd_error(&theta, &rd, 1)),
        ("rlif", fd_error(&theta, &rlif, 2)),
        ("rlvr", fd_error(&theta, &rlvr, 3)),
        ("hybrid", fd_error(&theta, &hybrid, 4)),
    ];
    let elapsed = t0.elapsed();
    let pass = errors.iter().all(|(_, e)| *e <= 1e-4) && elapsed < Duration::from_secs(120);
    let listed: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(pass, format!("worst relative error {}, {}", listed.join(", "), secs(elapsed)))
}

fn closed_forms() -> Outcome {
    let uniform: f64 = self_certainty_of(&[vec![1.0 / 37.0; 37]]).unwrap().value;
    let two: f64 = self_certainty_of(&[vec![0.9, 0.1]]).unwrap().value;
    let w: f64 = prg_weight(1.0, &WeightConfig::new(0.5, 0.8).unwrap());
    let kl = kl_penalty(0.0_f64, 2f64.ln()).unwrap();
    let adv = group_advantages(&[1.0_f64, 2.0, 3.0]).unwrap();
    let checks = [
        uniform == 0.0,
        (two - 0.5108256).abs() <= 1e-6,
        (w - 0.2753355).abs() <= 1e-6,
        (kl - 0.306853).abs() <= 1e-6,
        adv.iter()
            .zip([-1.224745, 0.0, 1.224745])
            .all(|(a, b)| (a - b).abs() <= 1e-6),
    ];
    outcome(
        checks.iter().all(|&c| c),
        format!(
            "uniform {uniform}, two-token {two:.7}, P_s(1) {w:.7}, KL(r=2) {kl:.6}, advantages ({:.6}, {:.6}, {:.6})",
            adv[0], adv[1], adv[2]
        ),
    )
}

fn records(conf: &[f64], correct: &[bool]) -> Vec<EvalRecord> {
    conf.iter()
        .zip(correct)
        .enumerate()
        .map(|(i, (&c, &ok))| EvalRecord {
            id: format!("r{i:03}"),
            extracted_answer: Some(if ok { "1" } else { "2" }.into()),
            gold_answer: "1".into(),
            correct: ok,
            confidence: c,
            n_samples_used: 1,
        })
        .collect()
}

fn invariant_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut failures = Vec::new();

    let (mut worst_mean, mut worst_std): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let n = rng.gen_range(2..=32);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let a = group_advantages(&r).unwrap();
        let m = a.iter().sum::<f64>() / n as f64;
        let s = (a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        worst_mean = worst_mean.max(m.abs());
        worst_std = worst_std.max((s - 1.0).abs());
    }
    if worst_mean > 1e-12 || worst_std > 1e-9 || group_advantages(&[0.3; 8]).unwrap() != vec![0.0; 8] {
        failures.push(format!("advantages (mean {worst_mean:.1e}, std {worst_std:.1e})"));
    }

    for (alpha, tau) in [(0.5, 0.8), (0.1, 0.2), (1.0, 2.0), (0.0, 1.0)] {
        let cfg = WeightConfig::new(alpha, tau).unwrap();
        let ws: Vec<f64> = (0..200).map(|i| prg_weight(i as f64 * 0.05, &cfg)).collect();
        if ws.iter().any(|w| !(0.0..=alpha).contains(w)) || ws.windows(2).any(|p| p[1] < p[0]) {
            failures.push(format!("P_s bounds/monotonicity at alpha {alpha}, tau {tau}"));
        }
    }

    for _ in 0..200 {
        let mut levels = vec![rng.gen_range(-10.0..0.0)];
        for _ in 0..rng.gen_range(1..8) {
            let last: f64 = *levels.last().unwrap();
            levels.push(last - rng.gen_range(0.0..2.0));
        }
        if prg_from_logprobs(&levels).unwrap() != 0.0 {
            failures.push("PRG on non-increasing levels".into());
            break;
        }
    }

    // Convex-combination identity of the hybrid loss.
    let v = Vocab::standard();
    let base = Policy::<f64>::init(ModelConfig::tiny(v.len()), 3).unwrap();
    let old = Snapshot::of(&base, 1);
    let groups = toy_groups(&old, 4, 8, 11);
    let theta = perturbed(&base, 1e-3, 12);
    let batch = toy_rd_batch();
    let cfg = RlConfig {
        group_size: 4,
        ..RlConfig::default()
    };
    let mut worst_convex: f64 = 0.0;
    for _ in 0..20 {
        let weights: Vec<Vec<f64>> = groups
            .iter()
            .map(|g| g.rollouts.iter().map(|_| rng.gen_range(0.0..0.5)).collect())
            .collect();
        let b = mixed_loss(
            &theta,
            &old,
            &base,
            &groups,
            &batch,
            &cfg,
            Mixing::Adaptive {
                weights: &weights,
                mode: WeightMode::BatchScalar,
            },
            None,
        )
        .unwrap();
        let mean = weights.iter().flatten().sum::<f64>() / 8.0;
        worst_convex = worst_convex.max((b.total - (mean * b.rlif_term + (1.0 - mean) * b.rd_term)).abs());
    }
    if worst_convex > 1e-12 {
        failures.push(format!("hybrid convex identity off by {worst_convex:.1e}"));
    }

    // Clipping: ratios pushed outside [1 - eps, 1 + eps] on the flat side.
    let mut group = groups[0].clone();
    for (i, text) in ["Answer : 7 <eos>", "3+4=7 <step> Answer : 7 <eos>", "Answer : 1 <eos>", "Hmm <eos>"]
        .iter()
        .enumerate()
    {
        let r = &mut group.rollouts[i];
        r.tokens = v.encode(text).unwrap();
        let lp = base.score(&r.query, &r.tokens, 1.0).unwrap().logprobs().to_vec();
        let shift = if i < 2 { -1.0 } else { 1.0 };
        r.logprobs = lp.iter().map(|x| x + shift).collect();
    }
    let flat_cfg = RlConfig { kl_beta: 0.0, ..cfg };
    let mut grad = base.zeros_like();
    rlvr_loss(&base, &old, &base, &[group], &["7".into()], &AnswerGrammar::default(), &flat_cfg, Some(&mut grad))
        .unwrap();
    if grad.iter().any(|&g| g != 0.0) {
        failures.push("clipped ratios leaked gradient".into());
    }

    for _ in 0..200 {
        let n = rng.gen_range(3..60);
        let conf: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut correct: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        correct[0] = true;
        correct[1] = false;
        let recs = records(&conf, &correct);
        let b = confidence_bins(&recs).unwrap();
        let sizes = [b.low.count, b.mid.count, b.high.count];
        if sizes.iter().sum::<usize>() != n || sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 1 {
            failures.push(format!("tercile sizes {sizes:?} for {n}"));
            break;
        }
        let moved: Vec<f64> = conf.iter().map(|c| (2.5 * c - 1.0).exp()).collect();
        let a = faithfulness_auroc(&recs).unwrap();
        let b = faithfulness_auroc(&records(&moved, &correct)).unwrap();
        if (a - b).abs() > 1e-12 {
            failures.push("AUROC changed under a monotone transform".into());
            break;
        }
    }

    if failures.is_empty() {
        outcome(
            true,
            "advantages, P_s bounds, PRG floor, convex identity, clipping, terciles, AUROC ranks",
        )
    } else {
        outcome(false, failures.join("; "))
    }
}

/// Desk-scale training setup shared by the directional experiment.
fn experiment_config(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        seed,
        steps: 500,
        optimizer: OptimizerKind::Adam,
        lr: 1e-3,
        max_len: 32,
        probe_size: 16,
        ..TrainConfig::default()
    }
}

fn directional_experiment() -> Outcome {
    let t0 = Instant::now();
    let mut rows = Vec::new();
    let (mut a_wins, mut b_wins, mut c_all) = (0, 0, true);
    for seed in [1, 2, 3] {
        let (bundle, probe) = build_bundle(&BundleSpec {
            seed,
            max_completion_len: 32,
            ..BundleSpec::default()
        })
        .unwrap();
        let hybrid = run_training::<f64>(&experiment_config(Mode::Hybrid, seed), &bundle, &probe, |_| Ok(())).unwrap();
        let rlif = run_training::<f64>(&experiment_config(Mode::RlifOnly, seed), &bundle, &probe, |_| Ok(())).unwrap();
        let h = hybrid.metrics.last().unwrap();
        let r = rlif.metrics.last().unwrap();
        a_wins += usize::from(h.probe_accuracy >= r.probe_accuracy);
        b_wins += usize::from(h.self_certainty_mean < r.self_certainty_mean);
        c_all &= r.self_certainty_mean > rlif.initial_probe.self_certainty_mean;
        rows.push(format!(
            "seed {seed}: acc {:.3}/{:.3}, sc {:.3}/{:.3}, rlif sc {:.3}->{:.3}",
            h.probe_accuracy,
            r.probe_accuracy,
            h.self_certainty_mean,
            r.self_certainty_mean,
            rlif.initial_probe.self_certainty_mean,
            r.self_certainty_mean
        ));
    }
    let elapsed = t0.elapsed();
    let pass = a_wins >= 2 && b_wins >= 2 && c_all && elapsed < Duration::from_secs(15 * 60);
    outcome(
        pass,
        format!(
            "(a) {a_wins}/3 (b) {b_wins}/3 (c) {}; hybrid/rlif {}; {}",
            if c_all { "3/3" } else { "not all" },
            rows.join("; "),
            secs(elapsed)
        ),
    )
}

fn fallback() -> Outcome {
    let v = Vocab::standard();
    let base = Policy::<f64>::init(ModelConfig::tiny(v.len()), 8).unwrap();
    let old = Snapshot::of(&base, 4);
    let groups = toy_groups(&old, 8, 12, 31);
    let grammar = AnswerGrammar::default();
    let invalid = groups
        .iter()
        .flat_map(|g| &g.rollouts)
        .all(|r| split_completion(&r.tokens, &grammar, StepGranularity::Segment).is_none());
    if !invalid {
        return outcome(false, "setup: some rollout carries a parsable answer");
    }
    let theta = perturbed(&base, 1e-3, 9);
    let cfg = RlConfig::default();
    let b = hybrid_loss(
        &theta,
        &old,
        &base,
        &groups,
        &toy_rd_batch(),
        &cfg,
        &WeightConfig::default(),
        &PrgConfig::default(),
        &grammar,
        WeightMode::BatchScalar,
        None,
    )
    .unwrap();
    let gap = (b.total - b.rd_term).abs();
    outcome(
        gap <= 1e-12 && b.prg_weight_used == 0.0,
        format!("mean P_s {}, |total - rd| = {gap:.1e}", b.prg_weight_used),
    )
}

fn hylab(args: &[&str], dir: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_hylab"))
        .args(args)
        .current_dir(dir)
        .env("HYLAB_OUT", dir)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = hylab(&["corpus", "build", "--out", "corpus", "--seed", "4"], d)
        && hylab(
            &[
                "train", "--corpus", "corpus", "--out", "first", "--mode", "HYBRID", "--steps", "40", "--seed", "4",
                "--set", "max_len=24", "--set", "probe_size=8", "--set", "optimizer=\"adam\"", "--lr", "0.001",
            ],
            d,
        )
        && hylab(&["train", "--replay", "first/manifest.json", "--out", "second"], d);
    if !ok {
        return outcome(false, "a CLI invocation failed");
    }
    let a = std::fs::read(d.join("first/metrics.jsonl")).unwrap();
    let b = std::fs::read(d.join("second/metrics.jsonl")).unwrap();
    let rows = a.iter().filter(|&&c| c == b'\n').count();
    outcome(
        a == b && rows == 41,
        format!("{} bytes, {rows} lines, identical: {}", a.len(), a == b),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("1 oracle identity", oracle_identity),
        ("2 gradient correctness", gradient_correctness),
        ("3 closed-form checks", closed_forms),
        ("4 invariant suite", invariant_suite),
        ("5 directional training experiment", directional_experiment),
        ("6 fallback to RD", fallback),
        ("7 reproducibility", reproducibility),
    ];
    // `cargo test -- <filter>` selects criteria by substring.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = check();
        println!("acceptance {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
