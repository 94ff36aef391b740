//! Exact enumeration checks of the posterior-entropy surrogate.
//!
//! A table lists trajectories with prior probabilities `p` and weights
//! `P_s`. Conditioning on the latent event gives the posterior
//! `k * P_s * p` with `k = 1 / sum(P_s * p)`. Its entropy splits exactly into
//! `-k E[P_s log p] - k E[P_s log P_s] - k log k E[P_s]` under the prior;
//! the training surrogate keeps only the first term. `0 log 0 = 0` throughout.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::certainty::{prg_from_logprobs, prg_weight, WeightConfig};
use crate::error::{invalid, Error, Result};
use crate::policy::{ModelConfig, Policy};
use crate::scalar::{softmax_into, xlogx, Scalar};
use crate::vocab::Token;

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTable<S> {
    pub trajectories: Vec<String>,
    pub prior: Vec<S>,
    pub ps: Vec<S>,
}

impl<S: Scalar> TrajectoryTable<S> {
    /// Table with trajectories labelled by position.
    pub fn new(prior: Vec<S>, ps: Vec<S>) -> Result<Self> {
        let trajectories = (0..prior.len()).map(|i| format!("o{i}")).collect();
        Self::with_labels(trajectories, prior, ps)
    }

    pub fn with_labels(trajectories: Vec<String>, prior: Vec<S>, ps: Vec<S>) -> Result<Self> {
        let t = Self {
            trajectories,
            prior,
            ps,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.prior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.prior.len();
        if n == 0 {
            return Err(invalid("table has no trajectories"));
        }
        if self.ps.len() != n || self.trajectories.len() != n {
            return Err(invalid(format!(
                "table lengths disagree: {} priors, {} weights, {} labels",
                n,
                self.ps.len(),
                self.trajectories.len()
            )));
        }
        if let Some(p) = self.prior.iter().find(|p| !(p.is_finite() && **p >= S::zero())) {
            return Err(invalid(format!("prior probability {p} is not a probability")));
        }
        let total: S = self.prior.iter().copied().sum();
        let tol = (S::epsilon() * S::lit(4.0 * n as f64)).max(S::lit(1e-12));
        if (total - S::one()).abs() > tol {
            return Err(invalid(format!("priors sum to {total}, not 1")));
        }
        if let Some(w) = self.ps.iter().find(|w| !(**w >= S::zero() && **w <= S::one())) {
            return Err(invalid(format!("weight {w} outside [0, 1]")));
        }
        if self.ps.iter().all(|w| *w == S::zero()) {
            return Err(Error::Degenerate(
                "every weight is zero, so the conditioning event has probability zero".into(),
            ));
        }
        Ok(())
    }

    /// `sum P_s * p`, the probability of the conditioning event.
    fn evidence(&self) -> Result<S> {
        self.validate()?;
        let z: S = self.prior.iter().zip(&self.ps).map(|(&p, &w)| p * w).sum();
        if z <= S::zero() {
            return Err(Error::Degenerate(
                "no trajectory with positive weight has positive prior".into(),
            ));
        }
        Ok(z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorEntropy<S> {
    pub entropy: S,
    pub k: S,
    pub posterior: Vec<S>,
}

pub fn exact_posterior_entropy<S: Scalar>(table: &TrajectoryTable<S>) -> Result<PosteriorEntropy<S>> {
    let k = table.evidence()?.recip();
    let posterior: Vec<S> = table
        .prior
        .iter()
        .zip(&table.ps)
        .map(|(&p, &w)| k * w * p)
        .collect();
    let entropy = S::zero() - posterior.iter().map(|&q| xlogx(q)).sum::<S>();
    Ok(PosteriorEntropy {
        entropy,
        k,
        posterior,
    })
}

/// The three prior expectations whose sum is the posterior entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition<S> {
    /// `-k E[P_s log p]`
    pub term_main: S,
    /// `-k E[P_s log P_s]`
    pub term_pslogps: S,
    /// `-k log k E[P_s]`, which equals `-log k`.
    pub term_logk: S,
    pub entropy: S,
    pub k: S,
    pub residual: S,
}

pub fn surrogate_decomposition<S: Scalar>(table: &TrajectoryTable<S>) -> Result<Decomposition<S>> {
    let exact = exact_posterior_entropy(table)?;
    let k = exact.k;
    let mut main = S::zero();
    let mut pslogps = S::zero();
    let mut mass = S::zero();
    for (&p, &w) in table.prior.iter().zip(&table.ps) {
        main += w * xlogx(p);
        pslogps += p * xlogx(w);
        mass += p * w;
    }
    let term_main = -k * main;
    let term_pslogps = -k * pslogps;
    let term_logk = -k * k.ln() * mass;
    let residual = (exact.entropy - (term_main + term_pslogps + term_logk)).abs();
    Ok(Decomposition {
        term_main,
        term_pslogps,
        term_logk,
        entropy: exact.entropy,
        k,
        residual,
    })
}

/// How far the kept surrogate term is from the exact entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProportionalityReport {
    /// `S = -E[P_s log p]` under the prior.
    pub surrogate: f64,
    pub k: f64,
    pub entropy: f64,
    /// `term_pslogps + term_logk`, so that `entropy = k * surrogate + dropped`.
    pub dropped: f64,
    /// `|dropped| / |k * surrogate|`; absent when the surrogate is zero.
    pub dropped_rel: Option<f64>,
    pub residual: f64,
}

pub fn verify_proportionality<S: Scalar>(table: &TrajectoryTable<S>) -> Result<ProportionalityReport> {
    let d = surrogate_decomposition(table)?;
    let surrogate = d.term_main / d.k;
    let dropped = d.term_pslogps + d.term_logk;
    let scaled = d.term_main.as_f64();
    Ok(ProportionalityReport {
        surrogate: surrogate.as_f64(),
        k: d.k.as_f64(),
        entropy: d.entropy.as_f64(),
        dropped: dropped.as_f64(),
        dropped_rel: (scaled != 0.0).then(|| dropped.as_f64().abs() / scaled.abs()),
        residual: d.residual.as_f64(),
    })
}

/// One line of the oracle report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub residual: f64,
    pub dropped_rel: Option<f64>,
    pub size: usize,
    pub entropy: f64,
    pub k: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

pub fn oracle_row<S: Scalar>(table: &TrajectoryTable<S>, name: Option<String>) -> Result<OracleRow> {
    let r = verify_proportionality(table)?;
    Ok(OracleRow {
        residual: r.residual,
        dropped_rel: r.dropped_rel,
        size: table.len(),
        entropy: r.entropy,
        k: r.k,
        name,
    })
}

/// Random valid table: Dirichlet(1) prior, uniform weights with one forced
/// positive entry.
pub fn random_table<S: Scalar>(rng: &mut impl Rng, size: usize) -> Result<TrajectoryTable<S>> {
    if size == 0 {
        return Err(invalid("table size must be positive"));
    }
    let raw: Vec<f64> = (0..size).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
    let total: f64 = raw.iter().sum();
    let mut prior: Vec<S> = raw.iter().map(|x| S::lit(x / total)).collect();
    // Put the rounding error on the largest entry.
    let drift = S::one() - prior.iter().copied().sum::<S>();
    let big = (0..size)
        .max_by(|&a, &b| prior[a].partial_cmp(&prior[b]).unwrap())
        .unwrap();
    prior[big] += drift;
    let mut ps: Vec<S> = (0..size).map(|_| S::lit(rng.gen::<f64>())).collect();
    let forced = rng.gen_range(0..size);
    ps[forced] = S::lit(rng.gen_range(0.05..=1.0));
    TrajectoryTable::new(prior, ps)
}

/// Enumeration bounds accepted by [`enumerate_policy_table`].
pub const MAX_ENUM_VOCAB: usize = 8;
pub const MAX_ENUM_LEN: usize = 4;

/// Table of every trajectory of length `1..=max_len` from a tiny random
/// policy over `vocab` tokens, prompted by token 0.
///
/// The prior picks a length uniformly and then the tokens from the policy,
/// so it sums to one. `P_s` is the bounded PRG weight with the last token as
/// the answer and each earlier token as one reasoning step; length-one
/// trajectories have no reasoning and get weight zero.
pub fn enumerate_policy_table<S: Scalar>(
    vocab: usize,
    max_len: usize,
    seed: u64,
    weight: &WeightConfig,
) -> Result<TrajectoryTable<S>> {
    if !(2..=MAX_ENUM_VOCAB).contains(&vocab) {
        return Err(invalid(format!("vocabulary size {vocab} outside 2..={MAX_ENUM_VOCAB}")));
    }
    if !(1..=MAX_ENUM_LEN).contains(&max_len) {
        return Err(invalid(format!("length bound {max_len} outside 1..={MAX_ENUM_LEN}")));
    }
    let config = ModelConfig {
        vocab_size: vocab,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_context: max_len + 1,
        d_ff: 16,
    };
    let policy = Policy::<S>::init(config, seed)?;
    let (cache, logits) = policy.prefill(&[Token(0)])?;
    let mut out = Enumeration {
        policy: &policy,
        vocab,
        max_len,
        weight,
        labels: Vec::new(),
        prior: Vec::new(),
        ps: Vec::new(),
    };
    let mut dist = Vec::new();
    softmax_into(&logits, S::one(), &mut dist);
    out.walk(&mut Vec::new(), &mut vec![dist], cache)?;
    let (labels, prior, ps) = (out.labels, out.prior, out.ps);
    TrajectoryTable::with_labels(labels, prior, ps)
}

struct Enumeration<'a, S> {
    policy: &'a Policy<S>,
    vocab: usize,
    max_len: usize,
    weight: &'a WeightConfig,
    labels: Vec<String>,
    prior: Vec<S>,
    ps: Vec<S>,
}

impl<S: Scalar> Enumeration<'_, S> {
    /// `dists[t]` is the next-token distribution after `path[..t]`.
    fn walk(
        &mut self,
        path: &mut Vec<usize>,
        dists: &mut Vec<Vec<S>>,
        cache: crate::policy::KvCache<S>,
    ) -> Result<()> {
        let lengths = S::lit(self.max_len as f64);
        for tok in 0..self.vocab {
            path.push(tok);
            let prob: S = path.iter().zip(dists.iter()).fold(S::one(), |acc, (&o, d)| acc * d[o]);
            let ps = if path.len() == 1 {
                S::zero()
            } else {
                let levels: Vec<S> = dists.iter().map(|d| d[tok].max(S::lit(1e-300)).ln()).collect();
                prg_weight(prg_from_logprobs(&levels)?, self.weight)
            };
            self.labels
                .push(path.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "));
            self.prior.push(prob / lengths);
            self.ps.push(ps);
            if path.len() < self.max_len {
                let mut next = cache.clone();
                let logits = self.policy.advance(&mut next, Token(tok as u32))?;
                let mut d = Vec::new();
                softmax_into(&logits, S::one(), &mut d);
                dists.push(d);
                self.walk(path, dists, next)?;
                dists.pop();
            }
            path.pop();
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TableRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trajectories: Option<Vec<String>>,
    prior: Vec<f64>,
    ps: Vec<f64>,
}

/// A table read from a file, with its optional name and line number.
pub struct NamedTable<S> {
    pub line: usize,
    pub name: Option<String>,
    pub table: TrajectoryTable<S>,
}

pub fn read_tables<S: Scalar, R: BufRead>(input: R) -> Result<Vec<NamedTable<S>>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::Malformed { line: i + 1, reason };
        let rec: TableRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let prior = rec.prior.into_iter().map(S::lit).collect();
        let ps = rec.ps.into_iter().map(S::lit).collect();
        let table = match rec.trajectories {
            Some(labels) => TrajectoryTable::with_labels(labels, prior, ps),
            None => TrajectoryTable::new(prior, ps),
        }
        .map_err(|e| malformed(e.to_string()))?;
        out.push(NamedTable {
            line: i + 1,
            name: rec.name,
            table,
        });
    }
    Ok(out)
}

pub fn write_table<S: Scalar, W: Write>(mut out: W, table: &TrajectoryTable<S>, name: Option<&str>) -> Result<()> {
    let rec = TableRecord {
        name: name.map(str::to_string),
        trajectories: Some(table.trajectories.clone()),
        prior: table.prior.iter().map(|p| p.as_f64()).collect(),
        ps: table.ps.iter().map(|p| p.as_f64()).collect(),
    };
    serde_json::to_writer(&mut out, &rec)?;
    out.write_all(b"\n")?;
    Ok(())
}

const BUNDLED: &str = include_str!("../fixtures/oracle_tables.jsonl");

/// The fixture tables shipped with the crate.
pub fn bundled_tables<S: Scalar>() -> Result<Vec<NamedTable<S>>> {
    read_tables(BUNDLED.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> TrajectoryTable<f64> {
        TrajectoryTable::new(vec![0.4, 0.3, 0.2, 0.1], vec![0.5, 0.25, 0.0, 0.25]).unwrap()
    }

    #[test]
    fn four_trajectory_fixture() {
        let e = exact_posterior_entropy(&fixture()).unwrap();
        assert!((e.k - 1.0 / 0.3).abs() < 1e-12);
        for (got, want) in e.posterior.iter().zip([2.0 / 3.0, 0.25, 0.0, 1.0 / 12.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((e.entropy - 0.823960).abs() < 1e-6);
        let d = surrogate_decomposition(&fixture()).unwrap();
        assert!((d.term_main + d.term_pslogps + d.term_logk - 0.823960).abs() < 1e-6);
        assert!(d.residual < 1e-10);
    }

    #[test]
    fn constant_weight_keeps_the_prior() {
        let prior: Vec<f64> = vec![0.5, 0.25, 0.125, 0.125];
        let t = TrajectoryTable::new(prior.clone(), vec![0.7; 4]).unwrap();
        let e = exact_posterior_entropy(&t).unwrap();
        let h: f64 = -prior.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((e.entropy - h).abs() < 1e-12);
        let u = TrajectoryTable::new(vec![0.25; 4], vec![0.3; 4]).unwrap();
        assert!((exact_posterior_entropy(&u).unwrap().entropy - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_weight_is_deterministic() {
        let t = TrajectoryTable::new(vec![0.5, 0.3, 0.2], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(exact_posterior_entropy(&t).unwrap().entropy, 0.0);
    }

    #[test]
    fn indicator_weights_drop_no_pslogps() {
        let t = TrajectoryTable::new(vec![0.1, 0.2, 0.3, 0.4], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(surrogate_decomposition(&t).unwrap().term_pslogps, 0.0);
    }

    #[test]
    fn invalid_tables_are_rejected() {
        assert!(TrajectoryTable::new(vec![0.5, 0.4], vec![0.5, 0.5]).is_err());
        assert!(TrajectoryTable::new(vec![0.5, 0.5], vec![1.5, 0.5]).is_err());
        assert!(matches!(
            TrajectoryTable::new(vec![0.5, 0.5], vec![0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            exact_posterior_entropy(&TrajectoryTable {
                trajectories: vec!["a".into(), "b".into()],
                prior: vec![1.0, 0.0],
                ps: vec![0.0, 1.0],
            }),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn random_tables_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for size in [1, 2, 17, 64] {
            random_table::<f64>(&mut rng, size).unwrap();
            random_table::<f32>(&mut rng, size).unwrap();
        }
    }

    #[test]
    fn enumeration_counts_and_normalizes() {
        let t = enumerate_policy_table::<f64>(3, 2, 1, &WeightConfig::default()).unwrap();
        assert_eq!(t.len(), 12);
        assert!((t.prior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(t.ps[..1].iter().all(|&w| w == 0.0));
        assert!(enumerate_policy_table::<f64>(9, 2, 1, &WeightConfig::default()).is_err());
        assert!(enumerate_policy_table::<f64>(3, 5, 1, &WeightConfig::default()).is_err());
    }

    #[test]
    fn bundled_fixtures_parse() {
        let tables = bundled_tables::<f64>().unwrap();
        assert_eq!(tables[0].name.as_deref(), Some("four-trajectory"));
        let mut buf = Vec::new();
        write_table(&mut buf, &tables[0].table, Some("x")).unwrap();
        let back = read_tables::<f64, _>(buf.as_slice()).unwrap();
        assert_eq!(back[0].table, tables[0].table);
    }
}
