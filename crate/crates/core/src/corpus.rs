//! Synthetic chained modular-arithmetic task, supervised/dummy/unsupervised
//! corpora and their JSONL encodings.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::vocab::{count_transitional_tokens, AnswerGrammar, Lexicon, Token, Vocab, EOS, STEP};

/// Every value in the task lives in `0..MODULUS`.
pub const MODULUS: u32 = 10;
pub const MAX_DIFFICULTY: usize = 8;
pub const DEFAULT_DUMMY_FRACTION: f64 = 0.05;
pub const DEFAULT_PRUNE_THRESHOLD: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add(u32),
    Sub(u32),
    Mul(u32),
}

impl Op {
    pub fn apply(self, value: u32) -> u32 {
        match self {
            Op::Add(x) => (value + x) % MODULUS,
            Op::Sub(x) => (value + MODULUS - x % MODULUS) % MODULUS,
            Op::Mul(x) => (value * x) % MODULUS,
        }
    }

    fn word(self) -> &'static str {
        match self {
            Op::Add(_) => "add",
            Op::Sub(_) => "sub",
            Op::Mul(_) => "mul",
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Op::Add(_) => "+",
            Op::Sub(_) => "-",
            Op::Mul(_) => "*",
        }
    }

    fn operand(self) -> u32 {
        match self {
            Op::Add(x) | Op::Sub(x) | Op::Mul(x) => x,
        }
    }
}

/// One instance: a start value and a chain of operations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArithmeticTask {
    pub start: u32,
    pub ops: Vec<Op>,
}

impl ArithmeticTask {
    pub fn query_text(&self) -> String {
        let mut s = format!("start {}", self.start);
        for op in &self.ops {
            s.push_str(&format!("; {} {}", op.word(), op.operand()));
        }
        s.push_str(&format!(" (mod {MODULUS})"));
        s
    }

    /// One `a<op>b=c` line per operation.
    pub fn step_texts(&self) -> Vec<String> {
        let mut value = self.start;
        self.ops
            .iter()
            .map(|&op| {
                let next = op.apply(value);
                let line = format!("{value}{}{}={next}", op.symbol(), op.operand());
                value = next;
                line
            })
            .collect()
    }

    pub fn answer(&self) -> u32 {
        self.ops.iter().fold(self.start, |v, &op| op.apply(v))
    }

    pub fn to_example(&self, id: String) -> SupervisedExample {
        let vocab = Vocab::standard();
        let enc = |s: &str| vocab.encode(s).expect("task text uses the standard vocabulary");
        SupervisedExample {
            id,
            query: enc(&self.query_text()),
            reasoning: self.step_texts().iter().map(|s| enc(s)).collect(),
            answer: enc(&format!("Answer : {}", self.answer())),
        }
    }
}

/// A query with its teacher reasoning trace and gold answer span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupervisedExample {
    pub id: String,
    pub query: Vec<Token>,
    pub reasoning: Vec<Vec<Token>>,
    /// Full answer span, `Answer : <value>`.
    pub answer: Vec<Token>,
}

impl SupervisedExample {
    /// Teacher sequence: each step followed by `<step>`, then the answer and `<eos>`.
    pub fn teacher_sequence(&self) -> Vec<Token> {
        let mut s = Vec::new();
        for step in &self.reasoning {
            s.extend_from_slice(step);
            s.push(STEP);
        }
        s.extend_from_slice(&self.answer);
        s.push(EOS);
        s
    }

    /// Answer-only target used by plain supervised fine-tuning.
    pub fn answer_sequence(&self) -> Vec<Token> {
        let mut s = self.answer.clone();
        s.push(EOS);
        s
    }

    pub fn gold_value(&self, grammar: &AnswerGrammar) -> Option<Vec<Token>> {
        grammar.extract(&self.answer)
    }

    pub fn transitional_count(&self, lexicon: &Lexicon) -> usize {
        self.reasoning
            .iter()
            .map(|s| count_transitional_tokens(s, lexicon))
            .sum()
    }

    pub fn validate(&self, grammar: &AnswerGrammar) -> Result<()> {
        if self.reasoning.is_empty() || self.reasoning.iter().any(Vec::is_empty) {
            return Err(invalid(format!("{}: reasoning needs non-empty steps", self.id)));
        }
        if self.gold_value(grammar).is_none() {
            return Err(invalid(format!("{}: answer does not parse", self.id)));
        }
        Ok(())
    }
}

/// An unlabeled query paired with a random pseudo target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DummyExample {
    pub id: String,
    pub query: Vec<Token>,
    pub pseudo_target: Vec<Token>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnsupervisedQuery {
    pub id: String,
    pub query: Vec<Token>,
}

/// Supervised, dummy and unsupervised pools feeding the hybrid objective.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusBundle {
    pub supervised: Vec<SupervisedExample>,
    pub dummy: Vec<DummyExample>,
    pub unsupervised: Vec<UnsupervisedQuery>,
}

impl CorpusBundle {
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let ids = self
            .supervised
            .iter()
            .map(|e| &e.id)
            .chain(self.dummy.iter().map(|e| &e.id))
            .chain(self.unsupervised.iter().map(|e| &e.id));
        for id in ids {
            if !seen.insert(id.as_str()) {
                return Err(invalid(format!("duplicate corpus id {id}")));
            }
        }
        Ok(())
    }
}

fn validate_difficulty(difficulty: &RangeInclusive<usize>) -> Result<()> {
    let (lo, hi) = (*difficulty.start(), *difficulty.end());
    if lo < 1 || hi > MAX_DIFFICULTY || lo > hi {
        return Err(invalid(format!(
            "difficulty range {lo}..={hi} must lie within 1..={MAX_DIFFICULTY} and be non-empty"
        )));
    }
    Ok(())
}

/// Draws `n` tasks; operands are in `1..=9`.
pub fn generate_tasks(
    seed: u64,
    n: usize,
    difficulty: RangeInclusive<usize>,
) -> Result<Vec<ArithmeticTask>> {
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    validate_difficulty(&difficulty)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let k = rng.gen_range(difficulty.clone());
            let start = rng.gen_range(0..MODULUS);
            let ops = (0..k)
                .map(|_| {
                    let x = rng.gen_range(1..MODULUS);
                    match rng.gen_range(0..3) {
                        0 => Op::Add(x),
                        1 => Op::Sub(x),
                        _ => Op::Mul(x),
                    }
                })
                .collect();
            ArithmeticTask { start, ops }
        })
        .collect())
}

pub fn generate_synthetic_tasks(
    seed: u64,
    n: usize,
    difficulty: RangeInclusive<usize>,
) -> Result<Vec<SupervisedExample>> {
    Ok(generate_tasks(seed, n, difficulty)?
        .iter()
        .enumerate()
        .map(|(i, t)| t.to_example(format!("sup-{seed}-{i}")))
        .collect())
}

/// Keeps examples whose reasoning has at most `threshold` transitional words.
pub fn prune_underconfident(
    examples: Vec<SupervisedExample>,
    threshold: usize,
    lexicon: &Lexicon,
) -> Vec<SupervisedExample> {
    examples
        .into_iter()
        .filter(|e| e.transitional_count(lexicon) <= threshold)
        .collect()
}

/// Empirical distribution over pseudo-target lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LengthModel {
    lengths: Vec<usize>,
}

impl LengthModel {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(invalid("length model needs positive lengths"));
        }
        Ok(Self { lengths })
    }

    /// Reasoning-plus-answer lengths of a supervised corpus.
    pub fn from_supervised(examples: &[SupervisedExample]) -> Result<Self> {
        Self::new(
            examples
                .iter()
                .map(|e| e.teacher_sequence().len() - 1)
                .collect(),
        )
    }

    pub fn sample(&self, rng: &mut impl Rng, max_len: usize) -> usize {
        self.lengths[rng.gen_range(0..self.lengths.len())].clamp(1, max_len.max(1))
    }
}

/// Samples `round(fraction * |pool|)` queries without replacement and pairs
/// each with uniformly random content tokens.
pub fn build_dummy_corpus(
    unlabeled: &[UnsupervisedQuery],
    fraction: f64,
    seed: u64,
    length_model: &LengthModel,
    max_completion_len: usize,
) -> Result<Vec<DummyExample>> {
    if unlabeled.is_empty() {
        return Err(invalid("unlabeled pool is empty"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let count = dummy_count(unlabeled.len(), fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample_indices(&mut rng, unlabeled.len(), count).into_vec();
    chosen.sort_unstable();
    let alphabet = Vocab::standard().content_tokens();
    Ok(chosen
        .into_iter()
        .map(|i| {
            let len = length_model.sample(&mut rng, max_completion_len);
            let pseudo_target = (0..len)
                .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
                .collect();
            DummyExample {
                id: format!("dummy-{}", unlabeled[i].id),
                query: unlabeled[i].query.clone(),
                pseudo_target,
                seed,
            }
        })
        .collect())
}

pub fn dummy_count(pool: usize, fraction: f64) -> usize {
    ((fraction * pool as f64).round() as usize).min(pool)
}

/// Each item repeated `group_size` times consecutively.
pub fn repeat_for_rollouts<T: Clone>(batch: &[T], group_size: usize) -> Vec<T> {
    assert!(group_size >= 1, "group size must be at least 1");
    batch
        .iter()
        .flat_map(|item| std::iter::repeat_n(item, group_size).cloned())
        .collect()
}

/// Sizes for [`build_bundle`].
#[derive(Clone, Debug, PartialEq)]
pub struct BundleSpec {
    pub seed: u64,
    pub supervised: usize,
    pub unsupervised: usize,
    pub probe: usize,
    pub difficulty: RangeInclusive<usize>,
    pub dummy_fraction: f64,
    pub max_completion_len: usize,
}

impl Default for BundleSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            supervised: 100,
            unsupervised: 1000,
            probe: 64,
            difficulty: 1..=3,
            dummy_fraction: DEFAULT_DUMMY_FRACTION,
            max_completion_len: 128,
        }
    }
}

/// Builds the three training pools plus a held-out probe set whose queries
/// never occur in the supervised pool.
pub fn build_bundle(plan: &BundleSpec) -> Result<(CorpusBundle, Vec<SupervisedExample>)> {
    let supervised = generate_synthetic_tasks(plan.seed, plan.supervised, plan.difficulty.clone())?;
    let unsup_seed = plan.seed.wrapping_add(0x5eed_0001);
    let unsupervised: Vec<UnsupervisedQuery> =
        generate_tasks(unsup_seed, plan.unsupervised, plan.difficulty.clone())?
            .iter()
            .enumerate()
            .map(|(i, t)| UnsupervisedQuery {
                id: format!("unsup-{}-{i}", plan.seed),
                query: t.to_example(String::new()).query,
            })
            .collect();
    let length_model = LengthModel::from_supervised(&supervised)?;
    let dummy = build_dummy_corpus(
        &unsupervised,
        plan.dummy_fraction,
        plan.seed.wrapping_add(0x5eed_0002),
        &length_model,
        plan.max_completion_len,
    )?;
    let seen: HashSet<&[Token]> = supervised.iter().map(|e| e.query.as_slice()).collect();
    let mut probe = Vec::with_capacity(plan.probe);
    let mut probe_seed = plan.seed.wrapping_add(0x5eed_0003);
    // Short tasks collide often; keep drawing until enough unseen queries exist.
    for _ in 0..64 {
        if probe.len() >= plan.probe {
            break;
        }
        for (i, task) in generate_tasks(probe_seed, plan.probe.max(1) * 4, plan.difficulty.clone())?
            .into_iter()
            .enumerate()
        {
            if probe.len() >= plan.probe {
                break;
            }
            let ex = task.to_example(format!("probe-{}-{probe_seed}-{i}", plan.seed));
            if !seen.contains(ex.query.as_slice()) {
                probe.push(ex);
            }
        }
        probe_seed = probe_seed.wrapping_add(1);
    }
    let bundle = CorpusBundle {
        supervised,
        dummy,
        unsupervised,
    };
    bundle.check_disjoint()?;
    Ok((bundle, probe))
}

// ---- JSONL records ----

#[derive(Serialize, Deserialize)]
struct SupervisedRecord {
    id: String,
    query: String,
    reasoning: Vec<String>,
    answer: String,
}

#[derive(Serialize, Deserialize)]
struct DummyRecord {
    id: String,
    query: String,
    pseudo_target: String,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct UnsupervisedRecord {
    id: String,
    query: String,
}

fn write_jsonl<W: Write, R: Serialize>(mut out: W, rows: impl Iterator<Item = R>) -> Result<()> {
    for row in rows {
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_jsonl<R: BufRead, T: for<'de> Deserialize<'de>>(input: R) -> Result<Vec<(usize, T)>> {
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?;
        rows.push((i + 1, row));
    }
    Ok(rows)
}

fn encode_at(line: usize, text: &str) -> Result<Vec<Token>> {
    Vocab::standard().encode(text).map_err(|e| Error::Malformed {
        line,
        reason: e.to_string(),
    })
}

pub fn write_supervised<W: Write>(out: W, examples: &[SupervisedExample]) -> Result<()> {
    let v = Vocab::standard();
    write_jsonl(
        out,
        examples.iter().map(|e| SupervisedRecord {
            id: e.id.clone(),
            query: v.decode(&e.query),
            reasoning: e.reasoning.iter().map(|s| v.decode(s)).collect(),
            answer: v.decode(&e.answer),
        }),
    )
}

pub fn read_supervised<R: BufRead>(input: R) -> Result<Vec<SupervisedExample>> {
    let grammar = AnswerGrammar::default();
    read_jsonl::<_, SupervisedRecord>(input)?
        .into_iter()
        .map(|(line, r)| {
            let ex = SupervisedExample {
                id: r.id,
                query: encode_at(line, &r.query)?,
                reasoning: r
                    .reasoning
                    .iter()
                    .map(|s| encode_at(line, s))
                    .collect::<Result<_>>()?,
                answer: encode_at(line, &r.answer)?,
            };
            ex.validate(&grammar).map_err(|e| Error::Malformed {
                line,
                reason: e.to_string(),
            })?;
            Ok(ex)
        })
        .collect()
}

pub fn write_dummy<W: Write>(out: W, examples: &[DummyExample]) -> Result<()> {
    let v = Vocab::standard();
    write_jsonl(
        out,
        examples.iter().map(|e| DummyRecord {
            id: e.id.clone(),
            query: v.decode(&e.query),
            pseudo_target: v.decode(&e.pseudo_target),
            seed: e.seed,
        }),
    )
}

pub fn read_dummy<R: BufRead>(input: R) -> Result<Vec<DummyExample>> {
    read_jsonl::<_, DummyRecord>(input)?
        .into_iter()
        .map(|(line, r)| {
            Ok(DummyExample {
                id: r.id,
                query: encode_at(line, &r.query)?,
                pseudo_target: encode_at(line, &r.pseudo_target)?,
                seed: r.seed,
            })
        })
        .collect()
}

pub fn write_unsupervised<W: Write>(out: W, queries: &[UnsupervisedQuery]) -> Result<()> {
    let v = Vocab::standard();
    write_jsonl(
        out,
        queries.iter().map(|q| UnsupervisedRecord {
            id: q.id.clone(),
            query: v.decode(&q.query),
        }),
    )
}

pub fn read_unsupervised<R: BufRead>(input: R) -> Result<Vec<UnsupervisedQuery>> {
    read_jsonl::<_, UnsupervisedRecord>(input)?
        .into_iter()
        .map(|(line, r)| {
            Ok(UnsupervisedQuery {
                id: r.id,
                query: encode_at(line, &r.query)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex_with_transitions(n: usize) -> SupervisedExample {
        let v = Vocab::standard();
        let mut step = v.encode("3+4=7").unwrap();
        step.extend(std::iter::repeat_n(v.token("Wait").unwrap(), n));
        SupervisedExample {
            id: format!("t{n}"),
            query: v.encode("start 3; add 4 (mod 10)").unwrap(),
            reasoning: vec![step],
            answer: v.encode("Answer : 7").unwrap(),
        }
    }

    #[test]
    fn single_step_task_renders_as_expected() {
        let task = ArithmeticTask {
            start: 3,
            ops: vec![Op::Add(4)],
        };
        assert_eq!(task.query_text(), "start 3; add 4 (mod 10)");
        assert_eq!(task.step_texts(), vec!["3+4=7"]);
        let ex = task.to_example("x".into());
        assert_eq!(Vocab::standard().decode(&ex.answer), "Answer : 7");
    }

    #[test]
    fn generated_examples_have_requested_shape() {
        let exs = generate_synthetic_tasks(7, 1, 1..=1).unwrap();
        assert_eq!(exs.len(), 1);
        assert_eq!(exs[0].reasoning.len(), 1);
        exs[0].validate(&AnswerGrammar::default()).unwrap();
    }

    #[test]
    fn invalid_difficulty_is_rejected() {
        assert!(generate_synthetic_tasks(1, 5, 0..=2).is_err());
        assert!(generate_synthetic_tasks(1, 5, 2..=9).is_err());
        #[allow(clippy::reversed_empty_ranges)]
        let r = 4..=2;
        assert!(generate_synthetic_tasks(1, 5, r).is_err());
        assert!(generate_synthetic_tasks(1, 0, 1..=2).is_err());
    }

    #[test]
    fn sub_wraps_around() {
        assert_eq!(Op::Sub(4).apply(3), 9);
        assert_eq!(Op::Mul(4).apply(3), 2);
    }

    #[test]
    fn pruning_boundary_is_inclusive() {
        let lex = Lexicon::default();
        let kept = prune_underconfident(
            vec![ex_with_transitions(11), ex_with_transitions(10), ex_with_transitions(0)],
            10,
            &lex,
        );
        let ids: Vec<_> = kept.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["t10", "t0"]);
        let kept = prune_underconfident(vec![ex_with_transitions(0)], 0, &lex);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn dummy_corpus_sizes_and_determinism() {
        let pool: Vec<_> = (0..100)
            .map(|i| UnsupervisedQuery {
                id: format!("u{i}"),
                query: vec![Vocab::standard().digit(i % 10)],
            })
            .collect();
        let lm = LengthModel::new(vec![3, 5, 8]).unwrap();
        let a = build_dummy_corpus(&pool, 0.05, 9, &lm, 128).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, build_dummy_corpus(&pool, 0.05, 9, &lm, 128).unwrap());
        assert_eq!(build_dummy_corpus(&pool, 1.0, 9, &lm, 128).unwrap().len(), 100);
        for d in &a {
            assert!((1..=8).contains(&d.pseudo_target.len()));
        }
        assert!(build_dummy_corpus(&[], 0.05, 9, &lm, 128).is_err());
        assert!(build_dummy_corpus(&pool, 0.0, 9, &lm, 128).is_err());
    }

    #[test]
    fn repeat_keeps_blocks_in_order() {
        let out = repeat_for_rollouts(&["a", "b"], 8);
        assert_eq!(out.len(), 16);
        assert!(out[..8].iter().all(|&x| x == "a"));
        assert!(out[8..].iter().all(|&x| x == "b"));
        assert_eq!(repeat_for_rollouts(&[1, 2, 3], 1), vec![1, 2, 3]);
    }

    #[test]
    fn bundle_is_disjoint_and_probe_is_held_out() {
        let plan = BundleSpec {
            supervised: 40,
            unsupervised: 100,
            probe: 20,
            ..BundleSpec::default()
        };
        let (bundle, probe) = build_bundle(&plan).unwrap();
        assert_eq!(bundle.dummy.len(), 5);
        assert_eq!(probe.len(), 20);
        for p in &probe {
            assert!(bundle.supervised.iter().all(|s| s.query != p.query));
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let exs = generate_synthetic_tasks(3, 4, 1..=3).unwrap();
        let mut buf = Vec::new();
        write_supervised(&mut buf, &exs).unwrap();
        assert_eq!(read_supervised(buf.as_slice()).unwrap(), exs);
    }

    #[test]
    fn malformed_jsonl_names_the_line() {
        let text = "{\"id\":\"a\",\"query\":\"start 1\"}\n{oops\n";
        match read_unsupervised(text.as_bytes()) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }
}
