//! Accuracy, invalid ratio, semantic-entropy confidence, tercile binning
//! and the pairwise confidence-faithfulness statistic.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::certainty::self_certainty;
use crate::corpus::SupervisedExample;
use crate::error::{invalid, Error, Result};
use crate::policy::{decode_greedy, sample_rollouts, Policy, SamplingConfig, Snapshot};
use crate::scalar::Scalar;
use crate::vocab::{canonical_answer, prompt, AnswerGrammar, Token, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub extracted_answer: Option<String>,
    pub gold_answer: String,
    pub correct: bool,
    pub confidence: f64,
    pub n_samples_used: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputScores {
    pub accuracy: f64,
    pub invalid_ratio: f64,
    pub records: Vec<EvalRecord>,
}

/// Scores `(id, generated tokens)` pairs against canonical gold answers.
/// Confidence is left at zero.
pub fn evaluate_outputs(
    outputs: &[(String, Vec<Token>)],
    golds: &[String],
    grammar: &AnswerGrammar,
) -> Result<OutputScores> {
    if outputs.len() != golds.len() {
        return Err(invalid(format!(
            "{} outputs but {} gold answers",
            outputs.len(),
            golds.len()
        )));
    }
    if outputs.is_empty() {
        return Err(invalid("nothing to evaluate"));
    }
    let records: Vec<EvalRecord> = outputs
        .iter()
        .zip(golds)
        .map(|((id, tokens), gold)| {
            let extracted = grammar.extract(tokens).map(|v| canonical_answer(&v));
            EvalRecord {
                id: id.clone(),
                correct: extracted.as_deref() == Some(gold.as_str()),
                extracted_answer: extracted,
                gold_answer: gold.clone(),
                confidence: 0.0,
                n_samples_used: 0,
            }
        })
        .collect();
    let n = records.len() as f64;
    Ok(OutputScores {
        accuracy: records.iter().filter(|r| r.correct).count() as f64 / n,
        invalid_ratio: records.iter().filter(|r| r.extracted_answer.is_none()).count() as f64 / n,
        records,
    })
}

/// Entropy of the answer clusters; missing answers share one cluster.
pub fn answer_entropy(answers: &[Option<String>]) -> Result<f64> {
    if answers.is_empty() {
        return Err(invalid("no answers to cluster"));
    }
    let mut clusters: HashMap<Option<&str>, usize> = HashMap::new();
    for a in answers {
        *clusters.entry(a.as_deref()).or_default() += 1;
    }
    let n = answers.len() as f64;
    let mut counts: Vec<usize> = clusters.into_values().collect();
    // Summation order fixed so the result does not depend on hashing.
    counts.sort_unstable();
    Ok(-counts
        .iter()
        .map(|&c| {
            let q = c as f64 / n;
            q * q.ln()
        })
        .sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemanticEntropy {
    pub entropy: f64,
    pub confidence: f64,
}

/// Samples `n` completions of `prompt` and measures the spread of their answers.
pub fn semantic_entropy<S: Scalar>(
    policy: &Policy<S>,
    prompt: &[Token],
    n: usize,
    temperature: f64,
    max_len: usize,
    seed: u64,
    grammar: &AnswerGrammar,
) -> Result<SemanticEntropy> {
    if n < 2 {
        return Err(invalid("semantic entropy needs at least two samples"));
    }
    let snap = Snapshot::of(policy, 0);
    let cfg = SamplingConfig {
        group_size: n,
        temperature: S::lit(temperature),
        max_len,
        eos: EOS,
    };
    let group = sample_rollouts(&snap, prompt, &cfg, seed)?;
    let answers: Vec<Option<String>> = group
        .rollouts
        .iter()
        .map(|r| grammar.extract(&r.tokens).map(|v| canonical_answer(&v)))
        .collect();
    let entropy = answer_entropy(&answers)?;
    Ok(SemanticEntropy {
        entropy,
        confidence: -entropy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub count: usize,
    pub accuracy: f64,
    pub min_confidence: f64,
    pub max_confidence: f64,
}

/// Low, mid and high confidence terciles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub low: Bin,
    pub mid: Bin,
    pub high: Bin,
}

impl BinReport {
    pub fn bins(&self) -> [&Bin; 3] {
        [&self.low, &self.mid, &self.high]
    }
}

/// Sorts by `(confidence, id)` and cuts into three bins, the remainder
/// going to the lower bins.
pub fn confidence_bins(records: &[EvalRecord]) -> Result<BinReport> {
    if records.len() < 3 {
        return Err(invalid(format!(
            "binning needs at least 3 records, got {}",
            records.len()
        )));
    }
    if let Some(r) = records.iter().find(|r| !r.confidence.is_finite()) {
        return Err(Error::NonFinite(format!("confidence of {}", r.id)));
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.confidence
            .total_cmp(&b.confidence)
            .then_with(|| a.id.cmp(&b.id))
    });
    let n = sorted.len();
    let sizes: Vec<usize> = (0..3).map(|i| n / 3 + usize::from(i < n % 3)).collect();
    let mut start = 0;
    let mut bins = Vec::with_capacity(3);
    for size in sizes {
        let members = &sorted[start..start + size];
        start += size;
        bins.push(Bin {
            count: size,
            accuracy: members.iter().filter(|r| r.correct).count() as f64 / size as f64,
            min_confidence: members[0].confidence,
            max_confidence: members[size - 1].confidence,
        });
    }
    let high = bins.pop().unwrap();
    let mid = bins.pop().unwrap();
    let low = bins.pop().unwrap();
    Ok(BinReport { low, mid, high })
}

/// Share of (correct, incorrect) pairs where the correct one is more
/// confident; ties count one half.
pub fn faithfulness_auroc(records: &[EvalRecord]) -> Result<f64> {
    let pos: Vec<f64> = records.iter().filter(|r| r.correct).map(|r| r.confidence).collect();
    let neg: Vec<f64> = records.iter().filter(|r| !r.correct).map(|r| r.confidence).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Degenerate(format!(
            "{} correct and {} incorrect records; both are needed",
            pos.len(),
            neg.len()
        )));
    }
    let mut won = 0.0;
    for &c in &pos {
        for &i in &neg {
            if c > i {
                won += 1.0;
            } else if c == i {
                won += 0.5;
            }
        }
    }
    Ok(won / (pos.len() * neg.len()) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConfidenceMetric {
    #[default]
    SemanticEntropy,
    SelfCertainty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub metric: ConfidenceMetric,
    pub n_samples: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: ConfidenceMetric::SemanticEntropy,
            n_samples: 8,
            temperature: 1.0,
            max_len: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub invalid_ratio: f64,
    /// Absent when every record is correct or every record is wrong.
    pub auroc: Option<f64>,
    /// Absent with fewer than three records.
    pub bins: Option<BinReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metric: ConfidenceMetric,
    pub records: Vec<EvalRecord>,
    pub summary: EvalSummary,
}

/// Greedy answers for accuracy, plus the configured confidence per item.
pub fn evaluate_policy<S: Scalar>(
    policy: &Policy<S>,
    examples: &[SupervisedExample],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let grammar = AnswerGrammar::default();
    let mut outputs = Vec::with_capacity(examples.len());
    let mut golds = Vec::with_capacity(examples.len());
    let mut confidences = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let p = prompt(&ex.query);
        let greedy = decode_greedy(policy, &p, cfg.max_len, EOS)?;
        let gold = ex
            .gold_value(&grammar)
            .ok_or_else(|| invalid(format!("example {} has no gold answer", ex.id)))?;
        golds.push(canonical_answer(&gold));
        confidences.push(match cfg.metric {
            ConfidenceMetric::SemanticEntropy => {
                let seed = cfg.seed.wrapping_add(i as u64);
                let se = semantic_entropy(policy, &p, cfg.n_samples, cfg.temperature, cfg.max_len, seed, &grammar)?;
                (se.confidence, cfg.n_samples)
            }
            ConfidenceMetric::SelfCertainty => (self_certainty(&greedy)?.as_f64(), 1),
        });
        outputs.push((ex.id.clone(), greedy.tokens));
    }
    let mut scored = evaluate_outputs(&outputs, &golds, &grammar)?;
    for (r, (c, n)) in scored.records.iter_mut().zip(confidences) {
        r.confidence = c;
        r.n_samples_used = n;
    }
    let summary = EvalSummary {
        accuracy: scored.accuracy,
        invalid_ratio: scored.invalid_ratio,
        auroc: faithfulness_auroc(&scored.records).ok(),
        bins: confidence_bins(&scored.records).ok(),
    };
    Ok(EvalReport {
        metric: cfg.metric,
        records: scored.records,
        summary,
    })
}

#[derive(Serialize)]
struct ReportHeader<'a> {
    confidence_metric: ConfidenceMetric,
    invalid_outputs: &'a str,
}

/// Header row, one row per record, then a summary row.
pub fn write_report<W: Write>(mut out: W, report: &EvalReport) -> Result<()> {
    let header = ReportHeader {
        confidence_metric: report.metric,
        invalid_outputs: "included in binning with their measured confidence and counted incorrect",
    };
    serde_json::to_writer(&mut out, &serde_json::json!({ "header": header }))?;
    out.write_all(b"\n")?;
    for r in &report.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    serde_json::to_writer(&mut out, &serde_json::json!({ "summary": report.summary }))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
