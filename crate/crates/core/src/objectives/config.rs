use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::certainty::{AnswerScoring, StepGranularity, WeightConfig};
use crate::error::{invalid, Error, Result};
use crate::policy::ModelConfig;

/// Which policy the KL penalty measures drift against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlReference {
    /// The frozen initial policy.
    #[default]
    Reference,
    /// The snapshot the group was sampled from.
    Old,
}

/// Group-policy-optimization hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub group_size: usize,
    pub temperature: f64,
    pub kl_reference: KlReference,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_beta: 0.005,
            group_size: 8,
            temperature: 1.0,
            kl_reference: KlReference::Reference,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(invalid(format!("clip_eps {} outside (0, 1)", self.clip_eps)));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(invalid(format!("kl_beta {} must be non-negative", self.kl_beta)));
        }
        if self.group_size < 2 {
            return Err(invalid("group_size must be at least 2"));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        Ok(())
    }
}

/// How PRG weights enter the hybrid loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// One weight, the mean over the step's rollouts, scales the whole RLIF term.
    #[default]
    BatchScalar,
    /// Each rollout's surrogate is scaled by its own weight.
    PerTrajectory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms)]
pub enum Mode {
    #[serde(rename = "HYBRID")]
    Hybrid,
    #[serde(rename = "RD_ONLY")]
    RdOnly,
    #[serde(rename = "RLIF_ONLY")]
    RlifOnly,
    #[serde(rename = "RLVR")]
    Rlvr,
    #[serde(rename = "SFT")]
    Sft,
    #[serde(rename = "EQUAL_WEIGHT")]
    EqualWeight,
    #[serde(rename = "CT_RD_THEN_RLIF")]
    CtRdThenRlif,
    #[serde(rename = "CT_RLIF_THEN_RD")]
    CtRlifThenRd,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Hybrid,
        Mode::RdOnly,
        Mode::RlifOnly,
        Mode::Rlvr,
        Mode::Sft,
        Mode::EqualWeight,
        Mode::CtRdThenRlif,
        Mode::CtRlifThenRd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Hybrid => "HYBRID",
            Mode::RdOnly => "RD_ONLY",
            Mode::RlifOnly => "RLIF_ONLY",
            Mode::Rlvr => "RLVR",
            Mode::Sft => "SFT",
            Mode::EqualWeight => "EQUAL_WEIGHT",
            Mode::CtRdThenRlif => "CT_RD_THEN_RLIF",
            Mode::CtRlifThenRd => "CT_RLIF_THEN_RD",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown mode {s}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Every knob of a training run, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub tau: f64,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub kl_reference: KlReference,
    pub group_size: usize,
    pub temperature: f64,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub switch_fraction: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Supervised/dummy items per step, before repetition over the group.
    pub sup_batch: usize,
    /// Unsupervised queries per step.
    pub unsup_batch: usize,
    pub max_len: usize,
    pub probe_size: usize,
    pub weight_mode: WeightMode,
    pub prg_granularity: StepGranularity,
    pub answer_scoring: AnswerScoring,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_context: usize,
    pub d_ff: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let rl = RlConfig::default();
        let weight = WeightConfig::default();
        let model = ModelConfig::tiny(0);
        Self {
            mode: Mode::Hybrid,
            alpha: weight.alpha,
            tau: weight.tau,
            clip_eps: rl.clip_eps,
            kl_beta: rl.kl_beta,
            kl_reference: rl.kl_reference,
            group_size: rl.group_size,
            temperature: rl.temperature,
            lr: 3e-6,
            steps: 200,
            seed: 0,
            switch_fraction: 0.5,
            optimizer: OptimizerKind::Sgd,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 0.0,
            sup_batch: 4,
            unsup_batch: 1,
            max_len: 128,
            probe_size: 32,
            weight_mode: WeightMode::BatchScalar,
            prg_granularity: StepGranularity::Segment,
            answer_scoring: AnswerScoring::Sum,
            d_model: model.d_model,
            n_layers: model.n_layers,
            n_heads: model.n_heads,
            max_context: model.max_context,
            d_ff: model.d_ff,
        }
    }
}

impl TrainConfig {
    /// Parses a TOML document over the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |span| text[..span.start].matches('\n').count() + 1);
            let source = text.lines().nth(line.saturating_sub(1)).unwrap_or("").trim();
            Error::Malformed {
                line,
                reason: format!("{} in `{source}`", e.message()),
            }
        })
    }

    /// Overrides one key with a TOML value; a bare word is taken as a string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| invalid(e.to_string()))?;
        if !table.contains_key(key) {
            return Err(invalid(format!("unknown config key {key}")));
        }
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| invalid(format!("config key {key}: {}", e.message())))?;
        Ok(())
    }

    /// Canonical TOML rendering; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn rl(&self) -> RlConfig {
        RlConfig {
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            group_size: self.group_size,
            temperature: self.temperature,
            kl_reference: self.kl_reference,
        }
    }

    pub fn weight(&self) -> WeightConfig {
        WeightConfig {
            alpha: self.alpha,
            tau: self.tau,
        }
    }

    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_context: self.max_context,
            d_ff: self.d_ff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rl().validate()?;
        self.weight().validate()?;
        if !(self.lr > 0.0) {
            return Err(invalid("config key lr: must be positive"));
        }
        if !(0.0..=1.0).contains(&self.switch_fraction) {
            return Err(invalid("config key switch_fraction: must lie in [0, 1]"));
        }
        if self.steps == 0 {
            return Err(invalid("config key steps: must be at least 1"));
        }
        if self.sup_batch == 0 || self.unsup_batch == 0 {
            return Err(invalid("config keys sup_batch/unsup_batch: must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(invalid("config key max_len: must be at least 1"));
        }
        if self.probe_size == 0 {
            return Err(invalid("config key probe_size: must be at least 1"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(invalid("config key grad_clip: must be non-negative"));
        }
        Ok(())
    }
}
