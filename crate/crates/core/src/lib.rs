//! Hybrid post-training laboratory.
//!
//! A tiny decoder policy is trained on a synthetic chained modular-arithmetic
//! task with reasoning distillation, self-certainty-rewarded group policy
//! optimization, and a PRG-weighted mix of the two. Numeric code is generic
//! over [`Scalar`]; the aliases below fix it to `f64` or `f32`.

// Validation uses `!(x > 0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certainty;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod oracle;
pub mod policy;
pub mod scalar;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type PolicyF64 = policy::Policy<f64>;
pub type PolicyF32 = policy::Policy<f32>;
pub type SnapshotF64 = policy::Snapshot<f64>;
pub type RolloutF64 = policy::Rollout<f64>;
pub type RolloutGroupF64 = policy::RolloutGroup<f64>;
pub type CertaintyReportF64 = certainty::CertaintyReport<f64>;
pub type LossBreakdownF64 = objectives::LossBreakdown<f64>;
pub type TrajectoryTableF64 = oracle::TrajectoryTable<f64>;
pub type TrajectoryTableF32 = oracle::TrajectoryTable<f32>;
