//! End-to-end training for multi-stage top-k cascade ranking.
//!
//! The centerpiece is the LCRON loss family: differentiable-sorting-based
//! surrogates that optimize the joint survival probability of ground-truth
//! items through every stage of a ranking funnel, plus a per-stage auxiliary
//! loss and uncertainty-weighted fusion. Around it sit BCE and pairwise
//! RankNet baselines, toy two-tower / MLP scorers with manual backprop and
//! Adam, a synthetic cascade-log generator, hard-cascade evaluation metrics,
//! an exact-enumeration survival oracle with bound-gap diagnostics, and a
//! CLI experiment harness.
//!
//! Modules:
//! - [`numerics`]: dense f64 vector/matrix, stable softmax, gradient checking
//! - [`diffsort`]: NeuralSort / SoftSort soft permutations and pullbacks
//! - [`losses`]: survival surrogates, auxiliary and baseline losses
//! - [`sampling`]: full-stage sample construction and the synthetic generator
//! - [`models`]: two-tower and MLP scorers, manual backprop, Adam
//! - [`cascade_eval`]: hard cascade filtering, Recall@K@m, NDCG@k, bound gaps
//! - [`harness`]: experiment configs, training loops, evaluation, reports

pub mod cascade_eval;
pub mod diffsort;
pub mod error;
pub mod harness;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod sampling;

pub use error::{Error, Result};
