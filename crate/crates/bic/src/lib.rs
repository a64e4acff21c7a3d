//! Class-incremental learning engine with two-stage logit bias correction.
//!
//! Training proceeds in increments of new classes. Stage 1 trains a dense
//! network on the union of new data and stored old-class exemplars, mixing
//! softmax cross-entropy with a temperature-softened distillation loss
//! against the previous increment's frozen model. Stage 2 freezes the
//! network and fits a two-parameter linear correction of the new-class
//! logits on a small class-balanced validation set, countering the bias
//! introduced by the old/new data imbalance.
//!
//! The crate also ships the ablation variants (classification-only,
//! distillation-only, FC-retrain and joint-training upper bounds), an
//! exemplar store with herding selection, IDX/blob data ingestion, and a
//! reporting harness. See the `bic` binary for the experiment CLI.

pub mod bias;
pub mod config;
pub mod data;
pub mod error;
pub mod exemplar;
pub mod losses;
pub mod matrix;
pub mod nn;
pub mod pipeline;
pub mod report;

pub use error::{BicError, Result};
