//! RaPO and GRPO on synthetic class-incremental token tasks.
//!
//! A linear-softmax policy emits `<think>… </think> <answer>CLASS_k</answer>`
//! sentences over a small token grammar. Tasks arrive one at a time; each
//! introduces new classes and none of the earlier training data is revisited.
//! The crate provides the policy, the task stream, rule-based verifiers, the
//! retention reward with cross-task advantage normalization, the clipped
//! surrogate optimizer, and a harness that runs and scores whole experiments.

pub mod acceptance;
pub mod config;
pub mod env;
pub mod error;
pub mod harness;
pub mod optim;
pub mod policy;
pub mod retention;
pub mod verifiers;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use harness::{run_experiment, run_seed, EvalMatrix, RunRecord};
pub use optim::Algorithm;
