//! Desk-scale backdoor monitoring testbed.
//!
//! A deliberately backdoored toy transformer produces internal-state traces
//! (normalized query-key attention matrices and residual activations); an
//! ensemble of unsupervised detectors fitted on benign traces flags harmful
//! behavior; red-team fine-tuning and causal interventions stress-test the
//! monitors.

// Numeric kernels favor explicit index loops; matched-index math reads
// better than iterator chains there.
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod config;
pub mod detectors;
pub mod error;
pub mod evaluation;
pub mod interventions;
pub mod linalg;
pub mod pipeline;
pub mod redteam;
pub mod rng;
pub mod testbed;
pub mod traces;

pub use error::{Result, SentinelError};
