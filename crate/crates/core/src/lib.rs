//! Numerical laboratory for identifiability results in causal representation
//! learning: structural causal models, invertible mixings, IMA contrasts,
//! spurious nonlinear-ICA solutions, flow training, multi-view and
//! multi-environment experiments, and mechanism-shift causal discovery.

pub mod bss;
pub mod cli;
pub mod contrast;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod linalg;
pub mod metrics;
pub mod mixing;
pub mod mss;
pub mod multienv;
pub mod multiview;
pub mod nn;
pub mod optim;
pub mod props;
pub mod rng;
pub mod scm;
pub mod source;
pub mod spurious;
pub mod stats;

pub use error::{Error, Result};
