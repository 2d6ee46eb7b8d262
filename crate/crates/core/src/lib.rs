//! Split-and-Bridge class-incremental learning on dense networks, with the
//! standard distillation, cross-entropy-only and double-distillation
//! baselines, synthetic and IDX/CSV benchmarks, and an experiment runner.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod losses;
pub mod net;
pub mod partition;
pub mod seed;

pub use error::{Error, Result};
