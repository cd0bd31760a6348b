//! Multiple-instance-learning lab: contrastive encoder pretraining,
//! self-paced pseudo-label finetuning, MIL aggregators, synthetic data and
//! evaluation metrics.

// `!(x > 0.0)` is used on purpose throughout so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregators;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
mod io;
pub mod losses;
pub mod metrics;
pub mod numcore;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
