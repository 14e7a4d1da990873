//! Training, evaluation, ablation, gradient checking and attention export
//! for the `inavit` model on the synthetic anticipation task.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod metrics;
pub mod train;

pub use error::{HarnessError, Result};
