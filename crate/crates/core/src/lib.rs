//! Uncertainty-gated multi-expert fusion for long-tailed hierarchical
//! multi-label text classification.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evidential;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod parallel;
pub mod special;
pub mod trainer;

pub use error::{Result, UmeError};
