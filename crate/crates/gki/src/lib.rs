//! GKI: a knowledge-injection training framework for multi-label medical
//! code assignment. Guideline synthesis from per-code knowledge, a chunked
//! encoder with label cross-attention, multi-task training, and a full
//! evaluation battery.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod guideline;
pub mod kb;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use error::{GkiError, Result};
