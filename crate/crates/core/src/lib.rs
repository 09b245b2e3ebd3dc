//! Zero-shot natural-language video moment localization.
//!
//! Everything needed to train and evaluate a localizer from raw frame
//! features alone: dynamic moment proposal and pseudo-query generation build
//! the supervision, a commonsense concept graph parsed from an assertion dump
//! enriches the video/query encodings, and an attention-guided regressor
//! predicts the target span. All numerics run on a small f64 tape with
//! reverse-mode differentiation, so the whole model trains on one CPU core.

pub mod ablate;
pub mod data;
pub mod error;
pub mod eval;
pub mod kgraph;
pub mod model;
pub mod proposal;
pub mod pseudoquery;
pub mod tensor;
pub mod training;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
