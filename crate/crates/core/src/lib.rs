//! Parameter-efficient tuning for neural text retrievers.
//!
//! A small from-scratch transformer encoder, four parameter-efficient
//! adaptation methods (prefix/P-Tuning v2, input prompts, adapters, bias-only),
//! dense and late-interaction retrievers trained with a contrastive objective,
//! exact top-k search, and the evaluation and analysis tools used to compare
//! them: top-k accuracy, nDCG@k, expected calibration error and
//! query-length-binned performance.

pub mod calibration;
pub mod encoder;
pub mod error;
pub mod index;
pub mod metrics;
pub mod peft;
pub mod retrievers;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
