//! Compositional incremental learning with multi-pool prompts on a frozen
//! miniature vision transformer.

pub mod backbone;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod prompts;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
