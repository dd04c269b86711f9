//! Self-adaptive reasoning for a small arithmetic language model.
//!
//! A trigger flags suspicious predictions, a streaming buffer groups them
//! into stable clusters, and each cluster gets its own low-rank adapter
//! picked by a two-phase hyperparameter search.

pub mod buffer;
pub mod clusterlib;
pub mod error;
pub mod learner;
pub mod lora_store;
pub mod pipeline;
pub mod sample;
pub mod text;
pub mod trigger;

pub use error::{Result, SageError};
pub use sample::Sample;
