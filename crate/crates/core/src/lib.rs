//! Experiential learning agents: gather trajectories by trial and error,
//! distill them into natural-language insights, and reuse both when solving
//! new tasks.

pub mod env;
mod error;
pub mod fixtures;
pub mod gather;
pub mod harness;
pub mod inference;
pub mod insights;
pub mod llm;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod retrieval;
pub mod transfer;

pub use error::{Error, Result};
