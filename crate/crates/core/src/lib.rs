//! Perplexity-driven training-data selection for sequence-to-sequence
//! translation.

pub mod corpus;
pub mod difficulty;
pub mod error;
pub mod eval;
pub mod model;
pub mod policy;
pub mod seeding;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
