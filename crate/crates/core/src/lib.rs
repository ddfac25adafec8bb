//! Propensity and exposure estimation from interaction-only data, a clipped
//! IPS pairwise ranker, and the evaluation and simulation tooling around them.

pub mod baselines;
pub mod causal;
pub mod data;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod estimate;
pub mod eval;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod propcare;
pub mod ranker;
pub mod rng;

pub use error::{Error, Result};
