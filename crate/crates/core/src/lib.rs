//! Rare-event probability estimation with normalizing-flow importance
//! sampling trained over nested subset events, plus classical baselines and a
//! benchmark harness.

pub mod baselines;
pub mod diffcore;
pub mod error;
pub mod flow;
pub mod harness;
pub mod nofis;
pub mod problems;

pub use error::{Error, Result};
