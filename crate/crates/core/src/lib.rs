//! Conditional, level-adaptive conformal filtering of LLM claims and
//! prediction intervals, with differentiable cutoffs for score tuning.

pub mod boost;
pub mod conformal;
pub mod error;
pub mod eval;
pub mod io;
pub mod level;
pub mod qr;
pub mod seed;

pub use error::{Error, Result};
