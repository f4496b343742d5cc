pub mod attacks;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod krr;
pub mod mlp;
pub mod ntk;
pub mod seed;

pub use error::{Error, Result};
