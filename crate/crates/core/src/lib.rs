pub mod adversary;
pub mod checkpoint;
pub mod construct;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod hgcore;
pub mod ihen;
pub mod nn;
pub mod stats;
pub mod walk;

pub use error::{Error, Result};
