pub mod autodiff;
pub mod consolidation;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod nets;
pub mod replay;

pub use error::{Error, Result};
