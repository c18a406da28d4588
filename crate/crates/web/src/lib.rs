//! Browser demo over the 2D toy sequence. [`demo`] holds the logic and is
//! plain Rust; [`bindings`] wraps it for JavaScript.

pub mod bindings;
pub mod demo;

pub use demo::{explain_decision, Decision, MaskView, StepInfo, ToyDemo};
