//! The three networks: masked conditional generator, critic with auxiliary
//! classifier head, and the independent classifier.

mod classifier;
mod critic;
mod generator;
pub(crate) mod layers;
pub mod mask;

pub use classifier::ClassifierNet;
pub use critic::CriticNet;
pub use generator::{GeneratorNet, GeneratorOutput, GeneratorSpec, OutputActivation, TrainingMask};
pub use layers::LEAKY_SLOPE;
pub use mask::{cumulative_max, mask_sparsity_penalty, MaskSet};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

/// A network with an expandable class-probability output.
pub trait ClassHead {
    fn num_classes(&self) -> usize;

    /// Differentiable class logits.
    fn logits(&self, g: &mut Graph, x: Var) -> Result<Var>;

    /// Softmax probabilities, one row per input row.
    fn class_probs(&self, x: &Tensor) -> Result<Tensor>;

    /// Widens the output layer; existing class entries stay bit-identical.
    fn expand_output_layer(&mut self, new_total: usize, rng: &mut dyn rand::RngCore) -> Result<()>;

    /// Parameters of the output layer, which consolidation never penalizes.
    fn output_names(&self) -> Vec<String>;

    /// `(old, new)` widths of every expansion so far.
    fn expansions(&self) -> &[(usize, usize)];
}
