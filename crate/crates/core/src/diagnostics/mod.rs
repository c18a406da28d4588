//! Measurements behind the design: importance similarity between real and
//! generated data, head interference on a shared trunk, and mask capacity.

pub mod alignment;
pub mod interference;
pub mod masks;
pub mod similarity;

pub use alignment::{replay_alignment, replay_alignment_experiment, AlignmentSettings};
pub use interference::{
    deeper_group_less_similar, head_importances, joint_head_interference_experiment,
    InterferenceSettings,
};
pub use masks::{mask_usage_report, LayerUsage};
pub use similarity::{
    cosine, fim_correlation, fim_cosine_similarity, pearson, SimilarityReport, SimilarityRow,
};
