//! Class-incremental training with generative replay: replay data, the
//! per-batch optimization schedule, the decision rule and accuracy.

mod config;
mod data;
mod decision;
pub mod losses;
mod trainer;

pub use config::{Architecture, BatchMixing, TrainerConfig};
pub use data::{
    build_replay_dataset, sample_replay_labels, GeneratedSet, Origin, ReplayDataset, ReplayState,
    TaskDataset,
};
pub use decision::{average_accuracy, percent_correct, predict, predict_one, AccuracyReport};
pub use losses::GpMode;
pub use trainer::{MetricsRow, Phase, Trainer};
