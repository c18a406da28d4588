//! Experiment plumbing: configuration, datasets, checkpoints and the run
//! loop that writes metrics.

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod format;
pub mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{parse_config, ExperimentConfig};
pub use datasets::{load_dataset, open_source, DataSource, DatasetConfig};
pub use run::{
    evaluate_checkpoint, output_dir, run_experiment, run_experiment_with, run_fim_diagnostic,
    run_joint_head_diagnostic, write_eval_csv, RunOptions, RunStatus, RunSummary, OUT_DIR_ENV,
};
