//! Experiment orchestration: configuration, training runs, the ablation
//! ladder, the prompt-count sweep, and plot-data export.

pub mod config;
pub mod ladder;
pub mod plots;
pub mod runner;
pub mod sweep;

pub use config::ExperimentConfig;
pub use ladder::{run_ablation_ladder, LadderReport, LadderVariant};
pub use runner::{load_checkpoint, run_training, save_checkpoint, RunRecord, Trained};
pub use sweep::{run_prompt_count_sweep, SweepReport};
