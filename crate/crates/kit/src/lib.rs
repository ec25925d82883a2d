//! Experiment runner around `ramp-core`: text configs, run directories,
//! checkpoint evaluation, delta-error analysis and figure data.

pub mod config;
pub mod delta;
pub mod figures;
pub mod run;

pub use config::{seed_from_env, ExperimentConfig, SEED_ENV};
pub use figures::{emit_figure_data, FigureKind};
pub use run::{run_experiment, RunManifest, RunOutcome};
