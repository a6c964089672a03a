//! Experiment runner for `codistill`: configs, checkpoints and the
//! subcommands behind the `codistill` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use checkpoint::Checkpoint;
pub use commands::{cmd_eval, cmd_gen_data, cmd_sweep, cmd_train, cmd_verify, Axis, TrainOptions};
pub use config::ExperimentConfig;
