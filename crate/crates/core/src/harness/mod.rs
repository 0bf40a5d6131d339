//! Experiment orchestration: configuration, seeded replication and output files.

pub mod config;
pub mod plots;
pub mod run;

pub use config::{Cell, Check, ExperimentConfig, Grid, Output, ResolvedCell, Settings, Tolerances};
pub use plots::emit_plots;
pub use run::{run, with_jobs, write_outputs, CellSummary, RunOptions, RunOutput, RunRecord, TauRow};
