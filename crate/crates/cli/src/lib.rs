//! Library behind the `slkd` binary: configuration, seed sweeps and the
//! artifacts each subcommand writes.

pub mod config;
pub mod error;
pub mod run;

pub use config::{CompareSpec, ExperimentConfig, Generator, NetworkSpec, TaskSpec};
pub use error::{CliError, Result};
pub use run::{
    run_compare, run_distill, run_gradcheck, run_train_teacher, Aggregate, CompareTable, DistillOutcome,
    DistillReport, RunSummary, TeacherSummary,
};
