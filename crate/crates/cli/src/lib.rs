//! Experiment harness around the `vcforge` engine.
//!
//! Runs are described by a [`RunConfig`] (JSON, strict keys), emit per-step
//! metrics as CSV and a JSON summary, and can be batched into ablation
//! matrices. The gradient-check suite lives here as well so the binary can
//! run it without a test harness.

pub mod ablate;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod io;
pub mod run;

mod error;

pub use config::{RunConfig, Task};
pub use error::{CliError, Result};
pub use run::{run_experiment, FinalMetrics, RunOutcome, RunSummary};
