//! Config-driven experiment harness around the `fisherflow` library.

pub mod config;
pub mod experiments;
pub mod report;

use std::time::Instant;

use fisherflow::FlowError;

pub use config::{resolve, ConfigError, Experiment, ExperimentConfig, Overrides, Resolved};
pub use experiments::{run_experiment, RunOutput};
pub use report::{write_run, RunFiles};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 for configuration problems, 2 for a diverged flow, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Flow(FlowError::DivergedFlow { .. }) => 2,
            CliError::Flow(_) | CliError::Io(_) => 3,
        }
    }
}

/// Resolves, runs and writes one experiment.
pub fn run_with_files(text: &str, flags: &Overrides) -> Result<(Resolved, RunOutput, RunFiles), CliError> {
    let resolved = resolve(text, flags)?;
    let start = Instant::now();
    let out = run_experiment(&resolved.config)?;
    let files = write_run(&resolved, &out, start.elapsed().as_secs_f64())?;
    Ok((resolved, out, files))
}
