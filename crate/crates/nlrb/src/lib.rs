//! Experiment pipeline for nonlinear reduced-basis surrogates: configuration,
//! artifact formats and the stages behind the `nlrb` command.
//!
//! Every stage reads its inputs from a work directory, checks that they were
//! produced from the current configuration, and writes its outputs together
//! with a `manifest.json` recording the configuration hash:
//!
//! ```text
//! workdir/
//!   snapshots/     grid, training and test parameters, snapshot matrix
//!   basis/         POD basis, its derivatives, singular values
//!   models/        trained networks, one directory per method and r
//!   results/       per-sample error tables and adaptation logs
//!   figures-data/  merged tables and aggregates for plotting
//! ```

use std::path::PathBuf;

pub mod config;
pub mod io;
pub mod pipeline;

/// Errors of the command-line pipeline, each mapped to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact {}; run the stage that produces it first", .0.display())]
    Missing(PathBuf),
    #[error(
        "stale artifact {}: built with config hash {found} but the current configuration expects {expected}; rerun the upstream stage",
        path.display()
    )]
    Stale {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error(transparent)]
    Core(#[from] nlrb_core::Error),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// 2 for configuration problems, 3 for numerical or training failures,
    /// 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        use nlrb_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Missing(_) | CliError::Stale { .. } => 2,
            CliError::Core(E::Config(_) | E::Domain { .. }) => 2,
            CliError::Core(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}
