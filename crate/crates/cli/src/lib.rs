//! Experiment orchestration for natural-stream continual learning: config
//! handling, regime preparation, sequential runs, parallel grids and stream
//! diagnostics.

pub mod config;
pub mod diag;
pub mod runner;

pub use config::{ConfigError, ExperimentConfig, GridAxes, Overrides, PolicyChoice, Regime};
pub use runner::{execute, prepare_regime, resolve_streams, run_experiment, run_grid, RunResult, Streams};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const IO: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const PARTIAL_GRID: i32 = 4;
}

/// Maps an error chain to an exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use natstream_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return exit::CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Numerical(_) | E::UndefinedMetric(_) | E::Uninitialized(_) => exit::NUMERICAL,
                E::Io { .. }
                | E::Format { .. }
                | E::Corruption { .. }
                | E::UnsupportedVersion { .. }
                | E::StaleManifest { .. }
                | E::Parse { .. } => exit::IO,
                _ => exit::CONFIG,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return exit::IO;
        }
    }
    exit::CONFIG
}
