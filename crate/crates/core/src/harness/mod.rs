//! Config-driven experiments: attacks, sweeps and evaluations persisted to a
//! self-describing run directory.

mod builtin;
mod config;
mod experiment;
mod plot;

pub use builtin::{builtin_registry, registry_for};
pub use config::{
    apply_override, DataConfig, ExperimentConfig, ExperimentKind, FramesetPaths, PatchSettings, SweepSettings,
    TextureSettings, CONFIG_VERSION,
};
pub use experiment::{
    evaluate_frameset, reevaluate, run_experiment, run_experiment_with, CurvePoint, CurveReport, CurveSeries,
    ReevalOutcome, RunManifest, RunStatus, StageEntry, SummaryRow, TransferMatrix,
};
pub use plot::{emit_plot_data, FigureKind};

use thiserror::Error;

/// Version of this crate, recorded in run manifests.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
    #[error("missing report {0}")]
    MissingReport(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl HarnessError {
    /// 2 for configuration problems, 3 for everything that failed while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 3,
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}
