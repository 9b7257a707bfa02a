//! Patch and clothing-texture optimization against one or more detectors.

mod objective;
mod patch;
mod run;
mod sweep;
mod texture;

pub use objective::{attack_objective, regularizers, ObjectiveTerms, Target, TargetRecord, Targets};
pub use patch::{
    evaluate_patch, optimize_patch, patch_sample, random_patch, PatchAttackConfig, PatchDraw,
};
pub use run::{git_blob_sha1, load_run_artifact, Artifact, AttackManifest, AttackRun, EpochLoss};
pub use sweep::{kappa_sweep, Adaptivity, KappaPoint};
pub use texture::{
    evaluate_texture, optimize_texture, random_texture, texture_sample, SceneBatch, TextureAttackConfig,
    TextureDraw, TexturePlacement,
};

use rand::Rng;
use thiserror::Error;

use crate::evaluation::EvalError;
use crate::gateway::GatewayError;
use crate::model::{ModelError, Tensor3};
use crate::transforms::TransformError;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("negative target weight {0}")]
    NegativeWeight(f64),
    #[error("target weights sum to {0}, expected 1")]
    WeightsNotNormalized(f64),
    #[error("no attack targets")]
    NoTargets,
    #[error("empty attack surface: no person boxes in the dataset")]
    EmptyAttackSurface,
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("train and test splits share scene {0}")]
    OverlappingSplits(String),
    #[error("rendering scene {scene} failed: {source}")]
    Render { scene: String, source: TransformError },
    #[error("unknown adaptivity mode {0:?}")]
    UnknownAdaptivity(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Uniform pixels in `[0.3, 0.7]`.
pub(crate) fn init_pixels<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Tensor3 {
    let data = (0..height * width * 3).map(|_| rng.gen_range(0.3..=0.7)).collect();
    Tensor3::new(height, width, 3, data).expect("shape matches")
}
