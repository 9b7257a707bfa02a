//! Uniform access to person detectors.
//!
//! Everything that scores images implements [`Detector`]: the built-in
//! [`ToyDetector`], weighted [`EnsembleDetector`]s, defended stacks, and
//! out-of-process models reached through [`wire::ProcessAdapter`].

pub mod ensemble;
pub mod features;
pub mod letterbox;
pub mod registry;
pub mod toy;
pub mod toynet;
pub mod wire;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Detection, ImagePlane, ModelError, Tensor3};

pub use ensemble::{make_ensemble, EnsembleDetector};
pub use features::{clip_backward, clip_feature_norms, ClipPlan, FeatureFilter, FeatureTap, LevelClip};
pub use letterbox::Letterbox;
pub use registry::Registry;
pub use toy::ToyDetector;
pub use toynet::{ToyNet, ToyTrainConfig};

pub const PROTOCOL_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{adapter}: gradients unavailable")]
    GradientsUnavailable { adapter: String },
    #[error("{adapter}: {capability} unsupported")]
    Unsupported { adapter: String, capability: &'static str },
    #[error("{adapter}: {message}")]
    Adapter { adapter: String, message: String },
    #[error("ensemble members have mixed input sizes: {0:?}")]
    MixedInputSizes(Vec<usize>),
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unknown detector {0:?}")]
    UnknownDetector(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Capabilities {
    pub grads_available: bool,
    pub feature_taps_available: bool,
}

/// Where the attack score comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    PreNmsClass,
    PostNmsClass,
    Objectness,
}

/// Self-description every adapter publishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterManifest {
    pub name: String,
    pub weights_hash: String,
    pub input_size: usize,
    pub normalization: Normalization,
    pub capabilities: Capabilities,
    pub protocol_version: u16,
    #[serde(default = "default_score_source")]
    pub score_source: ScoreSource,
}

fn default_score_source() -> ScoreSource {
    ScoreSource::PreNmsClass
}

/// A person detector.
///
/// Handles are single-threaded (`&mut self`); use [`Detector::try_clone`] to
/// build one handle per worker.
pub trait Detector: Send {
    fn manifest(&self) -> &AdapterManifest;

    /// Post-NMS detections in original image coordinates.
    fn detect(&mut self, image: &ImagePlane) -> Result<Vec<Detection>, GatewayError>;

    /// Maximum pre-NMS person confidence, 0 when there are no candidates.
    fn person_score(&mut self, image: &ImagePlane) -> Result<f64, GatewayError> {
        self.person_score_and_grad(image).map(|(s, _)| s)
    }

    /// Score and its gradient with respect to the image pixels.
    fn person_score_and_grad(&mut self, image: &ImagePlane) -> Result<(f64, Tensor3), GatewayError> {
        let _ = image;
        Err(GatewayError::GradientsUnavailable {
            adapter: self.manifest().name.clone(),
        })
    }

    /// Per-level activations for `image`.
    fn feature_taps(&mut self, image: &ImagePlane) -> Result<Vec<FeatureTap>, GatewayError> {
        let _ = image;
        Err(self.unsupported("feature taps"))
    }

    /// Runs detection with one tap's activations replaced by `tap.features`.
    fn detect_with_tap_override(&mut self, image: &ImagePlane, tap: &FeatureTap) -> Result<Vec<Detection>, GatewayError> {
        let _ = (image, tap);
        Err(self.unsupported("feature taps"))
    }

    /// Installs (or removes) a filter applied to every forward pass.
    fn set_feature_filter(&mut self, filter: Option<Arc<dyn FeatureFilter>>) -> Result<(), GatewayError> {
        let _ = filter;
        Err(self.unsupported("feature taps"))
    }

    fn try_clone(&self) -> Result<Box<dyn Detector>, GatewayError>;

    /// How the gradient of each non-differentiable stage is approximated, one
    /// `"stage: rule"` entry per stage. Empty when the gradient is exact.
    fn gradient_notes(&self) -> Vec<String> {
        Vec::new()
    }

    fn unsupported(&self, capability: &'static str) -> GatewayError {
        GatewayError::Unsupported {
            adapter: self.manifest().name.clone(),
            capability,
        }
    }
}

/// Max of candidate confidences with the empty-set convention.
pub fn max_candidate_score(candidates: &[f64]) -> f64 {
    candidates.iter().copied().fold(0.0, f64::max)
}
