//! Patch defenses as composable stages around a [`Detector`].
//!
//! A [`DefenseStack`] runs its input preprocessors in order and hands the
//! result to the wrapped detector, which may carry a feature filter. Score
//! gradients flow back through each preprocessor by a fixed rule:
//! multiplicative suppression passes the gradient scaled by its (frozen)
//! factor, overwritten pixels get zero, and masking or inpainting stages pass
//! it through unchanged.

pub mod at;
pub mod entropy;
pub mod filters;
pub mod lgs;
pub mod masking;
pub mod stacks;
pub mod udf;

pub use at::{at_train_toy, AtParams};
pub use entropy::{window_entropy_map, EntropyHeatmap, WindowGrid};
pub use filters::{ape_region, ApeFilter, FncFilter};
pub use lgs::{lgs_forward, lgs_preprocess, LgsParams, LgsTrace};
pub use masking::{
    idbd_preprocess, jedi_preprocess, patch_detector_mask, sac_preprocess, shape_complete, Completer, GradientSegmenter,
    IdbdParams, JediParams, MorphCompleter, PatchLocator, Segmenter, SegmenterLocator,
};
pub use stacks::{build_stack, DefenseDefaults, DefenseKind, StackContext};
pub use udf::{apply_frame, udf_train, DefensiveFrame, UdfParams};

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{AdapterManifest, Detector, FeatureFilter, FeatureTap, GatewayError};
use crate::model::{Detection, ImagePlane, ModelError, Tensor3};
use crate::transforms::TransformError;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("window {window} does not fit a {height}x{width} image")]
    WindowTooLarge { window: usize, height: usize, width: usize },
    #[error("{component} failed: {message}")]
    Component { component: String, message: String },
    #[error("frame width {width} covers the whole {height}x{image_width} image")]
    FrameTooWide { width: usize, height: usize, image_width: usize },
    #[error("invalid stack: {0}")]
    Stack(String),
    #[error("defaults file: {0}")]
    Defaults(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// How a preprocessor passes score gradients back to its input.
#[derive(Debug, Clone, PartialEq)]
pub enum GradRule {
    Identity,
    /// Per-pixel factor applied to all channels.
    PixelScale(Vec<f64>),
    /// Pixels whose value the stage overwrote.
    ZeroPixels(Vec<bool>),
    Lgs(Box<lgs::LgsTrace>),
}

impl GradRule {
    pub fn apply(&self, grad: &mut Tensor3) {
        match self {
            Self::Identity => {}
            Self::PixelScale(f) => {
                for (px, &s) in grad.data_mut().chunks_exact_mut(3).zip(f) {
                    px.iter_mut().for_each(|v| *v *= s);
                }
            }
            Self::ZeroPixels(m) => udf::zero_pixels(grad, m),
            Self::Lgs(t) => *grad = t.backward(grad),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub image: ImagePlane,
    pub rule: GradRule,
}

/// A pure image-to-image defense stage.
pub trait Preprocessor: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn apply(&self, image: &ImagePlane) -> Result<Preprocessed, DefenseError>;

    /// Backward rule used by adaptive attacks.
    fn gradient_note(&self) -> &'static str {
        "straight-through"
    }
}

#[derive(Debug, Clone)]
pub struct LgsStage(pub LgsParams);

impl Preprocessor for LgsStage {
    fn name(&self) -> &str {
        "lgs"
    }

    fn apply(&self, image: &ImagePlane) -> Result<Preprocessed, DefenseError> {
        let (image, trace) = lgs::lgs_forward(image, &self.0);
        Ok(Preprocessed {
            image,
            rule: GradRule::Lgs(Box::new(trace)),
        })
    }

    fn gradient_note(&self) -> &'static str {
        "exact with threshold decisions held fixed"
    }
}

#[derive(Debug, Clone)]
pub struct IdbdStage(pub IdbdParams);

impl Preprocessor for IdbdStage {
    fn name(&self) -> &str {
        "idbd"
    }

    fn apply(&self, image: &ImagePlane) -> Result<Preprocessed, DefenseError> {
        Ok(Preprocessed {
            image: idbd_preprocess(image, &self.0)?,
            rule: GradRule::Identity,
        })
    }
}

#[derive(Debug, Clone)]
pub struct JediStage {
    pub params: JediParams,
    pub completer: Arc<dyn Completer>,
}

impl Preprocessor for JediStage {
    fn name(&self) -> &str {
        "jedi"
    }

    fn apply(&self, image: &ImagePlane) -> Result<Preprocessed, DefenseError> {
        Ok(Preprocessed {
            image: jedi_preprocess(image, self.completer.as_ref(), &self.params)?,
            rule: GradRule::Identity,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SacStage {
    pub segmenter: Arc<dyn Segmenter>,
    pub min_area: usize,
}

impl Preprocessor for SacStage {
    fn name(&self) -> &str {
        "sac"
    }

    fn apply(&self, image: &ImagePlane) -> Result<Preprocessed, DefenseError> {
        Ok(Preprocessed {
            image: sac_preprocess(image, self.segmenter.as_ref(), self.min_area)?,
            rule: GradRule::Identity,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PatchBoxStage(pub Arc<dyn PatchLocator>);

impl Preprocessor for PatchBoxStage {
    fn name(&self) -> &str {
        "napguard"
    }

    fn apply(&self, image: &ImagePlane) -> Result<Preprocessed, DefenseError> {
        Ok(Preprocessed {
            image: patch_detector_mask(image, self.0.as_ref())?,
            rule: GradRule::Identity,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FrameStage(pub DefensiveFrame);

impl Preprocessor for FrameStage {
    fn name(&self) -> &str {
        "udf"
    }

    fn apply(&self, image: &ImagePlane) -> Result<Preprocessed, DefenseError> {
        Ok(Preprocessed {
            image: apply_frame(image, &self.0)?,
            rule: GradRule::ZeroPixels(self.0.border()),
        })
    }

    fn gradient_note(&self) -> &'static str {
        "exact, zero on the frame"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    InputPreprocessor,
    FeatureFilter,
    ModelWrapper,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub kind: StageKind,
    pub name: String,
}

/// Preprocessors, then a detector that may carry a feature filter.
pub struct DefenseStack {
    manifest: AdapterManifest,
    stages: Vec<StageRecord>,
    preprocessors: Vec<Arc<dyn Preprocessor>>,
    inner: Box<dyn Detector>,
}

pub struct StackBuilder {
    name: String,
    detector: Box<dyn Detector>,
    wrapped: bool,
    filter: Option<Arc<dyn FeatureFilter>>,
    preprocessors: Vec<Arc<dyn Preprocessor>>,
    stages: Vec<StageRecord>,
}

impl StackBuilder {
    /// Replaces the detector with a robustly trained one.
    pub fn wrap_model(mut self, name: impl Into<String>, detector: Box<dyn Detector>) -> Result<Self, DefenseError> {
        if self.wrapped {
            return Err(DefenseError::Stack("at most one model wrapper".into()));
        }
        self.wrapped = true;
        self.detector = detector;
        self.stages.push(StageRecord {
            kind: StageKind::ModelWrapper,
            name: name.into(),
        });
        Ok(self)
    }

    pub fn filter(mut self, filter: Arc<dyn FeatureFilter>) -> Result<Self, DefenseError> {
        if self.filter.is_some() {
            return Err(DefenseError::Stack("at most one feature filter".into()));
        }
        self.stages.push(StageRecord {
            kind: StageKind::FeatureFilter,
            name: filter.name().to_string(),
        });
        self.filter = Some(filter);
        Ok(self)
    }

    pub fn preprocess(mut self, p: Arc<dyn Preprocessor>) -> Self {
        self.stages.push(StageRecord {
            kind: StageKind::InputPreprocessor,
            name: p.name().to_string(),
        });
        self.preprocessors.push(p);
        self
    }

    pub fn build(mut self) -> Result<DefenseStack, DefenseError> {
        if let Some(f) = self.filter {
            if !self.detector.manifest().capabilities.feature_taps_available {
                return Err(DefenseError::Stack(format!(
                    "feature filter {} needs feature taps, which {} does not expose",
                    f.name(),
                    self.detector.manifest().name
                )));
            }
            self.detector.set_feature_filter(Some(f))?;
        }
        let mut manifest = self.detector.manifest().clone();
        manifest.name = self.name;
        Ok(DefenseStack {
            manifest,
            stages: self.stages,
            preprocessors: self.preprocessors,
            inner: self.detector,
        })
    }
}

impl DefenseStack {
    pub fn builder(name: impl Into<String>, detector: Box<dyn Detector>) -> StackBuilder {
        StackBuilder {
            name: name.into(),
            detector,
            wrapped: false,
            filter: None,
            preprocessors: Vec::new(),
            stages: Vec::new(),
        }
    }

    /// Stages in the order they were added.
    pub fn stages(&self) -> &[StageRecord] {
        &self.stages
    }

    pub fn inner(&self) -> &dyn Detector {
        self.inner.as_ref()
    }

    fn gateway_err(&self, e: DefenseError) -> GatewayError {
        match e {
            DefenseError::Gateway(g) => g,
            other => GatewayError::Adapter {
                adapter: self.manifest.name.clone(),
                message: other.to_string(),
            },
        }
    }

    /// The image the wrapped detector sees, plus the gradient rules.
    pub fn preprocess(&self, image: &ImagePlane) -> Result<(ImagePlane, Vec<GradRule>), DefenseError> {
        let mut img = image.clone();
        let mut rules = Vec::with_capacity(self.preprocessors.len());
        for p in &self.preprocessors {
            let out = p.apply(&img)?;
            img = out.image;
            rules.push(out.rule);
        }
        Ok((img, rules))
    }
}

impl Detector for DefenseStack {
    fn manifest(&self) -> &AdapterManifest {
        &self.manifest
    }

    fn detect(&mut self, image: &ImagePlane) -> Result<Vec<Detection>, GatewayError> {
        let (img, _) = self.preprocess(image).map_err(|e| self.gateway_err(e))?;
        self.inner.detect(&img)
    }

    fn person_score(&mut self, image: &ImagePlane) -> Result<f64, GatewayError> {
        let (img, _) = self.preprocess(image).map_err(|e| self.gateway_err(e))?;
        self.inner.person_score(&img)
    }

    fn person_score_and_grad(&mut self, image: &ImagePlane) -> Result<(f64, Tensor3), GatewayError> {
        let (img, rules) = self.preprocess(image).map_err(|e| self.gateway_err(e))?;
        let (s, mut g) = self.inner.person_score_and_grad(&img)?;
        for r in rules.iter().rev() {
            r.apply(&mut g);
        }
        Ok((s, g))
    }

    fn feature_taps(&mut self, image: &ImagePlane) -> Result<Vec<FeatureTap>, GatewayError> {
        let (img, _) = self.preprocess(image).map_err(|e| self.gateway_err(e))?;
        self.inner.feature_taps(&img)
    }

    fn detect_with_tap_override(&mut self, image: &ImagePlane, tap: &FeatureTap) -> Result<Vec<Detection>, GatewayError> {
        let (img, _) = self.preprocess(image).map_err(|e| self.gateway_err(e))?;
        self.inner.detect_with_tap_override(&img, tap)
    }

    fn try_clone(&self) -> Result<Box<dyn Detector>, GatewayError> {
        Ok(Box::new(DefenseStack {
            manifest: self.manifest.clone(),
            stages: self.stages.clone(),
            preprocessors: self.preprocessors.clone(),
            inner: self.inner.try_clone()?,
        }))
    }

    fn gradient_notes(&self) -> Vec<String> {
        let mut notes = self.inner.gradient_notes();
        notes.extend(self.preprocessors.iter().map(|p| format!("{}: {}", p.name(), p.gradient_note())));
        notes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ToyDetector, ToyNet};

    fn toy() -> Box<dyn Detector> {
        Box::new(ToyDetector::new("toy", Arc::new(ToyNet::new(2))))
    }

    #[test]
    fn stack_equals_manual_chaining() {
        let img = ImagePlane::from_fn(64, 64, |y, x| [(x % 7) as f64 / 7.0, (y % 5) as f64 / 5.0, 0.5]);
        let lgs = LgsStage(LgsParams::default());
        let mut stack = DefenseStack::builder("lgs", toy()).preprocess(Arc::new(lgs.clone())).build().unwrap();
        let mut manual = toy();
        let pre = lgs.apply(&img).unwrap().image;
        assert_eq!(stack.detect(&img).unwrap(), manual.detect(&pre).unwrap());
        assert_eq!(stack.person_score(&img).unwrap(), manual.person_score(&pre).unwrap());
    }

    #[test]
    fn stage_order_is_recorded() {
        let stack = DefenseStack::builder("s", toy())
            .preprocess(Arc::new(LgsStage(LgsParams::default())))
            .filter(Arc::new(FncFilter::new(vec![1.0]).unwrap()))
            .unwrap()
            .preprocess(Arc::new(IdbdStage(IdbdParams::default())))
            .build()
            .unwrap();
        let names: Vec<&str> = stack.stages().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, vec!["lgs", "fnc", "idbd"]);
    }

    #[test]
    fn second_model_wrapper_is_rejected() {
        let b = DefenseStack::builder("s", toy()).wrap_model("a", toy()).unwrap();
        assert!(b.wrap_model("b", toy()).is_err());
    }

    #[test]
    fn pixel_scale_rule_scales_every_channel() {
        let mut g = Tensor3::new(1, 2, 3, vec![1.0; 6]).unwrap();
        GradRule::PixelScale(vec![0.5, 0.0]).apply(&mut g);
        assert_eq!(g.data(), &[0.5, 0.5, 0.5, 0.0, 0.0, 0.0]);
    }
}
