//! Shared domain types.
//!
//! Every other module speaks in these types. Images are stored unnormalized in
//! `[0, 1]`, height × width × RGB, row-major. Detector-specific normalization
//! happens behind the gateway.

mod annotation;
mod classes;
mod persist;
mod tensor;
mod validate;

pub use annotation::{AnnotationBox, AnnotationFile, AnnotationFrame};
pub use classes::{ClassLabel, COCO_CLASSES};
pub use persist::{encode_png, load_artifact, load_png, quantize_rgb8, save_artifact, save_png, ArtifactKind, ArtifactSidecar};
pub use tensor::Tensor3;
pub use validate::{validate_metadata_axes, Validate, ValidationReport, Violation};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid {entity}: {report}")]
    Invalid {
        entity: &'static str,
        report: ValidationReport,
    },
    #[error("shape mismatch: expected {expected} values, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error on {path}: {message}")]
    Codec { path: String, message: String },
    #[error("malformed sidecar {path}: {message}")]
    Sidecar { path: String, message: String },
    #[error("unknown class label {0:?}")]
    UnknownClass(String),
}

/// An RGB image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    inner: Tensor3,
}

impl ImagePlane {
    /// Builds an image from row-major RGB values, rejecting out-of-range or
    /// non-finite intensities.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        let inner = Tensor3::new(height, width, 3, data)?;
        let image = Self { inner };
        image.validate().into_result("ImagePlane")?;
        Ok(image)
    }

    /// Builds an image, clamping every value into `[0, 1]`. NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self, ModelError> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        let inner = Tensor3::new(height, width, 3, data)?;
        if height == 0 || width == 0 {
            return Err(ModelError::Invalid {
                entity: "ImagePlane",
                report: inner_dims_report(height, width),
            });
        }
        Ok(Self { inner })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self::from_clamped(height, width, data).expect("filled image dimensions must be positive")
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::from_clamped(height, width, data).expect("from_fn image dimensions must be positive")
    }

    /// Clamps an arbitrary 3-channel tensor into an image.
    pub fn from_tensor_clamped(t: Tensor3) -> Result<Self, ModelError> {
        if t.channels() != 3 {
            return Err(ModelError::Shape {
                expected: t.height() * t.width() * 3,
                actual: t.len(),
            });
        }
        let (h, w) = (t.height(), t.width());
        Self::from_clamped(h, w, t.into_raw())
    }

    pub fn height(&self) -> usize {
        self.inner.height()
    }

    pub fn width(&self) -> usize {
        self.inner.width()
    }

    pub fn data(&self) -> &[f64] {
        self.inner.data()
    }

    pub fn as_tensor(&self) -> &Tensor3 {
        &self.inner
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.inner
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.inner.get(y, x, c)
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width() + x) * 3;
        let d = self.inner.data();
        [d[i], d[i + 1], d[i + 2]]
    }

    /// Luma-free grayscale: the channel mean.
    pub fn grayscale(&self) -> Vec<f64> {
        self.inner
            .data()
            .chunks_exact(3)
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .collect()
    }

    /// Returns a copy with `f` applied to every value, clamped back into range.
    pub fn map_clamped(&self, f: impl Fn(f64) -> f64) -> Self {
        let data = self.inner.data().iter().map(|&v| f(v)).collect();
        Self::from_clamped(self.height(), self.width(), data).expect("dimensions preserved")
    }

    pub fn mean(&self) -> f64 {
        let d = self.inner.data();
        d.iter().sum::<f64>() / d.len() as f64
    }

    pub fn max_abs_diff(&self, other: &ImagePlane) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }
}

fn inner_dims_report(height: usize, width: usize) -> ValidationReport {
    let mut r = ValidationReport::default();
    if height == 0 {
        r.push("height", "height ≥ 1");
    }
    if width == 0 {
        r.push("width", "width ≥ 1");
    }
    r
}

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, ModelError> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate().into_result("BoundingBox")?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x_min: cx - w / 2.0,
            y_min: cy - h / 2.0,
            x_max: cx + w / 2.0,
            y_max: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }
}

/// A scored, class-labeled box produced by a detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class: ClassLabel,
    pub confidence: f64,
}

/// A ground-truth box with its class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class: ClassLabel,
}

impl LabeledBox {
    pub fn person(bbox: BoundingBox) -> Self {
        Self {
            bbox,
            class: ClassLabel::PERSON,
        }
    }
}

/// Annotated ground truth for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub image_id: String,
    pub boxes: Vec<LabeledBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_m: Option<f64>,
}

impl FrameTruth {
    pub fn new(image_id: impl Into<String>, boxes: Vec<LabeledBox>) -> Self {
        Self {
            image_id: image_id.into(),
            boxes,
            angle_deg: None,
            distance_m: None,
        }
    }

    pub fn person_boxes(&self) -> impl Iterator<Item = &BoundingBox> {
        self.boxes
            .iter()
            .filter(|b| b.class.is_person())
            .map(|b| &b.bbox)
    }
}

/// Patch pixels plus the placement constants `c0` and `κ`.
///
/// The effective size constant is `c = κ·c0`; the resolution stays fixed while
/// `κ` changes so the solution space has constant dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub pixels: ImagePlane,
    pub c0: f64,
    pub kappa: f64,
}

impl PatchSpec {
    pub const DEFAULT_C0: f64 = 0.2;
    pub const DEFAULT_RESOLUTION: usize = 300;

    pub fn new(pixels: ImagePlane, c0: f64, kappa: f64) -> Result<Self, ModelError> {
        let p = Self { pixels, c0, kappa };
        p.validate().into_result("PatchSpec")?;
        Ok(p)
    }

    pub fn size_constant(&self) -> f64 {
        self.kappa * self.c0
    }
}

/// A padded texture from which fixed-size views are cropped.
///
/// The padded size is `base + ⌊γ·base⌋` along each axis, which equals
/// `⌊(1+γ)·base⌋` for integer `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTextureMap {
    pub pixels: ImagePlane,
    pub base_w: usize,
    pub base_h: usize,
    pub gamma: f64,
}

/// `⌊γ·n⌋`, robust to the representation error of decimal `γ`.
pub fn floor_scaled(gamma: f64, n: usize) -> usize {
    let v = gamma * n as f64;
    (v + 1e-9 * v.abs().max(1.0)).floor().max(0.0) as usize
}

impl LatentTextureMap {
    pub fn latent_dims(base_h: usize, base_w: usize, gamma: f64) -> (usize, usize) {
        (
            base_h + floor_scaled(gamma, base_h),
            base_w + floor_scaled(gamma, base_w),
        )
    }

    pub fn new(pixels: ImagePlane, base_h: usize, base_w: usize, gamma: f64) -> Result<Self, ModelError> {
        let t = Self {
            pixels,
            base_w,
            base_h,
            gamma,
        };
        t.validate().into_result("LatentTextureMap")?;
        Ok(t)
    }

    /// Margin `(⌊γh⌋, ⌊γw⌋)` available for jittering.
    pub fn margin(&self) -> (usize, usize) {
        (
            floor_scaled(self.gamma, self.base_h),
            floor_scaled(self.gamma, self.base_w),
        )
    }
}

/// Per-pixel suspicion map, 1 = suspected adversarial.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl MaskMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != height * width {
            return Err(ModelError::Shape {
                expected: height * width,
                actual: values.len(),
            });
        }
        let m = Self {
            height,
            width,
            values,
        };
        m.validate().into_result("MaskMap")?;
        Ok(m)
    }

    pub fn from_bools(height: usize, width: usize, bits: &[bool]) -> Self {
        Self {
            height,
            width,
            values: bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn is_set(&self, y: usize, x: usize) -> bool {
        self.get(y, x) >= 0.5
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v >= 0.5).collect()
    }

    /// Thresholded copy; the result is binary.
    pub fn binarize(&self, threshold: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.values.len().max(1) as f64
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "EvalConfig::default_iou")]
    pub iou_threshold: f64,
    #[serde(default = "EvalConfig::default_conf")]
    pub confidence_threshold: f64,
    #[serde(default = "EvalConfig::default_class")]
    pub target_class: ClassLabel,
}

impl EvalConfig {
    fn default_iou() -> f64 {
        0.5
    }
    fn default_conf() -> f64 {
        0.5
    }
    fn default_class() -> ClassLabel {
        ClassLabel::PERSON
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            confidence_threshold: 0.5,
            target_class: ClassLabel::PERSON,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "OptimConfig::default_epochs")]
    pub epochs: usize,
    #[serde(default = "OptimConfig::default_lr")]
    pub learning_rate: f64,
    #[serde(default = "OptimConfig::default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub tv_weight: f64,
    #[serde(default)]
    pub nps_weight: f64,
    #[serde(default = "OptimConfig::default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Images per optimizer step.
    #[serde(default = "OptimConfig::default_batch")]
    pub batch_size: usize,
}

impl OptimConfig {
    fn default_epochs() -> usize {
        100
    }
    fn default_lr() -> f64 {
        0.01
    }
    fn default_optimizer() -> OptimizerKind {
        OptimizerKind::Adam
    }
    fn default_gamma() -> f64 {
        0.1
    }
    fn default_batch() -> usize {
        4
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            tv_weight: 0.0,
            nps_weight: 0.0,
            gamma: 0.1,
            seed: 0,
            batch_size: 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_of_three_four_box_is_five() {
        let b = BoundingBox::new(0.0, 0.0, 3.0, 4.0).unwrap();
        assert_eq!(b.diagonal(), 5.0);
    }

    #[test]
    fn inverted_box_is_rejected() {
        assert!(BoundingBox::new(10.0, 0.0, 0.0, 10.0).is_err());
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(ImagePlane::new(1, 1, vec![0.0, 1.2, 0.3]).is_err());
        assert!(ImagePlane::new(1, 1, vec![0.0, f64::NAN, 0.3]).is_err());
        assert!(ImagePlane::new(0, 1, vec![]).is_err());
        assert!(ImagePlane::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn latent_dims_follow_floor_formula() {
        assert_eq!(LatentTextureMap::latent_dims(300, 300, 0.1), (330, 330));
        assert_eq!(LatentTextureMap::latent_dims(300, 300, 0.0), (300, 300));
        assert_eq!(LatentTextureMap::latent_dims(300, 300, 0.05), (315, 315));
        assert_eq!(LatentTextureMap::latent_dims(37, 41, 0.1), (40, 45));
    }

    #[test]
    fn floor_scaled_matches_exact_rational_floor() {
        // γ = p/100 with exact rational reference
        for p in 0..100usize {
            let gamma = p as f64 / 100.0;
            for n in 1..400usize {
                assert_eq!(floor_scaled(gamma, n), p * n / 100, "γ={gamma} n={n}");
            }
        }
    }

    #[test]
    fn mask_binarize_is_binary() {
        let m = MaskMap::new(1, 3, vec![0.2, 0.6, 1.0]).unwrap();
        let b = m.binarize(0.5);
        assert!(b.is_binary());
        assert_eq!(b.count(), 2);
    }
}
