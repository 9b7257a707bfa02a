use std::fmt;

use serde::{Deserialize, Serialize};

use super::{
    BoundingBox, Detection, EvalConfig, FrameTruth, ImagePlane, LatentTextureMap, MaskMap, ModelError,
    OptimConfig, PatchSpec,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Dotted field path, e.g. `boxes[2].x_min`.
    pub path: String,
    /// The invariant that failed.
    pub message: String,
}

/// Outcome of checking an entity's invariants. Empty means pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn pass() -> Self {
        Self::default()
    }

    pub fn is_pass(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.into(),
            message: message.into(),
        });
    }

    /// Appends another report's violations under `prefix`.
    pub fn nest(&mut self, prefix: &str, other: ValidationReport) {
        for v in other.violations {
            let path = if v.path.is_empty() {
                prefix.to_string()
            } else if v.path.starts_with('[') {
                format!("{prefix}{}", v.path)
            } else {
                format!("{prefix}.{}", v.path)
            };
            self.violations.push(Violation {
                path,
                message: v.message,
            });
        }
    }

    pub fn into_result(self, entity: &'static str) -> Result<(), ModelError> {
        if self.is_pass() {
            Ok(())
        } else {
            Err(ModelError::Invalid {
                entity,
                report: self,
            })
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_pass() {
            return write!(f, "pass");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{}: {}", v.path, v.message)?;
        }
        Ok(())
    }
}

/// Invariant checking for entities built from untrusted input.
///
/// Reports every violated invariant instead of stopping at the first.
pub trait Validate {
    fn validate(&self) -> ValidationReport;
}

fn check_unit_interval(r: &mut ValidationReport, path: &str, data: &[f64]) {
    if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        r.push(format!("{path}[{i}]"), "value in [0,1]");
    }
}

impl Validate for ImagePlane {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        if self.height() == 0 {
            r.push("height", "height ≥ 1");
        }
        if self.width() == 0 {
            r.push("width", "width ≥ 1");
        }
        check_unit_interval(&mut r, "pixels", self.data());
        r
    }
}

impl Validate for BoundingBox {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|v| !v.is_finite()) {
            r.push("", "coordinates finite");
            return r;
        }
        if !(self.x_min < self.x_max) {
            r.push("x_min", "x_min < x_max");
        }
        if !(self.y_min < self.y_max) {
            r.push("y_min", "y_min < y_max");
        }
        r
    }
}

impl Validate for Detection {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        r.nest("box", self.bbox.validate());
        if !(0.0..=1.0).contains(&self.confidence) {
            r.push("confidence", "confidence in [0,1]");
        }
        r
    }
}

impl Validate for FrameTruth {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        for (i, b) in self.boxes.iter().enumerate() {
            r.nest(&format!("boxes[{i}]"), b.bbox.validate());
        }
        if let Some(a) = self.angle_deg {
            if !(-180.0..=180.0).contains(&a) {
                r.push("angle_deg", "angle in [-180,180]");
            }
        }
        if let Some(d) = self.distance_m {
            if !(d > 0.0 && d.is_finite()) {
                r.push("distance_m", "distance > 0");
            }
        }
        r
    }
}

/// Frame sets must declare a metadata axis on every frame or on none.
pub fn validate_metadata_axes(frames: &[FrameTruth]) -> ValidationReport {
    let mut r = ValidationReport::default();
    let angles = frames.iter().filter(|f| f.angle_deg.is_some()).count();
    let dists = frames.iter().filter(|f| f.distance_m.is_some()).count();
    for (count, name) in [(angles, "angle_deg"), (dists, "distance_m")] {
        if count != 0 && count != frames.len() {
            for (i, f) in frames.iter().enumerate() {
                let has = match name {
                    "angle_deg" => f.angle_deg.is_some(),
                    _ => f.distance_m.is_some(),
                };
                if !has {
                    r.push(
                        format!("frames[{i}].{name}"),
                        format!("metadata axis {name} declared by the frame set but missing on frame {}", f.image_id),
                    );
                }
            }
        }
    }
    r
}

impl Validate for PatchSpec {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        r.nest("pixels", self.pixels.validate());
        if !(self.c0 > 0.0 && self.c0.is_finite()) {
            r.push("c0", "c0 > 0");
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            r.push("kappa", "kappa > 0");
        }
        r
    }
}

impl Validate for LatentTextureMap {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        r.nest("pixels", self.pixels.validate());
        if !(0.0..1.0).contains(&self.gamma) {
            r.push("gamma", "gamma in [0,1)");
            return r;
        }
        if self.base_w == 0 || self.base_h == 0 {
            r.push("base_w", "base dims ≥ 1");
            return r;
        }
        let (lh, lw) = LatentTextureMap::latent_dims(self.base_h, self.base_w, self.gamma);
        if self.pixels.width() != lw {
            r.push("pixels.width", format!("latent width = ⌊(1+γ)w⌋ = {lw}"));
        }
        if self.pixels.height() != lh {
            r.push("pixels.height", format!("latent height = ⌊(1+γ)h⌋ = {lh}"));
        }
        r
    }
}

impl Validate for MaskMap {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        check_unit_interval(&mut r, "values", self.values());
        r
    }
}

impl Validate for EvalConfig {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            r.push("iou_threshold", "iou_threshold in (0,1)");
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold < 1.0) {
            r.push("confidence_threshold", "confidence_threshold in (0,1)");
        }
        r
    }
}

impl Validate for OptimConfig {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        if self.epochs < 1 {
            r.push("epochs", "epochs ≥ 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            r.push("learning_rate", "learning_rate > 0");
        }
        if !(self.tv_weight >= 0.0) {
            r.push("tv_weight", "tv_weight ≥ 0");
        }
        if !(self.nps_weight >= 0.0) {
            r.push("nps_weight", "nps_weight ≥ 0");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            r.push("gamma", "gamma in [0,1)");
        }
        if self.batch_size < 1 {
            r.push("batch_size", "batch_size ≥ 1");
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_formed_box_passes() {
        let b = BoundingBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 10.0,
            y_max: 10.0,
        };
        assert!(b.validate().is_pass());
    }

    #[test]
    fn inverted_box_reports_x_order() {
        let b = BoundingBox {
            x_min: 10.0,
            y_min: 0.0,
            x_max: 0.0,
            y_max: 10.0,
        };
        let r = b.validate();
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].message, "x_min < x_max");
        assert_eq!(r.violations[0].path, "x_min");
    }

    #[test]
    fn latent_texture_with_formula_dims_passes() {
        let pixels = ImagePlane::filled(330, 330, [0.5; 3]);
        let t = LatentTextureMap {
            pixels,
            base_w: 300,
            base_h: 300,
            gamma: 0.1,
        };
        assert!(t.validate().is_pass());
    }

    #[test]
    fn latent_texture_with_wrong_dims_fails() {
        let pixels = ImagePlane::filled(331, 330, [0.5; 3]);
        let t = LatentTextureMap {
            pixels,
            base_w: 300,
            base_h: 300,
            gamma: 0.1,
        };
        let r = t.validate();
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].path, "pixels.height");
    }

    #[test]
    fn nested_paths_are_reported() {
        let f = FrameTruth::new(
            "f0",
            vec![super::super::LabeledBox::person(BoundingBox {
                x_min: 5.0,
                y_min: 5.0,
                x_max: 1.0,
                y_max: 1.0,
            })],
        );
        let r = f.validate();
        let paths: Vec<_> = r.violations.iter().map(|v| v.path.as_str()).collect();
        assert_eq!(paths, vec!["boxes[0].x_min", "boxes[0].y_min"]);
    }

    #[test]
    fn configs_check_thresholds() {
        let mut c = EvalConfig::default();
        assert!(c.validate().is_pass());
        c.iou_threshold = 1.0;
        assert!(!c.validate().is_pass());
        let mut o = OptimConfig::default();
        assert!(o.validate().is_pass());
        o.epochs = 0;
        o.learning_rate = -1.0;
        assert_eq!(o.validate().violations.len(), 2);
    }
}
