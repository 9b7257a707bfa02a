//! On-disk annotation schema for frame sets.

use serde::{Deserialize, Serialize};

use super::{BoundingBox, ClassLabel, FrameTruth, LabeledBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub frames: Vec<AnnotationFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFrame {
    pub image_id: String,
    /// Image path relative to the frame set's image root.
    pub file: String,
    pub boxes: Vec<AnnotationBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_m: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class: ClassLabel,
}

impl AnnotationFrame {
    pub fn to_truth(&self) -> FrameTruth {
        FrameTruth {
            image_id: self.image_id.clone(),
            boxes: self
                .boxes
                .iter()
                .map(|b| LabeledBox {
                    bbox: BoundingBox {
                        x_min: b.x_min,
                        y_min: b.y_min,
                        x_max: b.x_max,
                        y_max: b.y_max,
                    },
                    class: b.class,
                })
                .collect(),
            angle_deg: self.angle_deg,
            distance_m: self.distance_m,
        }
    }

    pub fn from_truth(truth: &FrameTruth, file: impl Into<String>) -> Self {
        Self {
            image_id: truth.image_id.clone(),
            file: file.into(),
            boxes: truth
                .boxes
                .iter()
                .map(|b| AnnotationBox {
                    x_min: b.bbox.x_min,
                    y_min: b.bbox.y_min,
                    x_max: b.bbox.x_max,
                    y_max: b.bbox.y_max,
                    class: b.class,
                })
                .collect(),
            angle_deg: truth.angle_deg,
            distance_m: truth.distance_m,
        }
    }
}
