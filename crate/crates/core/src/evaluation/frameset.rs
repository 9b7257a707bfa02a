use std::path::Path;

use super::EvalError;
use crate::model::{load_png, validate_metadata_axes, AnnotationFile, FrameTruth, ImagePlane, Validate};

#[derive(Debug, Clone)]
pub struct LoadedFrame {
    pub image: ImagePlane,
    pub truth: FrameTruth,
}

/// Reads an annotation file and every image it references, in file order.
pub fn load_frameset(annotation: &Path, image_root: &Path) -> Result<Vec<LoadedFrame>, EvalError> {
    let text = std::fs::read_to_string(annotation).map_err(|e| EvalError::Io {
        path: annotation.display().to_string(),
        source: e,
    })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let file: AnnotationFile = serde_path_to_error::deserialize(de).map_err(|e| EvalError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    let truths: Vec<FrameTruth> = file.frames.iter().map(|f| f.to_truth()).collect();
    for (i, t) in truths.iter().enumerate() {
        let report = t.validate();
        if !report.is_pass() {
            return Err(EvalError::InvalidFrame {
                image_id: t.image_id.clone(),
                message: format!("frames[{i}]: {report}"),
            });
        }
    }
    let axes = validate_metadata_axes(&truths);
    if !axes.is_pass() {
        return Err(EvalError::InvalidFrame {
            image_id: "<frameset>".into(),
            message: axes.to_string(),
        });
    }
    file.frames
        .iter()
        .zip(truths)
        .map(|(f, truth)| {
            let path = image_root.join(&f.file);
            if !path.is_file() {
                return Err(EvalError::Image {
                    path: path.display().to_string(),
                    message: "file not found".into(),
                });
            }
            let image = load_png(&path).map_err(|e| EvalError::Image {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            Ok(LoadedFrame { image, truth })
        })
        .collect()
}
