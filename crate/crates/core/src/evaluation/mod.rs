//! Person-class AP, frame-level attack success rate, and bucketed
//! aggregation over viewing angle and distance.

mod frameset;
mod report;

pub use frameset::{load_frameset, LoadedFrame};
pub use report::{aggregate, AxisBreakdown, BucketValue, Buckets, EvalReport, FrameRecord, MetadataAxis, MetricKind};

use thiserror::Error;

use crate::model::{BoundingBox, Detection, EvalConfig, FrameTruth};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("undefined AP: no person truths")]
    UndefinedAp,
    #[error("empty frame set")]
    EmptyFrameSet,
    #[error("frame {0} has no person truth")]
    NoPersonTruth(String),
    #[error("{detections} detection lists for {truths} frames")]
    LengthMismatch { detections: usize, truths: usize },
    #[error("missing {axis} metadata on frames {frames:?}")]
    MissingMetadata { axis: &'static str, frames: Vec<String> },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid frame {image_id}: {message}")]
    InvalidFrame { image_id: String, message: String },
    #[error("cannot load image {path}: {message}")]
    Image { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad bucket edges: {0}")]
    Buckets(String),
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Ranked true/false-positive flags of pooled target-class detections, plus
/// the number of target-class truths.
pub fn ranked_matches(detections: &[Vec<Detection>], truths: &[FrameTruth], cfg: &EvalConfig) -> (Vec<bool>, usize) {
    let mut pooled: Vec<(usize, &Detection)> = Vec::new();
    for (f, dets) in detections.iter().enumerate() {
        for d in dets.iter().filter(|d| d.class == cfg.target_class) {
            pooled.push((f, d));
        }
    }
    // stable sort keeps frame order, then box order, among equal confidences
    pooled.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
    let gt: Vec<Vec<&BoundingBox>> = truths
        .iter()
        .map(|t| t.boxes.iter().filter(|b| b.class == cfg.target_class).map(|b| &b.bbox).collect())
        .collect();
    let npos = gt.iter().map(Vec::len).sum();
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags = Vec::with_capacity(pooled.len());
    for (f, d) in pooled {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt[f].iter().enumerate() {
            if used[f][j] {
                continue;
            }
            let o = iou(&d.bbox, g);
            if o >= cfg.iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        match best {
            Some((j, _)) => {
                used[f][j] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    (flags, npos)
}

/// All-points interpolated average precision of the target class.
pub fn average_precision(detections: &[Vec<Detection>], truths: &[FrameTruth], cfg: &EvalConfig) -> Result<f64, EvalError> {
    if detections.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            detections: detections.len(),
            truths: truths.len(),
        });
    }
    let (flags, npos) = ranked_matches(detections, truths, cfg);
    if npos == 0 {
        return Err(EvalError::UndefinedAp);
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / npos as f64);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for k in 0..recall.len() {
        if recall[k] > prev_r {
            ap += (recall[k] - prev_r) * precision[k];
            prev_r = recall[k];
        }
    }
    Ok(ap)
}

/// Whether the attack succeeded on one frame: no target-class detection above
/// the confidence threshold overlaps a target truth by more than the IoU
/// threshold.
pub fn frame_success(detections: &[Detection], truth: &FrameTruth, cfg: &EvalConfig) -> bool {
    !detections
        .iter()
        .filter(|d| d.class == cfg.target_class && d.confidence > cfg.confidence_threshold)
        .any(|d| {
            truth
                .boxes
                .iter()
                .filter(|b| b.class == cfg.target_class)
                .any(|b| iou(&d.bbox, &b.bbox) > cfg.iou_threshold)
        })
}

/// Fraction of frames on which the attack succeeded.
pub fn attack_success_rate(frames: &[(Vec<Detection>, FrameTruth)], cfg: &EvalConfig) -> Result<f64, EvalError> {
    if frames.is_empty() {
        return Err(EvalError::EmptyFrameSet);
    }
    let mut successes = 0usize;
    for (dets, truth) in frames {
        if !truth.boxes.iter().any(|b| b.class == cfg.target_class) {
            return Err(EvalError::NoPersonTruth(truth.image_id.clone()));
        }
        if frame_success(dets, truth, cfg) {
            successes += 1;
        }
    }
    Ok(successes as f64 / frames.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassLabel, LabeledBox};

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(bbox: BoundingBox, confidence: f64) -> Detection {
        Detection {
            bbox,
            class: ClassLabel::PERSON,
            confidence,
        }
    }

    fn truth(boxes: &[BoundingBox]) -> FrameTruth {
        FrameTruth::new("f", boxes.iter().map(|&x| LabeledBox::person(x)).collect())
    }

    #[test]
    fn iou_hand_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_eq!(iou(&a, &b(1.0, 1.0, 3.0, 3.0)), 1.0 / 7.0);
    }

    #[test]
    fn single_perfect_detection_has_ap_one() {
        let t = truth(&[b(0.0, 0.0, 10.0, 10.0)]);
        let d = vec![det(b(0.0, 0.0, 10.0, 9.0), 0.9)];
        assert_eq!(average_precision(&[d], &[t], &EvalConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn poor_overlap_has_ap_zero() {
        let t = truth(&[b(0.0, 0.0, 10.0, 10.0)]);
        let d = vec![det(b(5.0, 5.0, 15.0, 15.0), 0.9)];
        assert_eq!(average_precision(&[d], &[t], &EvalConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn two_truths_three_detections() {
        let g1 = b(0.0, 0.0, 10.0, 10.0);
        let g2 = b(20.0, 0.0, 30.0, 10.0);
        let t = truth(&[g1, g2]);
        let d = vec![det(g1, 0.9), det(b(50.0, 50.0, 60.0, 60.0), 0.8), det(g2, 0.7)];
        let ap = average_precision(&[d], &[t], &EvalConfig::default()).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn no_truths_is_undefined() {
        let t = truth(&[]);
        assert!(matches!(
            average_precision(&[vec![]], &[t], &EvalConfig::default()),
            Err(EvalError::UndefinedAp)
        ));
    }

    #[test]
    fn asr_counting() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let cfg = EvalConfig::default();
        let hit = vec![det(g, 0.95)];
        let frames = vec![
            (vec![], truth(&[g])),
            (hit.clone(), truth(&[g])),
            (vec![det(g, 0.4)], truth(&[g])),
            (hit, truth(&[g])),
            (vec![det(b(30.0, 30.0, 40.0, 40.0), 0.99)], truth(&[g])),
        ];
        assert_eq!(attack_success_rate(&frames, &cfg).unwrap(), 0.6);
        assert!(matches!(attack_success_rate(&[], &cfg), Err(EvalError::EmptyFrameSet)));
        assert!(matches!(
            attack_success_rate(&[(vec![], truth(&[]))], &cfg),
            Err(EvalError::NoPersonTruth(_))
        ));
    }
}
