//! [`Detector`] implementation over [`ToyNet`].

use std::sync::Arc;

use super::features::{ClipPlan, FeatureFilter, FeatureTap};
use super::letterbox::Letterbox;
use super::toynet::{Forward, ToyNet};
use super::{AdapterManifest, Capabilities, Detector, GatewayError, ScoreSource, PROTOCOL_VERSION};
use crate::evaluation::iou;
use crate::model::{BoundingBox, ClassLabel, Detection, ImagePlane, Tensor3};
use crate::transforms::SamplingGrid;

pub const DEFAULT_DETECT_THRESHOLD: f64 = 0.05;
pub const DEFAULT_NMS_IOU: f64 = 0.45;

#[derive(Debug, Clone)]
pub struct ToyDetector {
    net: Arc<ToyNet>,
    manifest: AdapterManifest,
    filter: Option<Arc<dyn FeatureFilter>>,
    pub detect_threshold: f64,
    pub nms_iou: f64,
}

struct Pass {
    letterbox: Letterbox,
    grid: Option<SamplingGrid>,
    plan: Option<ClipPlan>,
    fwd: Forward,
}

/// Greedy non-maximum suppression, highest confidence first.
pub fn nms(mut candidates: Vec<(BoundingBox, f64)>, iou_threshold: f64) -> Vec<(BoundingBox, f64)> {
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut kept: Vec<(BoundingBox, f64)> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| iou(&k.0, &c.0) <= iou_threshold) {
            kept.push(c);
        }
    }
    kept
}

impl ToyDetector {
    pub fn new(name: impl Into<String>, net: Arc<ToyNet>) -> Self {
        let manifest = AdapterManifest {
            name: name.into(),
            weights_hash: net.weights_hash(),
            input_size: net.input_size,
            normalization: net.normalization,
            capabilities: Capabilities {
                grads_available: true,
                feature_taps_available: true,
            },
            protocol_version: PROTOCOL_VERSION,
            score_source: ScoreSource::PreNmsClass,
        };
        Self {
            net,
            manifest,
            filter: None,
            detect_threshold: DEFAULT_DETECT_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }

    pub fn net(&self) -> &Arc<ToyNet> {
        &self.net
    }

    pub fn filter(&self) -> Option<&Arc<dyn FeatureFilter>> {
        self.filter.as_ref()
    }

    fn run(&self, image: &ImagePlane, replace: Option<(usize, &Tensor3)>) -> Pass {
        let letterbox = Letterbox::new(image.height(), image.width(), self.net.input_size);
        let (input, grid) = letterbox.apply(image);
        let input = self.net.normalize(&input);
        let levels = self.net.levels();
        let plan = self.filter.as_ref().map(|f| {
            if f.needs_probe() {
                let probe = self.net.forward(input.clone(), None, replace);
                f.plan(Some(&probe.level_outputs()), levels)
            } else {
                f.plan(None, levels)
            }
        });
        let fwd = self.net.forward(input, plan.as_ref(), replace);
        Pass {
            letterbox,
            grid,
            plan,
            fwd,
        }
    }

    fn detections(&self, pass: &Pass, image: &ImagePlane) -> Vec<Detection> {
        let cands = self.net.decode(&pass.fwd.head, self.detect_threshold);
        let (w, h) = (image.width() as f64, image.height() as f64);
        nms(cands, self.nms_iou)
            .into_iter()
            .filter_map(|(b, conf)| {
                let b = pass.letterbox.to_source(&b);
                let b = BoundingBox {
                    x_min: b.x_min.clamp(0.0, w),
                    y_min: b.y_min.clamp(0.0, h),
                    x_max: b.x_max.clamp(0.0, w),
                    y_max: b.y_max.clamp(0.0, h),
                };
                (b.x_max > b.x_min && b.y_max > b.y_min).then_some(Detection {
                    bbox: b,
                    class: ClassLabel::PERSON,
                    confidence: conf,
                })
            })
            .collect()
    }
}

impl Detector for ToyDetector {
    fn manifest(&self) -> &AdapterManifest {
        &self.manifest
    }

    fn detect(&mut self, image: &ImagePlane) -> Result<Vec<Detection>, GatewayError> {
        let pass = self.run(image, None);
        Ok(self.detections(&pass, image))
    }

    fn person_score(&mut self, image: &ImagePlane) -> Result<f64, GatewayError> {
        let pass = self.run(image, None);
        Ok(self.net.person_score(&pass.fwd.head).0)
    }

    fn person_score_and_grad(&mut self, image: &ImagePlane) -> Result<(f64, Tensor3), GatewayError> {
        let pass = self.run(image, None);
        let (score, gh) = self.net.person_score_head_grad(&pass.fwd.head);
        let (_, gi) = self.net.backward(&pass.fwd, pass.plan.as_ref(), &gh, false, true);
        let mut gi = gi.expect("input grads requested");
        self.net.denormalize_grad(&mut gi);
        let g = match &pass.grid {
            Some(grid) => grid.backward(&gi),
            None => gi,
        };
        Ok((score, g))
    }

    fn feature_taps(&mut self, image: &ImagePlane) -> Result<Vec<FeatureTap>, GatewayError> {
        let pass = self.run(image, None);
        Ok((0..self.net.levels())
            .map(|l| FeatureTap {
                layer: ToyNet::level_name(l),
                level: l,
                features: pass.fwd.inputs[l + 1].clone(),
            })
            .collect())
    }

    fn detect_with_tap_override(&mut self, image: &ImagePlane, tap: &FeatureTap) -> Result<Vec<Detection>, GatewayError> {
        if tap.level >= self.net.levels() {
            return Err(GatewayError::Adapter {
                adapter: self.manifest.name.clone(),
                message: format!("no feature level {}", tap.level),
            });
        }
        let pass = self.run(image, Some((tap.level, &tap.features)));
        Ok(self.detections(&pass, image))
    }

    fn set_feature_filter(&mut self, filter: Option<Arc<dyn FeatureFilter>>) -> Result<(), GatewayError> {
        self.filter = filter;
        Ok(())
    }

    fn try_clone(&self) -> Result<Box<dyn Detector>, GatewayError> {
        Ok(Box::new(self.clone()))
    }
}
