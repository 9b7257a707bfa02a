//! Universal defensive frame: a learned border painted over the image
//! margins, trained against a co-evolving adversarial patch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DefenseError;
use crate::gateway::Detector;
use crate::model::{ImagePlane, PatchSpec, Tensor3};
use crate::optim::{project_unit, Adam};
use crate::toyworld::ToyScene;
use crate::transforms::{apply_patch_to_boxes, EotRanges};

#[derive(Debug, Clone, PartialEq)]
pub struct DefensiveFrame {
    pub width: usize,
    /// Full-size image; only the border of `width` pixels is used.
    pub pixels: ImagePlane,
}

impl DefensiveFrame {
    pub fn new(width: usize, pixels: ImagePlane) -> Result<Self, DefenseError> {
        if 2 * width >= pixels.height().min(pixels.width()) {
            return Err(DefenseError::FrameTooWide {
                width,
                height: pixels.height(),
                image_width: pixels.width(),
            });
        }
        Ok(Self { width, pixels })
    }

    pub fn gray(width: usize, height: usize, image_width: usize) -> Result<Self, DefenseError> {
        Self::new(width, ImagePlane::filled(height, image_width, [0.5; 3]))
    }

    pub fn border(&self) -> Vec<bool> {
        border_mask(self.pixels.height(), self.pixels.width(), self.width)
    }
}

pub fn border_mask(h: usize, w: usize, width: usize) -> Vec<bool> {
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            y < width || x < width || y + width >= h || x + width >= w
        })
        .collect()
}

/// Overwrites the image border with the frame.
pub fn apply_frame(image: &ImagePlane, frame: &DefensiveFrame) -> Result<ImagePlane, DefenseError> {
    if frame.width == 0 {
        return Ok(image.clone());
    }
    if image.height() != frame.pixels.height() || image.width() != frame.pixels.width() {
        return Err(DefenseError::InvalidParameter(format!(
            "frame is {}x{}, image is {}x{}",
            frame.pixels.height(),
            frame.pixels.width(),
            image.height(),
            image.width()
        )));
    }
    let border = frame.border();
    let mut data = image.data().to_vec();
    for (i, (px, &b)) in data.chunks_exact_mut(3).zip(&border).enumerate() {
        if b {
            px.copy_from_slice(&frame.pixels.data()[i * 3..i * 3 + 3]);
        }
    }
    Ok(ImagePlane::from_clamped(image.height(), image.width(), data).expect("same dims"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UdfParams {
    pub frame_width: usize,
    pub epochs: usize,
    /// Patch updates per outer step.
    pub inner_steps: usize,
    pub patch_size: usize,
    pub c0: f64,
    pub kappa: f64,
    pub patch_lr: f64,
    pub frame_lr: f64,
    pub seed: u64,
}

impl Default for UdfParams {
    fn default() -> Self {
        Self {
            frame_width: 2,
            epochs: 2,
            inner_steps: 2,
            patch_size: 16,
            c0: PatchSpec::DEFAULT_C0,
            kappa: 1.5,
            patch_lr: 0.03,
            frame_lr: 0.01,
            seed: 0,
        }
    }
}

/// Alternates patch steps that lower the framed detector's person score with
/// frame steps that raise it. The frame is projected into `[0, 1]` after
/// every outer step.
pub fn udf_train(params: &UdfParams, detector: &mut dyn Detector, scenes: &[ToyScene]) -> Result<DefensiveFrame, DefenseError> {
    let scenes: Vec<&ToyScene> = scenes.iter().filter(|s| s.truth.person_boxes().next().is_some()).collect();
    let first = scenes
        .first()
        .ok_or_else(|| DefenseError::InvalidParameter("frame training needs scenes with people".into()))?;
    let (h, w) = (first.image.height(), first.image.width());
    let mut frame = DefensiveFrame::gray(params.frame_width, h, w)?;
    let border = frame.border();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = params.patch_size;
    let init: Vec<f64> = (0..n * n * 3).map(|_| rng.gen_range(0.3..0.7)).collect();
    let mut patch = PatchSpec::new(ImagePlane::new(n, n, init).expect("in range"), params.c0, params.kappa)?;
    let mut patch_opt = Adam::new(params.patch_lr, n * n * 3);
    let mut frame_opt = Adam::new(params.frame_lr, h * w * 3);
    let ranges = EotRanges::default();
    for _ in 0..params.epochs {
        for s in &scenes {
            let placements: Vec<_> = s.truth.person_boxes().map(|b| (*b, ranges.sample(&mut rng))).collect();
            for _ in 0..params.inner_steps {
                let comp = apply_patch_to_boxes(&s.image, &patch, &placements)?;
                let framed = apply_frame(&comp.image, &frame)?;
                let (_, mut g) = detector.person_score_and_grad(&framed)?;
                zero_pixels(&mut g, &border);
                let gp = comp.trace.backward(&g);
                let mut px = patch.pixels.data().to_vec();
                patch_opt.step(&mut px, gp.data());
                project_unit(&mut px);
                patch.pixels = ImagePlane::new(n, n, px).expect("projected");
            }
            let comp = apply_patch_to_boxes(&s.image, &patch, &placements)?;
            let framed = apply_frame(&comp.image, &frame)?;
            let (_, g) = detector.person_score_and_grad(&framed)?;
            // ascend the score on border pixels only
            let mut gf: Vec<f64> = g.data().iter().map(|v| -v).collect();
            for (px, &b) in gf.chunks_exact_mut(3).zip(&border) {
                if !b {
                    px.fill(0.0);
                }
            }
            let mut fp = frame.pixels.data().to_vec();
            frame_opt.step(&mut fp, &gf);
            project_unit(&mut fp);
            frame.pixels = ImagePlane::new(h, w, fp).expect("projected");
        }
    }
    Ok(frame)
}

pub(crate) fn zero_pixels(g: &mut Tensor3, mask: &[bool]) {
    for (px, &m) in g.data_mut().chunks_exact_mut(3).zip(mask) {
        if m {
            px.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_width_frame_is_identity() {
        let img = ImagePlane::from_fn(8, 8, |y, x| [y as f64 / 8.0, x as f64 / 8.0, 0.2]);
        let f = DefensiveFrame::new(0, ImagePlane::filled(8, 8, [1.0; 3])).unwrap();
        assert_eq!(apply_frame(&img, &f).unwrap(), img);
    }

    #[test]
    fn frame_covering_everything_is_rejected() {
        assert!(matches!(
            DefensiveFrame::gray(4, 8, 8),
            Err(DefenseError::FrameTooWide { .. })
        ));
    }

    #[test]
    fn frame_overwrites_only_the_border() {
        let img = ImagePlane::filled(6, 6, [0.0; 3]);
        let f = DefensiveFrame::new(1, ImagePlane::filled(6, 6, [1.0; 3])).unwrap();
        let out = apply_frame(&img, &f).unwrap();
        assert_eq!(out.pixel(0, 3), [1.0; 3]);
        assert_eq!(out.pixel(5, 5), [1.0; 3]);
        assert_eq!(out.pixel(2, 3), [0.0; 3]);
    }
}
