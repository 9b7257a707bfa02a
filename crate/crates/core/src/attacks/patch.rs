use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::{descend, Targets};
use super::run::{Artifact, AttackRun};
use super::{init_pixels, AttackError};
use crate::evaluation::{EvalReport, LoadedFrame, MetricKind};
use crate::gateway::Detector;
use crate::model::{quantize_rgb8, BoundingBox, EvalConfig, ImagePlane, OptimConfig, PatchSpec, Tensor3};
use crate::transforms::{apply_patch_to_boxes, EotParams, EotRanges};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchAttackConfig {
    pub optim: OptimConfig,
    /// Patch edge in pixels; the placed size depends only on `c0·κ`.
    pub resolution: usize,
    pub c0: f64,
    pub kappa: f64,
    pub eot: EotRanges,
}

impl Default for PatchAttackConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            resolution: 32,
            c0: PatchSpec::DEFAULT_C0,
            kappa: 1.0,
            eot: EotRanges::default(),
        }
    }
}

/// One EoT draw per person box of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDraw {
    pub placements: Vec<(BoundingBox, EotParams)>,
}

impl PatchDraw {
    pub fn sample(frame: &LoadedFrame, ranges: &EotRanges, rng: &mut ChaCha8Rng) -> Self {
        Self {
            placements: frame.truth.person_boxes().map(|b| (*b, ranges.sample(rng))).collect(),
        }
    }

    pub fn identity(frame: &LoadedFrame) -> Self {
        Self {
            placements: frame.truth.person_boxes().map(|b| (*b, EotParams::identity())).collect(),
        }
    }
}

/// Per-target scores of the patched frame and the gradient on patch pixels.
pub fn patch_sample(
    patch: &PatchSpec,
    image: &ImagePlane,
    draw: &PatchDraw,
    targets: &mut Targets,
) -> Result<(Vec<(f64, f64)>, Tensor3), AttackError> {
    let comp = apply_patch_to_boxes(image, patch, &draw.placements)?;
    let (scores, g) = targets.score_and_grad(&comp.image)?;
    Ok((scores, comp.trace.backward(&g)))
}

/// The unoptimized starting patch for `seed`.
pub fn random_patch(config: &PatchAttackConfig) -> Result<PatchSpec, AttackError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.optim.seed);
    let px = init_pixels(&mut rng, config.resolution, config.resolution);
    Ok(PatchSpec::new(quantize_rgb8(&ImagePlane::from_tensor_clamped(px)?), config.c0, config.kappa)?)
}

/// Optimizes one patch placed on every person box of every frame.
pub fn optimize_patch(config: &PatchAttackConfig, targets: &mut Targets, frames: &[LoadedFrame]) -> Result<AttackRun, AttackError> {
    if frames.is_empty() {
        return Err(AttackError::EmptyDataset("no frames"));
    }
    if config.resolution == 0 {
        return Err(AttackError::InvalidArgument("patch resolution must be positive".into()));
    }
    let surface: Vec<&LoadedFrame> = frames.iter().filter(|f| f.truth.person_boxes().next().is_some()).collect();
    if surface.is_empty() {
        return Err(AttackError::EmptyAttackSurface);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.optim.seed);
    let init = init_pixels(&mut rng, config.resolution, config.resolution);
    let (c0, kappa) = (config.c0, config.kappa);
    let descent = descend(init, &config.optim, surface.len(), &mut rng, |px, i, rng| {
        let patch = PatchSpec {
            pixels: ImagePlane::from_tensor_clamped(px.clone())?,
            c0,
            kappa,
        };
        let draw = PatchDraw::sample(surface[i], &config.eot, rng);
        patch_sample(&patch, &surface[i].image, &draw, targets)
    })?;
    let pixels = quantize_rgb8(&ImagePlane::from_tensor_clamped(descent.pixels)?);
    Ok(AttackRun {
        config: config.optim.clone(),
        targets: targets.records(),
        history: descent.history,
        best_loss: descent.best_loss,
        artifact: Artifact::Patch(PatchSpec::new(pixels, c0, kappa)?),
    })
}

/// Places the patch without randomization on every person box and scores the
/// detector on the result.
pub fn evaluate_patch(
    patch: &PatchSpec,
    detector: &mut dyn Detector,
    frames: &[LoadedFrame],
    metric: MetricKind,
    config: &EvalConfig,
) -> Result<EvalReport, AttackError> {
    let mut dets = Vec::with_capacity(frames.len());
    for f in frames {
        let draw = PatchDraw::identity(f);
        let img = if draw.placements.is_empty() {
            f.image.clone()
        } else {
            apply_patch_to_boxes(&f.image, patch, &draw.placements)?.image
        };
        dets.push(detector.detect(&img)?);
    }
    let truths = frames.iter().map(|f| f.truth.clone()).collect();
    Ok(EvalReport::compute(metric, dets, truths, config)?)
}
