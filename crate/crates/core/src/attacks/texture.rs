use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::{descend, Targets};
use super::run::{Artifact, AttackRun};
use super::{init_pixels, AttackError};
use crate::evaluation::{EvalReport, MetricKind};
use crate::gateway::Detector;
use crate::model::{
    quantize_rgb8, EvalConfig, FrameTruth, ImagePlane, LabeledBox, LatentTextureMap, OptimConfig, Tensor3,
};
use crate::toyworld::{generate_staged_scenes, StagedScene, WorldConfig};
use crate::transforms::{
    apply_color_eot, jitter_crop_at, jitter_crop_backward, jitter_offsets, render_scene, tps_warp, EotParams,
    EotRanges, PersonRenderer, TpsConfig, TpsWarp,
};

/// Disjoint train and test backgrounds with the placement of the attacker.
pub struct SceneBatch {
    pub train: Vec<StagedScene>,
    pub test: Vec<StagedScene>,
    pub renderer: Arc<dyn PersonRenderer>,
}

impl SceneBatch {
    pub fn new(train: Vec<StagedScene>, test: Vec<StagedScene>, renderer: Arc<dyn PersonRenderer>) -> Result<Self, AttackError> {
        if train.is_empty() {
            return Err(AttackError::EmptyDataset("no training scenes"));
        }
        let ids: HashSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
        if let Some(s) = test.iter().find(|s| ids.contains(s.id.as_str())) {
            return Err(AttackError::OverlappingSplits(s.id.clone()));
        }
        Ok(Self { train, test, renderer })
    }

    /// Generated toy scenes; the two splits use unrelated seeds and prefixes.
    pub fn toy(world: &WorldConfig, train: usize, test: usize, seed: u64, renderer: Arc<dyn PersonRenderer>) -> Result<Self, AttackError> {
        Self::new(
            generate_staged_scenes(world, train, seed, "train-"),
            generate_staged_scenes(world, test, seed ^ 0x7e57_7e57_7e57_7e57, "test-"),
            renderer,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureAttackConfig {
    pub optim: OptimConfig,
    /// Edge of the square base texture the renderer consumes.
    pub base_size: usize,
    /// Cloth deformation per draw; `None` disables warping.
    pub tps: Option<TpsConfig>,
    /// Color and noise ranges; the geometric fields are unused for textures.
    pub eot: EotRanges,
}

impl Default for TextureAttackConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            base_size: 32,
            tps: Some(TpsConfig::default()),
            eot: EotRanges::default(),
        }
    }
}

/// One frozen draw of crop offset, warp and color transform.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureDraw {
    pub offset: (usize, usize),
    pub warp: Option<TpsWarp>,
    pub color: EotParams,
}

impl TextureDraw {
    pub fn sample(latent: &LatentTextureMap, config: &TextureAttackConfig, rng: &mut ChaCha8Rng) -> Result<Self, AttackError> {
        let (mh, mw, _) = jitter_offsets(latent);
        let offset = (rng.gen_range(0..=mh), rng.gen_range(0..=mw));
        let warp = match &config.tps {
            Some(t) => Some(TpsWarp::random(latent.base_h, latent.base_w, t, rng)?),
            None => None,
        };
        Ok(Self {
            offset,
            warp,
            color: config.eot.sample(rng),
        })
    }

    pub fn at(offset: (usize, usize)) -> Self {
        Self {
            offset,
            warp: None,
            color: EotParams::identity(),
        }
    }
}

fn render<'a>(
    latent: &'a LatentTextureMap,
    scene: &StagedScene,
    draw: &TextureDraw,
    renderer: &dyn PersonRenderer,
) -> Result<(ImagePlane, impl Fn(&Tensor3) -> Tensor3 + 'a), AttackError> {
    let view = jitter_crop_at(latent, draw.offset);
    let (tex, grid) = match &draw.warp {
        Some(w) => {
            let (t, g) = tps_warp(&view, w);
            (t, Some(g))
        }
        None => (view, None),
    };
    let scene_render = render_scene(renderer, &scene.background, &[(scene.person, &tex)]).map_err(|e| AttackError::Render {
        scene: scene.id.clone(),
        source: e,
    })?;
    let (img, color) = apply_color_eot(&scene_render.image, &draw.color);
    let offset = draw.offset;
    let backward = move |g: &Tensor3| {
        let g = color.backward(g);
        let mut gt = scene_render.texture_grad(0, &g);
        if let Some(grid) = &grid {
            gt = grid.backward(&gt);
        }
        jitter_crop_backward(latent, offset, &gt)
    };
    Ok((img, backward))
}

/// Per-target scores of one rendered scene and the gradient on the latent.
pub fn texture_sample(
    latent: &LatentTextureMap,
    scene: &StagedScene,
    draw: &TextureDraw,
    renderer: &dyn PersonRenderer,
    targets: &mut Targets,
) -> Result<(Vec<(f64, f64)>, Tensor3), AttackError> {
    let (img, backward) = render(latent, scene, draw, renderer)?;
    let (scores, g) = targets.score_and_grad(&img)?;
    Ok((scores, backward(&g)))
}

/// The unoptimized starting texture for `seed`.
pub fn random_texture(config: &TextureAttackConfig) -> Result<LatentTextureMap, AttackError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.optim.seed);
    let (h, w) = LatentTextureMap::latent_dims(config.base_size, config.base_size, config.optim.gamma);
    let px = quantize_rgb8(&ImagePlane::from_tensor_clamped(init_pixels(&mut rng, h, w))?);
    Ok(LatentTextureMap::new(px, config.base_size, config.base_size, config.optim.gamma)?)
}

/// Optimizes a latent clothing texture worn by the person of each train scene.
pub fn optimize_texture(config: &TextureAttackConfig, targets: &mut Targets, batch: &SceneBatch) -> Result<AttackRun, AttackError> {
    if batch.train.is_empty() {
        return Err(AttackError::EmptyDataset("no training scenes"));
    }
    if config.base_size == 0 {
        return Err(AttackError::InvalidArgument("texture size must be positive".into()));
    }
    let start = random_texture(config)?;
    let (base, gamma) = (config.base_size, config.optim.gamma);
    // Same seed as `random_texture`, advanced past the initialization draws.
    let mut rng = ChaCha8Rng::seed_from_u64(config.optim.seed);
    let (h, w) = LatentTextureMap::latent_dims(base, base, gamma);
    let init = init_pixels(&mut rng, h, w);
    let descent = descend(init, &config.optim, batch.train.len(), &mut rng, |px, i, rng| {
        let latent = LatentTextureMap {
            pixels: ImagePlane::from_tensor_clamped(px.clone())?,
            base_w: base,
            base_h: base,
            gamma,
        };
        let draw = TextureDraw::sample(&latent, config, rng)?;
        texture_sample(&latent, &batch.train[i], &draw, batch.renderer.as_ref(), targets)
    })?;
    let pixels = quantize_rgb8(&ImagePlane::from_tensor_clamped(descent.pixels)?);
    Ok(AttackRun {
        config: config.optim.clone(),
        targets: targets.records(),
        history: descent.history,
        best_loss: descent.best_loss,
        artifact: Artifact::Texture(LatentTextureMap::new(pixels, start.base_h, start.base_w, gamma)?),
    })
}

/// Where the texture view is cut from the latent at evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TexturePlacement {
    /// The fixed center crop.
    Eval,
    /// Per-scene offsets drawn uniformly from `[0, max.0] × [0, max.1]`,
    /// wrapping around the latent when they exceed its margin.
    Shifted { max: (usize, usize), seed: u64 },
}

/// Renders every scene with the texture (no warp, no color change) and scores
/// the detector on the result.
pub fn evaluate_texture(
    latent: &LatentTextureMap,
    detector: &mut dyn Detector,
    scenes: &[StagedScene],
    renderer: &dyn PersonRenderer,
    placement: TexturePlacement,
    metric: MetricKind,
    config: &EvalConfig,
) -> Result<EvalReport, AttackError> {
    if scenes.is_empty() {
        return Err(AttackError::EmptyDataset("no evaluation scenes"));
    }
    let mut rng = match placement {
        TexturePlacement::Shifted { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        TexturePlacement::Eval => None,
    };
    let (_, _, eval) = jitter_offsets(latent);
    let mut dets = Vec::with_capacity(scenes.len());
    let mut truths = Vec::with_capacity(scenes.len());
    for s in scenes {
        let offset = match (placement, rng.as_mut()) {
            (TexturePlacement::Shifted { max, .. }, Some(r)) => (r.gen_range(0..=max.0), r.gen_range(0..=max.1)),
            _ => eval,
        };
        let (img, _) = render(latent, s, &TextureDraw::at(offset), renderer)?;
        dets.push(detector.detect(&img)?);
        truths.push(FrameTruth::new(s.id.clone(), vec![LabeledBox::person(s.person.bbox())]));
    }
    Ok(EvalReport::compute(metric, dets, truths, config)?)
}
