//! Synthetic person-on-background scenes.
//!
//! The built-in world is small enough to train and attack a detector on one
//! CPU core: smooth backgrounds with a few hard-edged distractors, and
//! billboard persons wearing one of several clothing styles.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{FrameTruth, ImagePlane, LabeledBox};
use crate::transforms::render::{render_scene, BillboardRenderer, PersonSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Square canvas edge in pixels.
    pub canvas: usize,
    /// Person height range in pixels.
    pub person_height: (f64, f64),
    /// Width / height ratio range.
    pub aspect: (f64, f64),
    pub max_persons: usize,
    /// Fraction of generated scenes with nobody in them.
    pub empty_fraction: f64,
    pub max_distractors: usize,
    /// Edge of square clothing textures.
    pub texture_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            person_height: (30.0, 44.0),
            aspect: (0.38, 0.46),
            max_persons: 2,
            empty_fraction: 0.15,
            max_distractors: 3,
            texture_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClothingKind {
    Solid,
    TwoTone,
    Stripes,
    Smooth,
    Noise,
}

impl ClothingKind {
    pub const ALL: [ClothingKind; 5] = [Self::Solid, Self::TwoTone, Self::Stripes, Self::Smooth, Self::Noise];
}

/// One generated frame.
#[derive(Debug, Clone)]
pub struct ToyScene {
    pub image: ImagePlane,
    pub truth: FrameTruth,
    pub persons: Vec<PersonSpec>,
}

fn color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

const SKIN_TONES: [[f64; 3]; 5] = [
    [0.96, 0.80, 0.69],
    [0.87, 0.67, 0.52],
    [0.76, 0.57, 0.42],
    [0.55, 0.38, 0.26],
    [0.36, 0.24, 0.16],
];

/// Smooth two-color gradient with soft blobs and a few sharp rectangles.
pub fn background<R: Rng + ?Sized>(rng: &mut R, size: usize, max_distractors: usize) -> ImagePlane {
    let a = color(rng);
    let b = color(rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let blobs: Vec<([f64; 3], f64, f64, f64, f64)> = (0..rng.gen_range(1..=3))
        .map(|_| {
            (
                color(rng),
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.1..0.3) * size as f64,
                rng.gen_range(0.3..0.7),
            )
        })
        .collect();
    let s = size as f64;
    let mut img: Vec<f64> = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = ((x as f64 + 0.5) / s - 0.5, (y as f64 + 0.5) / s - 0.5);
            let t = (0.5 + ca * px + sa * py).clamp(0.0, 1.0);
            let mut p = [0.0; 3];
            for c in 0..3 {
                p[c] = a[c] * (1.0 - t) + b[c] * t;
            }
            for (col, bx, by, r, amp) in &blobs {
                let d2 = ((x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2)) / (r * r);
                let k = amp * (-d2).exp();
                for c in 0..3 {
                    p[c] = p[c] * (1.0 - k) + col[c] * k;
                }
            }
            img.extend_from_slice(&p);
        }
    }
    for _ in 0..rng.gen_range(0..=max_distractors) {
        let col = color(rng);
        // poles are tall and thin, boxes are anything else
        let (w, h) = if rng.gen_bool(0.3) {
            (rng.gen_range(2.0..6.0), rng.gen_range(0.3..0.8) * s)
        } else {
            (rng.gen_range(4.0..0.35 * s), rng.gen_range(4.0..0.35 * s))
        };
        let x0 = rng.gen_range(-0.1 * s..s - 0.5 * w);
        let y0 = rng.gen_range(-0.1 * s..s - 0.5 * h);
        for y in (y0.max(0.0) as usize)..((y0 + h).min(s) as usize) {
            for x in (x0.max(0.0) as usize)..((x0 + w).min(s) as usize) {
                let i = (y * size + x) * 3;
                img[i..i + 3].copy_from_slice(&col);
            }
        }
    }
    ImagePlane::from_clamped(size, size, img).expect("non-empty canvas")
}

/// A clothing texture in the given style.
pub fn clothing_texture<R: Rng + ?Sized>(kind: ClothingKind, rng: &mut R, size: usize) -> ImagePlane {
    let a = color(rng);
    let b = color(rng);
    let n = size as f64;
    match kind {
        ClothingKind::Solid => ImagePlane::filled(size, size, a),
        ClothingKind::TwoTone => {
            // shirt rows end where the legs begin on the billboard
            let split = (0.487 * n).round() as usize;
            ImagePlane::from_fn(size, size, |y, _| if y < split { a } else { b })
        }
        ClothingKind::Stripes => {
            let period = rng.gen_range(3..=8);
            let vertical = rng.gen_bool(0.3);
            ImagePlane::from_fn(size, size, |y, x| {
                let k = if vertical { x } else { y };
                if (k / period) % 2 == 0 {
                    a
                } else {
                    b
                }
            })
        }
        ClothingKind::Smooth => {
            let fx: f64 = rng.gen_range(0.5..2.5);
            let fy: f64 = rng.gen_range(0.5..2.5);
            let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            ImagePlane::from_fn(size, size, |y, x| {
                let t = 0.5
                    + 0.5
                        * ((fx * x as f64 / n * std::f64::consts::TAU + ph).sin()
                            * (fy * y as f64 / n * std::f64::consts::TAU).cos());
                [
                    a[0] * (1.0 - t) + b[0] * t,
                    a[1] * (1.0 - t) + b[1] * t,
                    a[2] * (1.0 - t) + b[2] * t,
                ]
            })
        }
        ClothingKind::Noise => {
            let amp: f64 = rng.gen_range(0.2..0.5);
            let mut data = Vec::with_capacity(size * size * 3);
            for _ in 0..size * size {
                for c in 0..3 {
                    data.push(a[c] + amp * (rng.gen::<f64>() - 0.5) * 2.0);
                }
            }
            ImagePlane::from_clamped(size, size, data).expect("non-empty texture")
        }
    }
}

/// Samples a person whose box lies inside the canvas.
pub fn sample_person<R: Rng + ?Sized>(rng: &mut R, cfg: &WorldConfig) -> PersonSpec {
    let s = cfg.canvas as f64;
    let height = rng.gen_range(cfg.person_height.0..=cfg.person_height.1).min(s - 2.0);
    let width = height * rng.gen_range(cfg.aspect.0..=cfg.aspect.1);
    let cx = rng.gen_range(width / 2.0 + 1.0..=s - width / 2.0 - 1.0);
    let top = rng.gen_range(1.0..=s - height - 1.0);
    PersonSpec {
        cx,
        top,
        height,
        width,
        skin: *SKIN_TONES.choose(rng).expect("non-empty"),
    }
}

fn overlaps(a: &PersonSpec, b: &PersonSpec) -> bool {
    (a.cx - b.cx).abs() < 0.5 * (a.width + b.width) + 2.0
}

/// Up to `cfg.max_persons` people with no horizontal overlap.
pub fn sample_people<R: Rng + ?Sized>(rng: &mut R, cfg: &WorldConfig) -> Vec<PersonSpec> {
    if rng.gen_bool(cfg.empty_fraction) {
        return Vec::new();
    }
    let count = rng.gen_range(1..=cfg.max_persons.max(1));
    let mut people: Vec<PersonSpec> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..10 {
            let p = sample_person(rng, cfg);
            if people.iter().all(|q| !overlaps(&p, q)) {
                people.push(p);
                break;
            }
        }
    }
    people
}

fn truth_for(id: String, people: &[PersonSpec]) -> FrameTruth {
    FrameTruth::new(id, people.iter().map(|p| LabeledBox::person(p.bbox())).collect())
}

/// A clean scene: people in ordinary clothing.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &WorldConfig, id: String) -> ToyScene {
    let bg = background(rng, cfg.canvas, cfg.max_distractors);
    let people = sample_people(rng, cfg);
    let textures: Vec<ImagePlane> = people
        .iter()
        .map(|_| {
            let kind = *ClothingKind::ALL.choose(rng).expect("non-empty");
            clothing_texture(kind, rng, cfg.texture_size)
        })
        .collect();
    let pairs: Vec<(PersonSpec, &ImagePlane)> = people.iter().copied().zip(textures.iter()).collect();
    let image = render_scene(&BillboardRenderer::default(), &bg, &pairs)
        .expect("billboard rendering of sampled people")
        .image;
    ToyScene {
        image,
        truth: truth_for(id, &people),
        persons: people,
    }
}

/// `n` scenes; scene `i` depends only on `(seed, i)`.
pub fn generate_scenes(cfg: &WorldConfig, n: usize, seed: u64, prefix: &str) -> Vec<ToyScene> {
    (0..n)
        .map(|i| {
            let mut rng = scene_rng(seed, i);
            generate_scene(&mut rng, cfg, format!("{prefix}{i:05}"))
        })
        .collect()
}

/// Scenes guaranteed to contain exactly one person.
pub fn generate_single_person_scenes(cfg: &WorldConfig, n: usize, seed: u64, prefix: &str) -> Vec<ToyScene> {
    let single = WorldConfig {
        max_persons: 1,
        empty_fraction: 0.0,
        ..cfg.clone()
    };
    generate_scenes(&single, n, seed, prefix)
}

pub(crate) fn scene_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

/// Background plus the placement of the person who wears the attack texture.
#[derive(Debug, Clone)]
pub struct StagedScene {
    pub id: String,
    pub background: ImagePlane,
    pub person: PersonSpec,
}

pub fn generate_staged_scenes(cfg: &WorldConfig, n: usize, seed: u64, prefix: &str) -> Vec<StagedScene> {
    (0..n)
        .map(|i| {
            let mut rng = scene_rng(seed, i);
            let background = background(&mut rng, cfg.canvas, cfg.max_distractors);
            let person = sample_person(&mut rng, cfg);
            StagedScene {
                id: format!("{prefix}{i:05}"),
                background,
                person,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_reproducible() {
        let cfg = WorldConfig::default();
        let a = generate_scenes(&cfg, 3, 7, "s");
        let b = generate_scenes(&cfg, 3, 7, "s");
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.truth, y.truth);
        }
    }

    #[test]
    fn people_stay_on_canvas() {
        let cfg = WorldConfig::default();
        for s in generate_scenes(&cfg, 50, 3, "s") {
            for b in s.truth.person_boxes() {
                assert!(b.x_min >= 0.0 && b.y_min >= 0.0);
                assert!(b.x_max <= 64.0 && b.y_max <= 64.0);
            }
        }
    }

    #[test]
    fn single_person_scenes_have_one_person() {
        let cfg = WorldConfig::default();
        for s in generate_single_person_scenes(&cfg, 20, 1, "p") {
            assert_eq!(s.truth.boxes.len(), 1);
        }
    }
}
