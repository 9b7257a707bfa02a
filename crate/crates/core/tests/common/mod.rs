#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use advtex_core::defenses::{at_train_toy, DefenseDefaults};
use advtex_core::gateway::toynet::train_toy;
use advtex_core::gateway::{ToyNet, ToyTrainConfig};
use advtex_core::model::{BoundingBox, ClassLabel, Detection, EvalConfig, FrameTruth, LabeledBox};
use rand::seq::SliceRandom;
use rand::Rng;

/// Trained weights are shared by every test binary of the workspace.
pub fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("advtex-nets")
}

pub fn toy_net() -> Arc<ToyNet> {
    static NET: OnceLock<Arc<ToyNet>> = OnceLock::new();
    NET.get_or_init(|| Arc::new(train_toy(&ToyTrainConfig::default(), Some(&cache_dir()))))
        .clone()
}

pub fn robust_net() -> Arc<ToyNet> {
    static NET: OnceLock<Arc<ToyNet>> = OnceLock::new();
    NET.get_or_init(|| {
        let at = DefenseDefaults::shipped().at;
        Arc::new(at_train_toy(&ToyTrainConfig::default(), &toy_net(), &at, Some(&cache_dir())))
    })
    .clone()
}

// ---- exact rational arithmetic for the AP oracle

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frac {
    pub num: u128,
    pub den: u128,
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Frac {
    pub fn new(num: u128, den: u128) -> Self {
        let g = gcd(num, den).max(1);
        Frac { num: num / g, den: den / g }
    }
    pub fn zero() -> Self {
        Frac { num: 0, den: 1 }
    }
    pub fn add(self, o: Frac) -> Frac {
        Frac::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }
    pub fn mul(self, o: Frac) -> Frac {
        Frac::new(self.num * o.num, self.den * o.den)
    }
    pub fn lt(self, o: Frac) -> bool {
        self.num * o.den < o.num * self.den
    }
    pub fn max(self, o: Frac) -> Frac {
        if self.lt(o) {
            o
        } else {
            self
        }
    }
    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn hand_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let i = w * h;
    i / ((a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - i)
}

/// AP by enumerating every PR point: for each confidence cut the retained
/// detections are matched from scratch, precision and recall are taken as
/// exact fractions, and the area under the precision envelope is summed over
/// recall steps. Confidences must be distinct.
pub fn ap_oracle(dets: &[Vec<Detection>], truths: &[FrameTruth], cfg: &EvalConfig) -> Frac {
    let mut all: Vec<(usize, Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(f, d)| d.iter().filter(|d| d.class == cfg.target_class).map(move |d| (f, *d)))
        .collect();
    all.sort_by(|a, b| b.1.confidence.partial_cmp(&a.1.confidence).unwrap());
    let npos: usize = truths
        .iter()
        .map(|t| t.boxes.iter().filter(|b| b.class == cfg.target_class).count())
        .sum();
    assert!(npos > 0);
    // (precision, recall) at every cut
    let mut points = Vec::new();
    for cut in 1..=all.len() {
        let mut used: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.boxes.len()]).collect();
        let mut tp = 0u128;
        for (f, d) in &all[..cut] {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in truths[*f].boxes.iter().enumerate() {
                if g.class != cfg.target_class || used[*f][j] {
                    continue;
                }
                let o = hand_iou(&d.bbox, &g.bbox);
                if o >= cfg.iou_threshold && best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                used[*f][j] = true;
                tp += 1;
            }
        }
        points.push((Frac::new(tp, cut as u128), Frac::new(tp, npos as u128)));
    }
    let mut ap = Frac::zero();
    let mut prev = Frac::zero();
    for i in 0..points.len() {
        let r = points[i].1;
        if prev.lt(r) {
            let env = points.iter().filter(|(_, rj)| !rj.lt(r)).fold(Frac::zero(), |m, (p, _)| m.max(*p));
            ap = ap.add(Frac { num: r.num * prev.den - prev.num * r.den, den: r.den * prev.den }.mul(env));
            prev = r;
        }
    }
    ap
}

fn random_box<R: Rng>(rng: &mut R) -> BoundingBox {
    let x = rng.gen_range(0.0..40.0);
    let y = rng.gen_range(0.0..40.0);
    BoundingBox {
        x_min: x,
        y_min: y,
        x_max: x + rng.gen_range(4.0..24.0),
        y_max: y + rng.gen_range(4.0..24.0),
    }
}

/// A small detection problem: up to 5 frames, up to 6 boxes in total per
/// side, distinct confidences, at least one person truth. Detections near a
/// truth are jittered copies of it so matches actually occur.
pub fn random_instance<R: Rng>(rng: &mut R) -> (Vec<Vec<Detection>>, Vec<FrameTruth>) {
    let frames = rng.gen_range(1..=5);
    let mut truths: Vec<FrameTruth> = (0..frames).map(|i| FrameTruth::new(format!("f{i}"), vec![])).collect();
    let ntruth = rng.gen_range(1..=6);
    for _ in 0..ntruth {
        let f = rng.gen_range(0..frames);
        let class = if rng.gen_bool(0.85) { ClassLabel::PERSON } else { ClassLabel::from_index(2).unwrap() };
        truths[f].boxes.push(LabeledBox { bbox: random_box(rng), class });
    }
    if !truths.iter().any(|t| t.person_boxes().next().is_some()) {
        truths[0].boxes.push(LabeledBox::person(random_box(rng)));
    }
    let ndet = rng.gen_range(0..=6);
    let mut confs: Vec<u32> = (1..=64).collect();
    confs.shuffle(rng);
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); frames];
    for k in 0..ndet {
        let f = rng.gen_range(0..frames);
        let bbox = match truths[f].boxes.first() {
            Some(_) if rng.gen_bool(0.7) => {
                let t = truths[f].boxes[rng.gen_range(0..truths[f].boxes.len())].bbox;
                let d = rng.gen_range(-3.0..3.0);
                BoundingBox {
                    x_min: t.x_min + d,
                    y_min: t.y_min,
                    x_max: t.x_max + d,
                    y_max: t.y_max + rng.gen_range(-2.0..2.0),
                }
            }
            _ => random_box(rng),
        };
        let class = if rng.gen_bool(0.9) { ClassLabel::PERSON } else { ClassLabel::from_index(2).unwrap() };
        dets[f].push(Detection {
            bbox,
            class,
            confidence: confs[k] as f64 / 64.0,
        });
    }
    (dets, truths)
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &[f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let up = f(&p);
    p[i] -= 2.0 * h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}
