//! Local gradient smoothing.

use serde::{Deserialize, Serialize};

use crate::model::{ImagePlane, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LgsParams {
    pub lambda: f64,
    pub threshold: f64,
    pub block: usize,
}

impl Default for LgsParams {
    fn default() -> Self {
        Self {
            lambda: 2.3,
            threshold: 0.1,
            block: 15,
        }
    }
}

/// Per-pixel suppression factor `clamp(1 − λ·ĝ, 0, 1)`.
///
/// `ĝ` is the forward-difference gradient magnitude (max over channels)
/// divided by its image maximum. Inside each `block × block` tile whose mean
/// `ĝ` is below the threshold, and at any pixel whose own `ĝ` is below it,
/// `ĝ` is set to zero.
pub fn lgs_factor(image: &ImagePlane, p: &LgsParams) -> Vec<f64> {
    lgs_analysis(image, p).factor
}

struct Analysis {
    factor: Vec<f64>,
    /// Per pixel: winning channel and its `(dx, dy, magnitude)`.
    local: Vec<(usize, f64, f64, f64)>,
    gmax: f64,
    argmax: usize,
    /// Pixels where the factor depends smoothly on the magnitude.
    active: Vec<bool>,
}

fn lgs_analysis(image: &ImagePlane, p: &LgsParams) -> Analysis {
    let (h, w) = (image.height(), image.width());
    let mut local = vec![(0, 0.0, 0.0, 0.0); h * w];
    for y in 0..h {
        for x in 0..w {
            let here = image.pixel(y, x);
            let right = if x + 1 < w { image.pixel(y, x + 1) } else { here };
            let down = if y + 1 < h { image.pixel(y + 1, x) } else { here };
            let mut best = (0, 0.0, 0.0, 0.0);
            for c in 0..3 {
                let dx = right[c] - here[c];
                let dy = down[c] - here[c];
                let m = (dx * dx + dy * dy).sqrt();
                if m > best.3 {
                    best = (c, dx, dy, m);
                }
            }
            local[y * w + x] = best;
        }
    }
    let (argmax, gmax) = local
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, l)| if l.3 > acc.1 { (i, l.3) } else { acc });
    if gmax <= 0.0 || p.lambda == 0.0 {
        return Analysis {
            factor: vec![1.0; h * w],
            local,
            gmax,
            argmax,
            active: vec![false; h * w],
        };
    }
    let mut g: Vec<f64> = local
        .iter()
        .map(|l| {
            let v = l.3 / gmax;
            if v < p.threshold {
                0.0
            } else {
                v
            }
        })
        .collect();
    let b = p.block.max(1);
    for ty in (0..h).step_by(b) {
        for tx in (0..w).step_by(b) {
            let (y1, x1) = ((ty + b).min(h), (tx + b).min(w));
            let n = ((y1 - ty) * (x1 - tx)) as f64;
            let mean: f64 = (ty..y1).map(|y| g[y * w + tx..y * w + x1].iter().sum::<f64>()).sum::<f64>() / n;
            if mean < p.threshold {
                for y in ty..y1 {
                    g[y * w + tx..y * w + x1].fill(0.0);
                }
            }
        }
    }
    let active = g.iter().map(|&v| v > 0.0 && p.lambda * v < 1.0).collect();
    Analysis {
        factor: g.into_iter().map(|v| (1.0 - p.lambda * v).clamp(0.0, 1.0)).collect(),
        local,
        gmax,
        argmax,
        active,
    }
}

/// Backward pass of [`lgs_forward`]. Threshold decisions are held fixed; the
/// dependence of the factor on local and maximum magnitudes is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct LgsTrace {
    height: usize,
    width: usize,
    lambda: f64,
    input: Vec<f64>,
    analysis_factor: Vec<f64>,
    local: Vec<(usize, f64, f64, f64)>,
    gmax: f64,
    argmax: usize,
    active: Vec<bool>,
}

impl LgsTrace {
    pub fn factor(&self) -> &[f64] {
        &self.analysis_factor
    }

    /// Adds `s·∂m(i)/∂x` to `out`, where `m(i)` is pixel `i`'s magnitude.
    fn add_magnitude_grad(&self, out: &mut Tensor3, i: usize, s: f64) {
        let (c, dx, dy, m) = self.local[i];
        if m <= 0.0 {
            return;
        }
        let (y, x) = (i / self.width, i % self.width);
        if x + 1 < self.width {
            out.add_at(y, x + 1, c, s * dx / m);
            out.add_at(y, x, c, -s * dx / m);
        }
        if y + 1 < self.height {
            out.add_at(y + 1, x, c, s * dy / m);
            out.add_at(y, x, c, -s * dy / m);
        }
    }

    pub fn backward(&self, grad: &Tensor3) -> Tensor3 {
        let mut out = grad.clone();
        for (px, &f) in out.data_mut().chunks_exact_mut(3).zip(&self.analysis_factor) {
            px.iter_mut().for_each(|v| *v *= f);
        }
        let mut to_max = 0.0;
        for i in 0..self.active.len() {
            if !self.active[i] {
                continue;
            }
            // out_c = x_c·(1 − λ·m/M)
            let a: f64 = (0..3).map(|c| grad.data()[i * 3 + c] * self.input[i * 3 + c]).sum::<f64>() * -self.lambda;
            self.add_magnitude_grad(&mut out, i, a / self.gmax);
            to_max -= a * self.local[i].3 / (self.gmax * self.gmax);
        }
        if to_max != 0.0 {
            self.add_magnitude_grad(&mut out, self.argmax, to_max);
        }
        out
    }
}

/// LGS output with the trace for its backward pass.
pub fn lgs_forward(image: &ImagePlane, p: &LgsParams) -> (ImagePlane, LgsTrace) {
    let a = lgs_analysis(image, p);
    let out = apply_factor(image, &a.factor);
    let trace = LgsTrace {
        height: image.height(),
        width: image.width(),
        lambda: p.lambda,
        input: image.data().to_vec(),
        analysis_factor: a.factor,
        local: a.local,
        gmax: a.gmax,
        argmax: a.argmax,
        active: a.active,
    };
    (out, trace)
}

pub fn lgs_preprocess(image: &ImagePlane, p: &LgsParams) -> ImagePlane {
    apply_factor(image, &lgs_factor(image, p))
}

pub(crate) fn apply_factor(image: &ImagePlane, factor: &[f64]) -> ImagePlane {
    let data = image
        .data()
        .chunks_exact(3)
        .zip(factor)
        .flat_map(|(px, &f)| px.iter().map(move |v| v * f))
        .collect();
    ImagePlane::from_clamped(image.height(), image.width(), data).expect("same dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step() -> ImagePlane {
        ImagePlane::from_fn(4, 4, |_, x| if x < 2 { [0.0; 3] } else { [1.0; 3] })
    }

    #[test]
    fn constant_image_is_unchanged() {
        let img = ImagePlane::filled(8, 8, [0.4, 0.5, 0.6]);
        assert_eq!(lgs_preprocess(&img, &LgsParams::default()), img);
    }

    #[test]
    fn zero_lambda_is_identity() {
        let p = LgsParams {
            lambda: 0.0,
            ..LgsParams::default()
        };
        assert_eq!(lgs_preprocess(&step(), &p), step());
    }

    #[test]
    fn step_edge_is_suppressed_and_flat_is_not() {
        let p = LgsParams {
            lambda: 0.6,
            threshold: 0.1,
            block: 15,
        };
        let f = lgs_factor(&step(), &p);
        for y in 0..4 {
            for x in 0..4 {
                // forward differences put the edge on column 1
                let want = if x == 1 { 0.4 } else { 1.0 };
                assert!((f[y * 4 + x] - want).abs() < 1e-12, "({y},{x}) {}", f[y * 4 + x]);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let img = ImagePlane::from_fn(12, 12, |y, x| {
            let base = if (4..9).contains(&y) && (3..10).contains(&x) { 0.2 } else { 0.6 };
            [base + rng.gen_range(0.0..0.15), base + rng.gen_range(0.0..0.15), 0.5]
        });
        let p = LgsParams {
            lambda: 0.8,
            threshold: 0.05,
            block: 4,
        };
        let weights: Vec<f64> = (0..img.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wt = Tensor3::new(12, 12, 3, weights.clone()).unwrap();
        let obj = |im: &ImagePlane| -> f64 { lgs_preprocess(im, &p).data().iter().zip(&weights).map(|(a, b)| a * b).sum() };
        let (_, trace) = lgs_forward(&img, &p);
        let g = trace.backward(&wt);
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..img.data().len() {
            let mut plus = img.data().to_vec();
            let mut minus = img.data().to_vec();
            plus[i] += eps;
            minus[i] -= eps;
            let fd = (obj(&ImagePlane::new(12, 12, plus).unwrap()) - obj(&ImagePlane::new(12, 12, minus).unwrap())) / (2.0 * eps);
            worst = worst.max((fd - g.data()[i]).abs() / fd.abs().max(1e-3));
        }
        assert!(worst < 1e-4, "relative error {worst}");
    }
}
