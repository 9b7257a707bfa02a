//! Patch placement and expectation-over-transformation randomization.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sampling::{bilinear_tap, EdgeMode, Tap};
use super::TransformError;
use crate::model::{BoundingBox, ImagePlane, PatchSpec, Tensor3};

/// Patch edge length `l = κ·c0·d` for a box of diagonal `d`.
pub fn compute_patch_edge(bbox: &BoundingBox, c0: f64, kappa: f64) -> Result<f64, TransformError> {
    if !(c0 > 0.0) || !(kappa > 0.0) {
        return Err(TransformError::InvalidArgument(format!(
            "c0 and kappa must be positive (c0={c0}, kappa={kappa})"
        )));
    }
    let d = bbox.diagonal();
    if !(d > 0.0) || !d.is_finite() {
        return Err(TransformError::DegenerateBox);
    }
    Ok(kappa * c0 * d)
}

/// One concrete draw of the randomized transformations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EotParams {
    /// Offset of the patch center as a fraction of the patch edge.
    pub translate_frac: (f64, f64),
    pub rotation_deg: f64,
    pub brightness_delta: f64,
    pub contrast_factor: f64,
    pub noise_sigma: f64,
    /// Seeds the per-pixel noise field so a draw is reproducible.
    pub noise_seed: u64,
}

impl EotParams {
    pub fn identity() -> Self {
        Self {
            translate_frac: (0.0, 0.0),
            rotation_deg: 0.0,
            brightness_delta: 0.0,
            contrast_factor: 1.0,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }
}

/// Sampling ranges for [`EotParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EotRanges {
    pub translate_frac: f64,
    pub rotation_deg: f64,
    pub brightness_delta: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub noise_sigma: f64,
}

impl Default for EotRanges {
    fn default() -> Self {
        Self {
            translate_frac: 0.1,
            rotation_deg: 20.0,
            brightness_delta: 0.1,
            contrast_min: 0.8,
            contrast_max: 1.2,
            noise_sigma: 0.02,
        }
    }
}

impl EotRanges {
    pub fn none() -> Self {
        Self {
            translate_frac: 0.0,
            rotation_deg: 0.0,
            brightness_delta: 0.0,
            contrast_min: 1.0,
            contrast_max: 1.0,
            noise_sigma: 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> EotParams {
        let sym = |rng: &mut R, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let tx = sym(rng, self.translate_frac);
        let ty = sym(rng, self.translate_frac);
        let rotation_deg = sym(rng, self.rotation_deg);
        let brightness_delta = sym(rng, self.brightness_delta);
        let contrast_factor = if self.contrast_max > self.contrast_min {
            rng.gen_range(self.contrast_min..=self.contrast_max)
        } else {
            self.contrast_min
        };
        EotParams {
            translate_frac: (tx, ty),
            rotation_deg,
            brightness_delta,
            contrast_factor,
            noise_sigma: self.noise_sigma,
            noise_seed: rng.gen(),
        }
    }
}

/// Records which values survived the color clamp, for the backward pass.
#[derive(Debug, Clone)]
pub struct ColorTrace {
    contrast: f64,
    active: Vec<bool>,
}

impl ColorTrace {
    pub fn backward(&self, grad: &Tensor3) -> Tensor3 {
        let mut g = grad.clone();
        for (v, &a) in g.data_mut().iter_mut().zip(&self.active) {
            *v = if a { *v * self.contrast } else { 0.0 };
        }
        g
    }
}

/// `clamp(contrast·x + brightness + noise, 0, 1)` with the noise field drawn
/// from `params.noise_seed`.
pub fn apply_color_eot(pixels: &ImagePlane, params: &EotParams) -> (ImagePlane, ColorTrace) {
    let n = pixels.data().len();
    let mut noise = vec![0.0; n];
    if params.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(params.noise_seed);
        let normal = Normal::new(0.0, params.noise_sigma).expect("finite sigma");
        for v in &mut noise {
            *v = normal.sample(&mut rng);
        }
    }
    let mut active = Vec::with_capacity(n);
    let data: Vec<f64> = pixels
        .data()
        .iter()
        .zip(&noise)
        .map(|(&p, &z)| {
            let v = params.contrast_factor * p + params.brightness_delta + z;
            active.push((0.0..=1.0).contains(&v));
            v.clamp(0.0, 1.0)
        })
        .collect();
    let out = ImagePlane::from_clamped(pixels.height(), pixels.width(), data).expect("same dims");
    (
        out,
        ColorTrace {
            contrast: params.contrast_factor,
            active,
        },
    )
}

/// Where each composited pixel sampled the patch from.
#[derive(Debug, Clone)]
pub struct PatchTrace {
    patch_h: usize,
    patch_w: usize,
    colors: Vec<ColorTrace>,
    /// (image pixel index, placement index, tap into the patch)
    samples: Vec<(usize, usize, Tap)>,
}

impl PatchTrace {
    /// Gradient with respect to the original patch pixels given the gradient
    /// with respect to the composited image.
    pub fn backward(&self, grad_image: &Tensor3) -> Tensor3 {
        let mut per_placement: Vec<Tensor3> = self
            .colors
            .iter()
            .map(|_| Tensor3::zeros(self.patch_h, self.patch_w, 3))
            .collect();
        let gi = grad_image.data();
        for &(pix, k, ref tap) in &self.samples {
            let dst = per_placement[k].data_mut();
            for c in 0..3 {
                tap.scatter(dst, 3, c, gi[pix * 3 + c]);
            }
        }
        let mut total = Tensor3::zeros(self.patch_h, self.patch_w, 3);
        for (g, color) in per_placement.iter().zip(&self.colors) {
            total.axpy(1.0, &color.backward(g));
        }
        total
    }

    /// Number of image pixels covered by the patch.
    pub fn covered_pixels(&self) -> usize {
        self.samples.len()
    }

    pub fn covered_mask(&self, height: usize, width: usize) -> Vec<bool> {
        let mut m = vec![false; height * width];
        for &(pix, _, _) in &self.samples {
            m[pix] = true;
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct PatchComposite {
    pub image: ImagePlane,
    pub trace: PatchTrace,
}

/// Places one patch on one box. See [`apply_patch_to_boxes`].
pub fn apply_eot_patch(
    image: &ImagePlane,
    patch: &PatchSpec,
    bbox: &BoundingBox,
    params: &EotParams,
) -> Result<PatchComposite, TransformError> {
    apply_patch_to_boxes(image, patch, &[(*bbox, *params)])
}

/// Scales the patch to `l × l` for each box, recolors it, rotates it about the
/// (translated) box center and pastes it. Later placements overwrite earlier
/// ones where they overlap. Pixels outside every patch are untouched.
pub fn apply_patch_to_boxes(
    image: &ImagePlane,
    patch: &PatchSpec,
    placements: &[(BoundingBox, EotParams)],
) -> Result<PatchComposite, TransformError> {
    let (h, w) = (image.height(), image.width());
    let (ph, pw) = (patch.pixels.height(), patch.pixels.width());
    let mut owner: Vec<Option<(usize, Tap)>> = vec![None; h * w];
    let mut colored = Vec::with_capacity(placements.len());
    let mut colors = Vec::with_capacity(placements.len());

    for (k, (bbox, params)) in placements.iter().enumerate() {
        let edge = compute_patch_edge(bbox, patch.c0, patch.kappa)?;
        if edge > h.min(w) as f64 {
            return Err(TransformError::PatchExceedsCanvas {
                edge,
                height: h,
                width: w,
            });
        }
        let half = edge / 2.0;
        let (bx, by) = bbox.center();
        let cx = (bx + params.translate_frac.0 * edge).clamp(half, w as f64 - half);
        let cy = (by + params.translate_frac.1 * edge).clamp(half, h as f64 - half);
        let theta = params.rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let reach = half * (cos.abs() + sin.abs());
        let x_lo = ((cx - reach).floor().max(0.0)) as usize;
        let x_hi = ((cx + reach).ceil().min(w as f64)) as usize;
        let y_lo = ((cy - reach).floor().max(0.0)) as usize;
        let y_hi = ((cy + reach).ceil().min(h as f64)) as usize;
        let inside = half - 1e-9;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                // inverse rotation into patch-local coordinates
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                if u.abs() > inside || v.abs() > inside {
                    continue;
                }
                let su = (u + half) / edge * pw as f64;
                let sv = (v + half) / edge * ph as f64;
                owner[y * w + x] = Some((k, bilinear_tap(ph, pw, su, sv, EdgeMode::Clamp)));
            }
        }
        let (c, trace) = apply_color_eot(&patch.pixels, params);
        colored.push(c);
        colors.push(trace);
    }

    let mut out = image.as_tensor().clone();
    let mut samples = Vec::new();
    {
        let od = out.data_mut();
        for (pix, slot) in owner.iter().enumerate() {
            if let Some((k, tap)) = slot {
                let src = colored[*k].data();
                for c in 0..3 {
                    od[pix * 3 + c] = tap.sample(src, 3, c);
                }
                samples.push((pix, *k, *tap));
            }
        }
    }
    Ok(PatchComposite {
        image: ImagePlane::from_tensor_clamped(out)?,
        trace: PatchTrace {
            patch_h: ph,
            patch_w: pw,
            colors,
            samples,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn patch(pixels: ImagePlane, kappa: f64) -> PatchSpec {
        PatchSpec::new(pixels, 0.2, kappa).unwrap()
    }

    #[test]
    fn edge_follows_linear_formula() {
        let b = BoundingBox::new(0.0, 0.0, 60.0, 80.0).unwrap();
        assert!((compute_patch_edge(&b, 0.2, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert!((compute_patch_edge(&b, 0.2, 1.5).unwrap() - 30.0).abs() < 1e-12);
        let t = BoundingBox::new(0.0, 0.0, 3.0, 4.0).unwrap();
        assert!((compute_patch_edge(&t, 0.2, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let b = BoundingBox {
            x_min: 1.0,
            y_min: 1.0,
            x_max: 1.0,
            y_max: 1.0,
        };
        assert!(matches!(compute_patch_edge(&b, 0.2, 1.0), Err(TransformError::DegenerateBox)));
    }

    #[test]
    fn identity_params_paste_a_centered_square() {
        let img = ImagePlane::filled(100, 100, [1.0; 3]);
        let p = patch(ImagePlane::filled(8, 8, [0.0; 3]), 1.0);
        // diag 100 → l = 20, center (50, 50)
        let b = BoundingBox::new(20.0, 10.0, 80.0, 90.0).unwrap();
        let out = apply_eot_patch(&img, &p, &b, &EotParams::identity()).unwrap();
        for y in 0..100 {
            for x in 0..100 {
                let inside = (40..60).contains(&x) && (40..60).contains(&y);
                let expect = if inside { 0.0 } else { 1.0 };
                assert_eq!(out.image.pixel(y, x), [expect; 3], "({y},{x})");
            }
        }
        assert_eq!(out.trace.covered_pixels(), 400);
    }

    #[test]
    fn half_turn_flips_the_placed_region() {
        let img = ImagePlane::filled(64, 64, [0.5; 3]);
        let pix = ImagePlane::from_fn(6, 6, |y, x| [x as f64 / 5.0, y as f64 / 5.0, ((x * 7 + y * 3) % 5) as f64 / 4.0]);
        let p = patch(pix, 1.0);
        // 48 × 64 box: diag 80 → l = 16 around the integral center (32, 32)
        let b = BoundingBox::new(8.0, 0.0, 56.0, 64.0).unwrap();
        let mut rot = EotParams::identity();
        rot.rotation_deg = 180.0;
        let a = apply_eot_patch(&img, &p, &b, &EotParams::identity()).unwrap().image;
        let r = apply_eot_patch(&img, &p, &b, &rot).unwrap().image;
        for y in 24..40 {
            for x in 24..40 {
                let (fy, fx) = (63 - y, 63 - x);
                for c in 0..3 {
                    assert!((r.get(y, x, c) - a.get(fy, fx, c)).abs() < 1e-9);
                }
            }
        }
        assert!(r.max_abs_diff(&a) > 0.1);
    }

    #[test]
    fn patch_larger_than_canvas_is_rejected() {
        let img = ImagePlane::filled(10, 10, [1.0; 3]);
        let p = patch(ImagePlane::filled(4, 4, [0.0; 3]), 1.5);
        let b = BoundingBox::new(0.0, 0.0, 30.0, 40.0).unwrap(); // l = 15
        assert!(matches!(
            apply_eot_patch(&img, &p, &b, &EotParams::identity()),
            Err(TransformError::PatchExceedsCanvas { .. })
        ));
    }

    #[test]
    fn sampled_params_stay_in_range() {
        let r = EotRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = r.sample(&mut rng);
            assert!(p.translate_frac.0.abs() <= 0.1 && p.translate_frac.1.abs() <= 0.1);
            assert!(p.rotation_deg.abs() <= 20.0);
            assert!(p.brightness_delta.abs() <= 0.1);
            assert!((0.8..=1.2).contains(&p.contrast_factor));
            assert_eq!(p.noise_sigma, 0.02);
        }
    }

    #[test]
    fn color_eot_is_deterministic_per_seed() {
        let img = ImagePlane::filled(5, 5, [0.4; 3]);
        let mut p = EotParams::identity();
        p.noise_sigma = 0.05;
        p.noise_seed = 11;
        let (a, _) = apply_color_eot(&img, &p);
        let (b, _) = apply_color_eot(&img, &p);
        assert_eq!(a, b);
        assert!(a.max_abs_diff(&img) > 0.0);
    }
}
