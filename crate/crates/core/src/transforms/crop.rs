//! Toroidal crops and position-jittering crops of padded textures.

use rand::Rng;

use crate::model::{floor_scaled, ImagePlane, LatentTextureMap, Tensor3};

/// `out[p, q] = texture[(i + p) mod H, (j + q) mod W]`.
///
/// Any offset and any output size are allowed.
pub fn toroidal_crop(texture: &Tensor3, top_left: (usize, usize), size: (usize, usize)) -> Tensor3 {
    let (th, tw, c) = (texture.height(), texture.width(), texture.channels());
    let (oh, ow) = size;
    let mut out = Tensor3::zeros(oh, ow, c);
    let src = texture.data();
    let dst = out.data_mut();
    for p in 0..oh {
        let sy = (top_left.0 + p) % th;
        for q in 0..ow {
            let sx = (top_left.1 + q) % tw;
            let si = (sy * tw + sx) * c;
            let di = (p * ow + q) * c;
            dst[di..di + c].copy_from_slice(&src[si..si + c]);
        }
    }
    out
}

/// Adjoint of [`toroidal_crop`]: scatter-adds the crop gradient into a
/// zero tensor of the source shape.
pub fn toroidal_crop_backward(grad: &Tensor3, src_h: usize, src_w: usize, top_left: (usize, usize)) -> Tensor3 {
    let c = grad.channels();
    let mut out = Tensor3::zeros(src_h, src_w, c);
    let g = grad.data();
    let o = out.data_mut();
    for p in 0..grad.height() {
        let sy = (top_left.0 + p) % src_h;
        for q in 0..grad.width() {
            let sx = (top_left.1 + q) % src_w;
            let si = (sy * src_w + sx) * c;
            let gi = (p * grad.width() + q) * c;
            for k in 0..c {
                o[si + k] += g[gi + k];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JitterMode {
    /// Uniform random top-left corner.
    Train,
    /// The fixed center crop used for evaluation and deployment.
    Eval,
}

/// A base-size view cut from a latent texture.
#[derive(Debug, Clone, PartialEq)]
pub struct JitterView {
    pub view: ImagePlane,
    /// Top-left corner as (row, column).
    pub offset: (usize, usize),
}

/// Offset bounds for a latent texture: train offsets are drawn from
/// `[0, max.0] × [0, max.1]` and eval uses `eval`.
pub fn jitter_offsets(latent: &LatentTextureMap) -> (usize, usize, (usize, usize)) {
    let (mh, mw) = latent.margin();
    let eval = (
        floor_scaled(0.5 * latent.gamma, latent.base_h),
        floor_scaled(0.5 * latent.gamma, latent.base_w),
    );
    (mh, mw, eval)
}

pub fn jitter_crop<R: Rng + ?Sized>(latent: &LatentTextureMap, mode: JitterMode, rng: &mut R) -> JitterView {
    let (mh, mw, eval) = jitter_offsets(latent);
    let offset = match mode {
        JitterMode::Eval => eval,
        JitterMode::Train => (rng.gen_range(0..=mh), rng.gen_range(0..=mw)),
    };
    JitterView {
        view: jitter_crop_at(latent, offset),
        offset,
    }
}

/// Crops the base-size view at an explicit offset (wrapping if out of range).
pub fn jitter_crop_at(latent: &LatentTextureMap, offset: (usize, usize)) -> ImagePlane {
    let t = toroidal_crop(latent.pixels.as_tensor(), offset, (latent.base_h, latent.base_w));
    ImagePlane::from_tensor_clamped(t).expect("3 channels")
}

/// Gradient on the latent pixels given the gradient on a view.
pub fn jitter_crop_backward(latent: &LatentTextureMap, offset: (usize, usize), grad_view: &Tensor3) -> Tensor3 {
    toroidal_crop_backward(grad_view, latent.pixels.height(), latent.pixels.width(), offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Tensor3 {
        Tensor3::new(h, w, 1, (0..h * w).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn zero_offset_full_size_is_identity() {
        let t = ramp(5, 7);
        assert_eq!(toroidal_crop(&t, (0, 0), (5, 7)), t);
    }

    #[test]
    fn full_period_offset_is_identity() {
        let t = ramp(5, 7);
        assert_eq!(toroidal_crop(&t, (5, 7), (5, 7)), t);
    }

    #[test]
    fn two_by_two_wraps_both_axes() {
        // [[a,b],[c,d]] at (1,1) → [[d,c],[b,a]]
        let t = Tensor3::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = toroidal_crop(&t, (1, 1), (2, 2));
        assert_eq!(out.data(), &[4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn backward_is_adjoint() {
        let t = ramp(4, 6);
        let off = (3, 5);
        let crop = toroidal_crop(&t, off, (7, 3));
        let y = Tensor3::new(7, 3, 1, (0..21).map(|i| (i as f64).sin()).collect()).unwrap();
        let lhs: f64 = crop.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let g = toroidal_crop_backward(&y, 4, 6, off);
        let rhs: f64 = t.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    fn latent(base: usize, gamma: f64) -> LatentTextureMap {
        let (h, w) = LatentTextureMap::latent_dims(base, base, gamma);
        LatentTextureMap::new(ImagePlane::filled(h, w, [0.5; 3]), base, base, gamma).unwrap()
    }

    #[test]
    fn gamma_zero_collapses_to_origin() {
        let l = latent(20, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [JitterMode::Train, JitterMode::Eval] {
            for _ in 0..20 {
                let v = jitter_crop(&l, mode, &mut rng);
                assert_eq!(v.offset, (0, 0));
                assert_eq!(v.view, l.pixels);
            }
        }
    }

    #[test]
    fn eval_offset_for_three_hundred() {
        let l = latent(300, 0.1);
        assert_eq!((l.pixels.height(), l.pixels.width()), (330, 330));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = jitter_crop(&l, JitterMode::Eval, &mut rng);
        assert_eq!(v.offset, (15, 15));
        assert_eq!((v.view.height(), v.view.width()), (300, 300));
    }
}
