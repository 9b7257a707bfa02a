//! Bilinear resampling with an explicit adjoint.
//!
//! Coordinates are continuous with pixel `i` covering `[i, i+1)`, so its
//! center sits at `i + 0.5`.

use crate::model::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeMode {
    /// Repeat the border pixel.
    Clamp,
    /// Periodic (toroidal) extension.
    Wrap,
}

/// Four source pixels and their bilinear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub idx: [u32; 4],
    pub w: [f64; 4],
}

impl Tap {
    #[inline]
    pub fn sample(&self, src: &[f64], channels: usize, c: usize) -> f64 {
        let mut acc = 0.0;
        for k in 0..4 {
            acc += self.w[k] * src[self.idx[k] as usize * channels + c];
        }
        acc
    }

    #[inline]
    pub fn scatter(&self, dst: &mut [f64], channels: usize, c: usize, g: f64) {
        for k in 0..4 {
            dst[self.idx[k] as usize * channels + c] += self.w[k] * g;
        }
    }
}

#[inline]
fn resolve(i: i64, n: usize, mode: EdgeMode) -> usize {
    match mode {
        EdgeMode::Clamp => i.clamp(0, n as i64 - 1) as usize,
        EdgeMode::Wrap => i.rem_euclid(n as i64) as usize,
    }
}

/// Bilinear tap at continuous point `(u, v)` = (x, y) in a `h × w` source.
pub fn bilinear_tap(h: usize, w: usize, u: f64, v: f64, mode: EdgeMode) -> Tap {
    let fx = u - 0.5;
    let fy = v - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let ax = fx - x0;
    let ay = fy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let xa = resolve(x0, w, mode);
    let xb = resolve(x0 + 1, w, mode);
    let ya = resolve(y0, h, mode);
    let yb = resolve(y0 + 1, h, mode);
    Tap {
        idx: [
            (ya * w + xa) as u32,
            (ya * w + xb) as u32,
            (yb * w + xa) as u32,
            (yb * w + xb) as u32,
        ],
        w: [
            (1.0 - ax) * (1.0 - ay),
            ax * (1.0 - ay),
            (1.0 - ax) * ay,
            ax * ay,
        ],
    }
}

/// A precomputed resampling from a `src_h × src_w` source onto an
/// `out_h × out_w` output. Output pixels without a tap take `fill`.
#[derive(Debug, Clone)]
pub struct SamplingGrid {
    pub src_h: usize,
    pub src_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub taps: Vec<Option<Tap>>,
}

impl SamplingGrid {
    /// Builds a grid by mapping every output pixel center through `f`, which
    /// returns the source point or `None` for "no sample".
    pub fn from_fn(
        src_h: usize,
        src_w: usize,
        out_h: usize,
        out_w: usize,
        mode: EdgeMode,
        mut f: impl FnMut(f64, f64) -> Option<(f64, f64)>,
    ) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            for x in 0..out_w {
                let t = f(x as f64 + 0.5, y as f64 + 0.5).map(|(u, v)| bilinear_tap(src_h, src_w, u, v, mode));
                taps.push(t);
            }
        }
        Self {
            src_h,
            src_w,
            out_h,
            out_w,
            taps,
        }
    }

    pub fn sample(&self, src: &Tensor3, fill: f64) -> Tensor3 {
        assert_eq!((src.height(), src.width()), (self.src_h, self.src_w), "sampling source shape");
        let c = src.channels();
        let mut out = Tensor3::zeros(self.out_h, self.out_w, c);
        let s = src.data();
        let o = out.data_mut();
        for (p, tap) in self.taps.iter().enumerate() {
            for ch in 0..c {
                o[p * c + ch] = match tap {
                    Some(t) => t.sample(s, c, ch),
                    None => fill,
                };
            }
        }
        out
    }

    /// Adjoint of [`Self::sample`] with respect to the source.
    pub fn backward(&self, grad_out: &Tensor3) -> Tensor3 {
        assert_eq!((grad_out.height(), grad_out.width()), (self.out_h, self.out_w), "sampling grad shape");
        let c = grad_out.channels();
        let mut g = Tensor3::zeros(self.src_h, self.src_w, c);
        let go = grad_out.data();
        let gd = g.data_mut();
        for (p, tap) in self.taps.iter().enumerate() {
            if let Some(t) = tap {
                for ch in 0..c {
                    t.scatter(gd, c, ch, go[p * c + ch]);
                }
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_at_pixel_centers_is_exact() {
        let src = Tensor3::new(2, 3, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let grid = SamplingGrid::from_fn(2, 3, 2, 3, EdgeMode::Clamp, |x, y| Some((x, y)));
        assert_eq!(grid.sample(&src, 0.0), src);
    }

    #[test]
    fn midpoint_averages_neighbors() {
        let src = Tensor3::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let t = bilinear_tap(1, 2, 1.0, 0.5, EdgeMode::Clamp);
        assert!((t.sample(src.data(), 1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wrap_mode_is_periodic() {
        let a = bilinear_tap(4, 4, 0.2, 0.7, EdgeMode::Wrap);
        let b = bilinear_tap(4, 4, 4.2, 8.7, EdgeMode::Wrap);
        assert_eq!(a.idx, b.idx);
        for k in 0..4 {
            assert!((a.w[k] - b.w[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint_of_sample() {
        // <S x, y> == <x, Sᵀ y>
        let src = Tensor3::new(3, 4, 2, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let grid = SamplingGrid::from_fn(3, 4, 5, 5, EdgeMode::Clamp, |x, y| {
            (x < 4.5).then_some((x * 0.7 + 0.3, y * 0.55))
        });
        let out = grid.sample(&src, 0.0);
        let y = Tensor3::new(5, 5, 2, (0..50).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let lhs: f64 = out.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let back = grid.backward(&y);
        let rhs: f64 = src.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
