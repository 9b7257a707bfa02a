//! Thin-plate-spline warps for simulating cloth deformation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sampling::{EdgeMode, SamplingGrid};
use super::TransformError;
use crate::model::ImagePlane;

/// Radial basis `r² log r`, written in terms of `r²` to avoid the square root.
#[inline]
fn kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// Control-grid density and displacement used when sampling random warps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TpsConfig {
    /// Control points per axis.
    pub grid: usize,
    /// Maximum displacement as a fraction of the image extent.
    pub max_displacement: f64,
}

impl Default for TpsConfig {
    fn default() -> Self {
        Self {
            grid: 4,
            max_displacement: 0.05,
        }
    }
}

/// A solved thin-plate spline.
///
/// The spline interpolates from destination points to source points, so a
/// warped output pixel at `p` samples the input at `map(p)`; control point
/// `dst[i]` in the output shows what was at `src[i]` in the input.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsWarp {
    src: Vec<[f64; 2]>,
    dst: Vec<[f64; 2]>,
    /// Radial weights per node, one column per output coordinate.
    weights: Vec<[f64; 2]>,
    /// Affine part `a0 + a1·x + a2·y` per output coordinate.
    affine: [[f64; 3]; 2],
}

impl TpsWarp {
    pub fn solve(src: Vec<[f64; 2]>, dst: Vec<[f64; 2]>) -> Result<Self, TransformError> {
        if src.len() != dst.len() {
            return Err(TransformError::InvalidArgument(format!(
                "control point counts differ: {} vs {}",
                src.len(),
                dst.len()
            )));
        }
        let n = dst.len();
        if n < 3 {
            return Err(TransformError::DegenerateControlGrid(format!("{n} control points, need ≥ 3")));
        }
        check_spread(&dst)?;

        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let dx = dst[i][0] - dst[j][0];
                let dy = dst[i][1] - dst[j][1];
                a[(i, j)] = kernel(dx * dx + dy * dy);
            }
            let row = [1.0, dst[i][0], dst[i][1]];
            for (k, v) in row.iter().enumerate() {
                a[(i, n + k)] = *v;
                a[(n + k, i)] = *v;
            }
        }
        let lu = a.lu();
        let mut weights = vec![[0.0; 2]; n];
        let mut affine = [[0.0; 3]; 2];
        for axis in 0..2 {
            let mut rhs = DVector::<f64>::zeros(m);
            for i in 0..n {
                rhs[i] = src[i][axis];
            }
            let sol = lu
                .solve(&rhs)
                .ok_or_else(|| TransformError::DegenerateControlGrid("singular spline system".into()))?;
            if sol.iter().any(|v| !v.is_finite()) {
                return Err(TransformError::DegenerateControlGrid("non-finite spline coefficients".into()));
            }
            for i in 0..n {
                weights[i][axis] = sol[i];
            }
            for k in 0..3 {
                affine[axis][k] = sol[n + k];
            }
        }
        Ok(Self {
            src,
            dst,
            weights,
            affine,
        })
    }

    /// Regular `n × n` grid of control points spanning a `h × w` image.
    pub fn regular_grid(h: usize, w: usize, n: usize) -> Vec<[f64; 2]> {
        let n = n.max(2);
        let mut pts = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                pts.push([
                    w as f64 * i as f64 / (n - 1) as f64,
                    h as f64 * j as f64 / (n - 1) as f64,
                ]);
            }
        }
        pts
    }

    /// Random warp: a regular grid whose destination points are jittered by at
    /// most `max_displacement` of the image extent.
    pub fn random<R: Rng + ?Sized>(h: usize, w: usize, config: &TpsConfig, rng: &mut R) -> Result<Self, TransformError> {
        let src = Self::regular_grid(h, w, config.grid);
        let (mx, my) = (config.max_displacement * w as f64, config.max_displacement * h as f64);
        let dst = src
            .iter()
            .map(|p| {
                let dx = if mx > 0.0 { rng.gen_range(-mx..=mx) } else { 0.0 };
                let dy = if my > 0.0 { rng.gen_range(-my..=my) } else { 0.0 };
                [p[0] + dx, p[1] + dy]
            })
            .collect();
        Self::solve(src, dst)
    }

    pub fn identity(h: usize, w: usize, n: usize) -> Self {
        let g = Self::regular_grid(h, w, n);
        Self::solve(g.clone(), g).expect("regular grid is non-degenerate")
    }

    pub fn src(&self) -> &[[f64; 2]] {
        &self.src
    }

    pub fn dst(&self) -> &[[f64; 2]] {
        &self.dst
    }

    /// Maps an output-space point to the input point it samples.
    pub fn map(&self, p: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for axis in 0..2 {
            let a = &self.affine[axis];
            out[axis] = a[0] + a[1] * p[0] + a[2] * p[1];
        }
        for (node, w) in self.dst.iter().zip(&self.weights) {
            let dx = p[0] - node[0];
            let dy = p[1] - node[1];
            let u = kernel(dx * dx + dy * dy);
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        out
    }

    /// Inverse-mapped bilinear sampling grid over an `h × w` image.
    pub fn grid(&self, h: usize, w: usize) -> SamplingGrid {
        SamplingGrid::from_fn(h, w, h, w, EdgeMode::Clamp, |x, y| {
            let s = self.map([x, y]);
            Some((s[0], s[1]))
        })
    }
}

fn check_spread(pts: &[[f64; 2]]) -> Result<(), TransformError> {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in pts {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let det = sxx * syy - sxy * sxy;
    let scale = (sxx + syy).powi(2);
    if !(scale > 0.0) || det <= 1e-12 * scale {
        return Err(TransformError::DegenerateControlGrid("control points are collinear".into()));
    }
    Ok(())
}

/// Warps an image region; returns the warped image and the grid for backward.
pub fn tps_warp(image: &ImagePlane, warp: &TpsWarp) -> (ImagePlane, SamplingGrid) {
    let grid = warp.grid(image.height(), image.width());
    let out = grid.sample(image.as_tensor(), 0.0);
    (ImagePlane::from_tensor_clamped(out).expect("3 channels"), grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image(h: usize, w: usize) -> ImagePlane {
        ImagePlane::from_fn(h, w, |y, x| {
            [
                0.5 + 0.4 * (x as f64 * 0.31).sin(),
                0.5 + 0.4 * (y as f64 * 0.23).cos(),
                ((x + 2 * y) % 7) as f64 / 6.0,
            ]
        })
    }

    #[test]
    fn identity_grid_returns_input() {
        let img = test_image(24, 30);
        let grid = TpsWarp::regular_grid(24, 30, 3);
        let warp = TpsWarp::solve(grid.clone(), grid).unwrap();
        let (out, _) = tps_warp(&img, &warp);
        assert!(out.max_abs_diff(&img) <= 1e-6);
    }

    #[test]
    fn pure_translation_shifts_image() {
        let (h, w) = (20, 32);
        let img = test_image(h, w);
        let src = TpsWarp::regular_grid(h, w, 3);
        let dst: Vec<_> = src.iter().map(|p| [p[0] + 5.0, p[1]]).collect();
        let warp = TpsWarp::solve(src, dst).unwrap();
        let (out, _) = tps_warp(&img, &warp);
        // direct shift oracle on the region that has a source pixel
        for y in 0..h {
            for x in 5..w {
                for c in 0..3 {
                    assert!((out.get(y, x, c) - img.get(y, x - 5, c)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let src = vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let r = TpsWarp::solve(src.clone(), src);
        assert!(matches!(r, Err(TransformError::DegenerateControlGrid(_))));
    }

    #[test]
    fn interpolates_control_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let warp = TpsWarp::random(40, 40, &TpsConfig::default(), &mut rng).unwrap();
        for (s, d) in warp.src().iter().zip(warp.dst()) {
            let m = warp.map(*d);
            assert!((m[0] - s[0]).abs() < 1e-8 && (m[1] - s[1]).abs() < 1e-8);
        }
    }

    #[test]
    fn small_perturbations_preserve_mean_intensity() {
        let cfg = TpsConfig {
            grid: 4,
            max_displacement: 2.0 / 32.0,
        };
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = ImagePlane::from_fn(32, 32, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
            let base = img.mean();
            let warp = TpsWarp::random(32, 32, &cfg, &mut rng).unwrap();
            let (out, _) = tps_warp(&img, &warp);
            assert!((out.mean() - base).abs() <= 0.02 * base, "seed {seed}: {} vs {base}", out.mean());
        }
    }
}
