//! Sliding-window statistics: intensity entropy and gradient energy.

use serde::{Deserialize, Serialize};

use super::DefenseError;
use crate::model::{ImagePlane, MaskMap};

/// Window grid over an image: every `stride`-th start, plus a final window
/// flush with the far edge so the whole image is covered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGrid {
    pub window: usize,
    pub stride: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

fn starts(n: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..=n - window).step_by(stride).collect();
    if *s.last().expect("window fits") != n - window {
        s.push(n - window);
    }
    s
}

impl WindowGrid {
    pub fn new(height: usize, width: usize, window: usize, stride: usize) -> Result<Self, DefenseError> {
        if window == 0 || stride == 0 {
            return Err(DefenseError::InvalidParameter("window and stride must be positive".into()));
        }
        if window > height || window > width {
            return Err(DefenseError::WindowTooLarge { window, height, width });
        }
        Ok(Self {
            window,
            stride,
            rows: starts(height, window, stride),
            cols: starts(width, window, stride),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left corners in row-major window order.
    pub fn corners(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.iter().flat_map(move |&r| self.cols.iter().map(move |&c| (r, c)))
    }

    /// Union of the flagged windows as a binary pixel mask.
    pub fn mask(&self, flags: &[bool], height: usize, width: usize) -> MaskMap {
        let mut bits = vec![false; height * width];
        for ((r, c), &f) in self.corners().zip(flags) {
            if !f {
                continue;
            }
            for y in r..r + self.window {
                bits[y * width + c..y * width + c + self.window].fill(true);
            }
        }
        MaskMap::from_bools(height, width, &bits)
    }
}

/// Per-window Shannon entropy of the grayscale histogram, in bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyHeatmap {
    pub grid: WindowGrid,
    pub bins: usize,
    /// Row-major over the window grid.
    pub values: Vec<f64>,
}

impl EntropyHeatmap {
    pub fn max_bits(&self) -> f64 {
        (self.bins as f64).log2()
    }
}

pub(crate) fn bin_of(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

pub fn window_entropy_map(image: &ImagePlane, window: usize, stride: usize, bins: usize) -> Result<EntropyHeatmap, DefenseError> {
    if bins < 2 {
        return Err(DefenseError::InvalidParameter(format!("need at least 2 bins, got {bins}")));
    }
    let (h, w) = (image.height(), image.width());
    let grid = WindowGrid::new(h, w, window, stride)?;
    let idx: Vec<usize> = image.grayscale().into_iter().map(|v| bin_of(v, bins)).collect();
    let n = (window * window) as f64;
    let mut hist = vec![0u32; bins];
    let mut values = Vec::with_capacity(grid.len());
    for (r, c) in grid.corners() {
        hist.fill(0);
        for y in r..r + window {
            for &b in &idx[y * w + c..y * w + c + window] {
                hist[b] += 1;
            }
        }
        let e: f64 = hist
            .iter()
            .filter(|&&k| k > 0)
            .map(|&k| {
                let p = k as f64 / n;
                -p * p.log2()
            })
            .sum();
        values.push(e.max(0.0));
    }
    Ok(EntropyHeatmap { grid, bins, values })
}

/// Per-pixel gradient magnitude of the grayscale image from forward
/// differences (zero past the last row and column).
pub fn gray_gradient_magnitude(image: &ImagePlane) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let g = image.grayscale();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = g[y * w + x];
            let dx = if x + 1 < w { g[y * w + x + 1] - v } else { 0.0 };
            let dy = if y + 1 < h { g[(y + 1) * w + x] - v } else { 0.0 };
            out[y * w + x] = (dx * dx + dy * dy).sqrt();
        }
    }
    out
}

/// Sum of gradient magnitudes inside each window of `grid`.
pub fn window_gradient_sums(image: &ImagePlane, grid: &WindowGrid) -> Vec<f64> {
    let w = image.width();
    let g = gray_gradient_magnitude(image);
    grid.corners()
        .map(|(r, c)| (r..r + grid.window).map(|y| g[y * w + c..y * w + c + grid.window].iter().sum::<f64>()).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_zero_entropy() {
        let img = ImagePlane::filled(16, 16, [0.3, 0.3, 0.3]);
        let m = window_entropy_map(&img, 4, 2, 256).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_bins_occupied_gives_eight_bits() {
        let img = ImagePlane::from_fn(16, 16, |y, x| {
            let v = ((y * 16 + x) as f64 + 0.5) / 256.0;
            [v, v, v]
        });
        let m = window_entropy_map(&img, 16, 16, 256).unwrap();
        assert!((m.values[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_hand_histogram() {
        let vals = [0.0, 0.0, 0.5, 1.0];
        let img = ImagePlane::from_fn(2, 2, |y, x| {
            let v = vals[y * 2 + x];
            [v, v, v]
        });
        let m = window_entropy_map(&img, 2, 1, 256).unwrap();
        assert!((m.values[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn oversized_window_is_rejected() {
        let img = ImagePlane::filled(4, 4, [0.0; 3]);
        assert!(matches!(window_entropy_map(&img, 5, 1, 8), Err(DefenseError::WindowTooLarge { .. })));
    }

    #[test]
    fn grid_reaches_the_far_edge() {
        let g = WindowGrid::new(10, 10, 4, 4).unwrap();
        assert_eq!(g.rows, vec![0, 4, 6]);
    }
}
