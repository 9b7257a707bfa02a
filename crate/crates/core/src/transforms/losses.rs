//! Smoothness (total variation) and printability penalties.

use std::path::Path;

use super::TransformError;
use crate::model::Tensor3;

/// Smoothing term inside the TV square root.
pub const TV_EPSILON: f64 = 1e-8;

/// Isotropic total variation.
///
/// For every pixel and channel, `sqrt(Δh² + Δv² + ε²)` with forward
/// differences (zero past the last row or column), averaged over all
/// `H·W·C` terms.
pub fn tv_loss(texture: &Tensor3) -> Result<f64, TransformError> {
    tv_impl(texture, false).map(|(v, _)| v)
}

pub fn tv_loss_with_grad(texture: &Tensor3) -> Result<(f64, Tensor3), TransformError> {
    tv_impl(texture, true).map(|(v, g)| (v, g.expect("grad requested")))
}

fn tv_impl(t: &Tensor3, want_grad: bool) -> Result<(f64, Option<Tensor3>), TransformError> {
    let (h, w, c) = (t.height(), t.width(), t.channels());
    if h < 2 || w < 2 {
        return Err(TransformError::InvalidArgument(format!("tv_loss needs at least 2×2, got {h}×{w}")));
    }
    let n = (h * w * c) as f64;
    let eps2 = TV_EPSILON * TV_EPSILON;
    let d = t.data();
    let mut grad = want_grad.then(|| Tensor3::zeros(h, w, c));
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let i = (y * w + x) * c + ch;
                let dh = if x + 1 < w { d[i + c] - d[i] } else { 0.0 };
                let dv = if y + 1 < h { d[i + w * c] - d[i] } else { 0.0 };
                let term = (dh * dh + dv * dv + eps2).sqrt();
                total += term;
                if let Some(g) = grad.as_mut() {
                    let g = g.data_mut();
                    let (gh, gv) = (dh / term / n, dv / term / n);
                    if x + 1 < w {
                        g[i + c] += gh;
                    }
                    if y + 1 < h {
                        g[i + w * c] += gv;
                    }
                    g[i] -= gh + gv;
                }
            }
        }
    }
    Ok((total / n, grad))
}

/// Colors a printer can reproduce, in `[0, 1]` RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct PrintableSet {
    colors: Vec<[f64; 3]>,
}

const DEFAULT_PRINTABLE: &str = include_str!("../../data/printable_colors.txt");

impl PrintableSet {
    pub fn new(colors: Vec<[f64; 3]>) -> Result<Self, TransformError> {
        if colors.is_empty() {
            return Err(TransformError::EmptyPrintableSet);
        }
        Ok(Self { colors })
    }

    /// Parses `r g b` lines with 0–255 components. Blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self, TransformError> {
        let mut colors = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || TransformError::PrintableParse {
                line: lineno + 1,
                content: line.to_string(),
            };
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<u8>().map(|v| v as f64 / 255.0))
                .collect::<Result<_, _>>()
                .map_err(|_| bad())?;
            if vals.len() != 3 {
                return Err(bad());
            }
            colors.push([vals[0], vals[1], vals[2]]);
        }
        Self::new(colors)
    }

    pub fn load(path: &Path) -> Result<Self, TransformError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            TransformError::Model(crate::model::ModelError::Io {
                path: path.display().to_string(),
                source: e,
            })
        })?;
        Self::parse(&text)
    }

    /// The 30-color set shipped with the crate.
    pub fn shipped() -> Self {
        Self::parse(DEFAULT_PRINTABLE).expect("shipped printable set parses")
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }
}

/// Mean over pixels of the Euclidean distance to the nearest printable color.
pub fn nps_loss(pixels: &Tensor3, set: &PrintableSet) -> Result<f64, TransformError> {
    nps_impl(pixels, set, false).map(|(v, _)| v)
}

pub fn nps_loss_with_grad(pixels: &Tensor3, set: &PrintableSet) -> Result<(f64, Tensor3), TransformError> {
    nps_impl(pixels, set, true).map(|(v, g)| (v, g.expect("grad requested")))
}

fn nps_impl(pixels: &Tensor3, set: &PrintableSet, want_grad: bool) -> Result<(f64, Option<Tensor3>), TransformError> {
    if pixels.channels() != 3 {
        return Err(TransformError::InvalidArgument("nps_loss expects RGB".into()));
    }
    if set.colors.is_empty() {
        return Err(TransformError::EmptyPrintableSet);
    }
    let n = (pixels.height() * pixels.width()) as f64;
    let mut grad = want_grad.then(|| Tensor3::zeros_like(pixels));
    let mut total = 0.0;
    for (i, p) in pixels.data().chunks_exact(3).enumerate() {
        let (mut best, mut best_c) = (f64::INFINITY, [0.0; 3]);
        for c in &set.colors {
            let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
            if d2 < best {
                best = d2;
                best_c = *c;
            }
        }
        let dist = best.sqrt();
        total += dist;
        if let Some(g) = grad.as_mut() {
            if dist > 0.0 {
                let g = g.data_mut();
                for k in 0..3 {
                    g[i * 3 + k] = (p[k] - best_c[k]) / dist / n;
                }
            }
        }
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_texture_has_negligible_tv() {
        let t = Tensor3::new(6, 5, 3, vec![0.37; 90]).unwrap();
        assert!(tv_loss(&t).unwrap() <= 1e-7);
    }

    #[test]
    fn tv_is_transpose_symmetric() {
        let t = Tensor3::new(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let a = tv_loss(&t).unwrap();
        let b = tv_loss(&t.transpose()).unwrap();
        assert!(a > 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn checkerboard_matches_hand_enumeration() {
        // [[0,1],[1,0]]: (0,0) dh=1 dv=1; (0,1) dh=0 dv=-1; (1,0) dh=-1 dv=0; (1,1) 0,0
        let t = Tensor3::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let e2 = TV_EPSILON * TV_EPSILON;
        let expect = ((2.0 + e2).sqrt() + (1.0 + e2).sqrt() + (1.0 + e2).sqrt() + e2.sqrt()) / 4.0;
        assert_eq!(tv_loss(&t).unwrap(), expect);
    }

    #[test]
    fn tv_requires_two_by_two() {
        let t = Tensor3::new(1, 4, 1, vec![0.0; 4]).unwrap();
        assert!(tv_loss(&t).is_err());
    }

    #[test]
    fn printable_pixels_score_zero() {
        let set = PrintableSet::new(vec![[0.0, 0.0, 0.0], [1.0, 0.5, 0.25]]).unwrap();
        let t = Tensor3::new(1, 2, 3, vec![0.0, 0.0, 0.0, 1.0, 0.5, 0.25]).unwrap();
        assert_eq!(nps_loss(&t, &set).unwrap(), 0.0);
    }

    #[test]
    fn white_pixel_to_black_is_sqrt_three() {
        let set = PrintableSet::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        let t = Tensor3::new(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(nps_loss(&t, &set).unwrap(), 3f64.sqrt());
    }

    #[test]
    fn empty_printable_set_is_rejected() {
        assert!(matches!(PrintableSet::new(vec![]), Err(TransformError::EmptyPrintableSet)));
        assert!(matches!(PrintableSet::parse("# nothing\n"), Err(TransformError::EmptyPrintableSet)));
    }

    #[test]
    fn shipped_set_has_thirty_colors() {
        assert_eq!(PrintableSet::shipped().colors().len(), 30);
    }

    #[test]
    fn parse_rejects_bad_lines() {
        assert!(matches!(
            PrintableSet::parse("1 2 3\n4 5\n"),
            Err(TransformError::PrintableParse { line: 2, .. })
        ));
        assert!(PrintableSet::parse("1 2 300\n").is_err());
    }
}
