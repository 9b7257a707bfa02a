//! Aspect-preserving resize plus centered padding to the square network input.

use crate::model::{BoundingBox, ImagePlane, Tensor3};
use crate::transforms::{EdgeMode, SamplingGrid};

/// Padding value for the letterbox border.
pub const PAD_VALUE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Letterbox {
    pub src_h: usize,
    pub src_w: usize,
    pub size: usize,
    pub scale_x: f64,
    pub scale_y: f64,
    pub pad_x: usize,
    pub pad_y: usize,
}

impl Letterbox {
    pub fn new(src_h: usize, src_w: usize, size: usize) -> Self {
        let s = size as f64 / src_h.max(src_w) as f64;
        let nw = ((src_w as f64 * s).round() as usize).clamp(1, size);
        let nh = ((src_h as f64 * s).round() as usize).clamp(1, size);
        Self {
            src_h,
            src_w,
            size,
            scale_x: nw as f64 / src_w as f64,
            scale_y: nh as f64 / src_h as f64,
            pad_x: (size - nw) / 2,
            pad_y: (size - nh) / 2,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.src_h == self.size && self.src_w == self.size
    }

    fn grid(&self) -> SamplingGrid {
        let (nw, nh) = (
            (self.src_w as f64 * self.scale_x).round(),
            (self.src_h as f64 * self.scale_y).round(),
        );
        let (px, py) = (self.pad_x as f64, self.pad_y as f64);
        SamplingGrid::from_fn(self.src_h, self.src_w, self.size, self.size, EdgeMode::Clamp, |x, y| {
            let (lx, ly) = (x - px, y - py);
            (lx >= 0.0 && ly >= 0.0 && lx < nw && ly < nh).then(|| (lx / self.scale_x, ly / self.scale_y))
        })
    }

    /// Network-sized input and, unless the transform is the identity, the
    /// grid needed to pull gradients back to the source.
    pub fn apply(&self, image: &ImagePlane) -> (Tensor3, Option<SamplingGrid>) {
        if self.is_identity() {
            return (image.as_tensor().clone(), None);
        }
        let grid = self.grid();
        (grid.sample(image.as_tensor(), PAD_VALUE), Some(grid))
    }

    pub fn to_source(&self, b: &BoundingBox) -> BoundingBox {
        let (px, py) = (self.pad_x as f64, self.pad_y as f64);
        BoundingBox {
            x_min: (b.x_min - px) / self.scale_x,
            y_min: (b.y_min - py) / self.scale_y,
            x_max: (b.x_max - px) / self.scale_x,
            y_max: (b.y_max - py) / self.scale_y,
        }
    }

    pub fn to_net(&self, b: &BoundingBox) -> BoundingBox {
        let (px, py) = (self.pad_x as f64, self.pad_y as f64);
        BoundingBox {
            x_min: b.x_min * self.scale_x + px,
            y_min: b.y_min * self.scale_y + py,
            x_max: b.x_max * self.scale_x + px,
            y_max: b.y_max * self.scale_y + py,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wide_image_is_padded_vertically() {
        let lb = Letterbox::new(50, 100, 64);
        assert_eq!(lb.pad_x, 0);
        assert_eq!(lb.pad_y, 16);
        let img = ImagePlane::filled(50, 100, [1.0, 0.0, 0.0]);
        let (t, g) = lb.apply(&img);
        assert!(g.is_some());
        assert_eq!(t.get(0, 10, 0), PAD_VALUE);
        assert!((t.get(32, 10, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_round_trip_is_exact_enough() {
        let lb = Letterbox::new(480, 640, 416);
        let b = BoundingBox::new(10.0, 20.5, 200.0, 300.25).unwrap();
        let r = lb.to_source(&lb.to_net(&b));
        assert!((r.x_min - b.x_min).abs() <= 0.5 && (r.y_max - b.y_max).abs() <= 0.5);
    }
}
