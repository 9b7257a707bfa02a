//! Person rendering.
//!
//! The built-in [`BillboardRenderer`] draws a flat person silhouette (head,
//! neck, torso, two legs) whose clothing region is UV-mapped from a texture,
//! then alpha-composites it over a background. Any renderer that can produce a
//! person layer, its alpha and a texture-gradient rule can be plugged in
//! through [`PersonRenderer`].

use serde::{Deserialize, Serialize};

use super::sampling::{bilinear_tap, EdgeMode, SamplingGrid};
use super::TransformError;
use crate::model::{BoundingBox, ImagePlane, Tensor3};

/// Placement and appearance of one person, in canvas pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    pub cx: f64,
    pub top: f64,
    pub height: f64,
    pub width: f64,
    pub skin: [f64; 3],
}

/// Body proportions relative to the person height.
const HEAD_CY: f64 = 0.10;
const HEAD_RX: f64 = 0.08;
const HEAD_RY: f64 = 0.10;
const NECK_HALF_W: f64 = 0.03;
const NECK_TOP: f64 = 0.17;
const TORSO_TOP: f64 = 0.22;
const LEGS_TOP: f64 = 0.60;
/// Each leg's width as a fraction of the body width.
const LEG_W: f64 = 0.42;

impl PersonSpec {
    /// Tight ground-truth box.
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox {
            x_min: self.cx - self.width / 2.0,
            y_min: self.top,
            x_max: self.cx + self.width / 2.0,
            y_max: self.top + self.height,
        }
    }

    /// The clothing quad the texture is mapped onto: `(x0, y0, x1, y1)`.
    pub fn clothing_quad(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.width / 2.0,
            self.top + TORSO_TOP * self.height,
            self.cx + self.width / 2.0,
            self.top + self.height,
        )
    }

    /// `(clothing coverage, skin coverage)` at pixel center `(x, y)`.
    fn coverage(&self, x: f64, y: f64) -> (f64, f64) {
        let h = self.height;
        let half_w = self.width / 2.0;
        let left = self.cx - half_w;
        let right = self.cx + half_w;
        let torso = rect_cov(x, y, left, self.top + TORSO_TOP * h, right, self.top + LEGS_TOP * h);
        let leg_w = LEG_W * self.width;
        let legs_top = self.top + LEGS_TOP * h;
        let bottom = self.top + h;
        let leg_l = rect_cov(x, y, left, legs_top, left + leg_w, bottom);
        let leg_r = rect_cov(x, y, right - leg_w, legs_top, right, bottom);
        let cloth = torso.max(leg_l).max(leg_r);

        let head = ellipse_cov(x, y, self.cx, self.top + HEAD_CY * h, HEAD_RX * h, HEAD_RY * h);
        let neck = rect_cov(
            x,
            y,
            self.cx - NECK_HALF_W * h,
            self.top + NECK_TOP * h,
            self.cx + NECK_HALF_W * h,
            self.top + TORSO_TOP * h + 0.5,
        );
        (cloth, head.max(neck))
    }
}

/// Anti-aliased coverage of an axis-aligned rectangle at a pixel center.
fn rect_cov(x: f64, y: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let inside = (x - x0).min(x1 - x).min(y - y0).min(y1 - y);
    (inside + 0.5).clamp(0.0, 1.0)
}

fn ellipse_cov(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let r = ((x - cx) / rx).hypot((y - cy) / ry);
    let sd = (r - 1.0) * rx.min(ry);
    (0.5 - sd).clamp(0.0, 1.0)
}

/// Maps a gradient on a rendered layer back onto the texture.
pub trait LayerVjp: Send + Sync {
    fn texture_grad(&self, grad_layer: &Tensor3) -> Tensor3;
}

impl LayerVjp for SamplingGrid {
    fn texture_grad(&self, grad_layer: &Tensor3) -> Tensor3 {
        self.backward(grad_layer)
    }
}

/// A rendered person before compositing.
pub struct PersonLayer {
    pub rgb: Tensor3,
    pub alpha: Vec<f64>,
    pub vjp: Box<dyn LayerVjp>,
}

/// Renders a textured person into a `height × width` layer.
pub trait PersonRenderer: Send + Sync {
    fn name(&self) -> &str;
    fn render_layer(
        &self,
        person: &PersonSpec,
        texture: &ImagePlane,
        height: usize,
        width: usize,
    ) -> Result<PersonLayer, TransformError>;
}

/// Flat textured silhouette with soft edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BillboardRenderer {
    /// Texture repetitions across the clothing quad; values above 1 tile the
    /// texture toroidally.
    pub tiles: f64,
}

impl Default for BillboardRenderer {
    fn default() -> Self {
        Self { tiles: 1.0 }
    }
}

impl PersonRenderer for BillboardRenderer {
    fn name(&self) -> &str {
        "billboard"
    }

    fn render_layer(
        &self,
        person: &PersonSpec,
        texture: &ImagePlane,
        height: usize,
        width: usize,
    ) -> Result<PersonLayer, TransformError> {
        if !(person.height > 0.0 && person.width > 0.0) {
            return Err(TransformError::Renderer {
                renderer: self.name().into(),
                message: "person must have positive size".into(),
            });
        }
        let (th, tw) = (texture.height(), texture.width());
        let (qx0, qy0, qx1, qy1) = person.clothing_quad();
        let mode = if self.tiles > 1.0 {
            EdgeMode::Wrap
        } else {
            EdgeMode::Clamp
        };
        let mut rgb = Tensor3::zeros(height, width, 3);
        let mut alpha = vec![0.0; height * width];
        let mut taps = vec![None; height * width];
        let b = person.bbox();
        let x_lo = (b.x_min - 1.0).floor().max(0.0) as usize;
        let x_hi = ((b.x_max + 1.0).ceil().max(0.0) as usize).min(width);
        let y_lo = (b.y_min - 1.0).floor().max(0.0) as usize;
        let y_hi = ((b.y_max + 1.0).ceil().max(0.0) as usize).min(height);
        let tex = texture.data();
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (cloth, skin) = person.coverage(px, py);
                let a = cloth.max(skin);
                if a <= 0.0 {
                    continue;
                }
                let p = y * width + x;
                alpha[p] = a;
                if cloth >= skin {
                    let u = ((px - qx0) / (qx1 - qx0)).clamp(0.0, 1.0);
                    let v = ((py - qy0) / (qy1 - qy0)).clamp(0.0, 1.0);
                    let tap = bilinear_tap(th, tw, u * tw as f64 * self.tiles, v * th as f64 * self.tiles, mode);
                    for c in 0..3 {
                        rgb.set(y, x, c, tap.sample(tex, 3, c));
                    }
                    taps[p] = Some(tap);
                } else {
                    for c in 0..3 {
                        rgb.set(y, x, c, person.skin[c]);
                    }
                }
            }
        }
        let grid = SamplingGrid {
            src_h: th,
            src_w: tw,
            out_h: height,
            out_w: width,
            taps,
        };
        Ok(PersonLayer {
            rgb,
            alpha,
            vjp: Box::new(grid),
        })
    }
}

/// Composited scene with per-person gradient routing.
pub struct SceneRender {
    pub image: ImagePlane,
    layers: Vec<PersonLayer>,
    /// Effective blend weight of each layer after occlusion by later layers.
    weights: Vec<Vec<f64>>,
}

impl SceneRender {
    /// Gradient on the texture worn by person `k`.
    pub fn texture_grad(&self, k: usize, grad_image: &Tensor3) -> Tensor3 {
        let mut g = grad_image.clone();
        for (v, w) in g.data_mut().chunks_exact_mut(3).zip(&self.weights[k]) {
            for c in v {
                *c *= w;
            }
        }
        self.layers[k].vjp.texture_grad(&g)
    }

    /// Sum of texture gradients over all persons (every person wears the same
    /// texture).
    pub fn shared_texture_grad(&self, grad_image: &Tensor3) -> Tensor3 {
        let mut total = self.texture_grad(0, grad_image);
        for k in 1..self.layers.len() {
            total.axpy(1.0, &self.texture_grad(k, grad_image));
        }
        total
    }

    pub fn person_alpha(&self, k: usize) -> &[f64] {
        &self.layers[k].alpha
    }
}

/// Paints persons over the background in order; later persons occlude
/// earlier ones.
pub fn render_scene(
    renderer: &dyn PersonRenderer,
    background: &ImagePlane,
    persons: &[(PersonSpec, &ImagePlane)],
) -> Result<SceneRender, TransformError> {
    let (h, w) = (background.height(), background.width());
    let mut out = background.as_tensor().clone();
    let mut layers = Vec::with_capacity(persons.len());
    for (spec, texture) in persons {
        let layer = renderer.render_layer(spec, texture, h, w)?;
        let o = out.data_mut();
        for (p, &a) in layer.alpha.iter().enumerate() {
            if a > 0.0 {
                for c in 0..3 {
                    let i = p * 3 + c;
                    o[i] = (1.0 - a) * o[i] + a * layer.rgb.data()[i];
                }
            }
        }
        layers.push(layer);
    }
    let n = layers.len();
    let mut weights = vec![vec![0.0; h * w]; n];
    let mut transmit = vec![1.0; h * w];
    for k in (0..n).rev() {
        for p in 0..h * w {
            let a = layers[k].alpha[p];
            weights[k][p] = a * transmit[p];
            transmit[p] *= 1.0 - a;
        }
    }
    Ok(SceneRender {
        image: ImagePlane::from_tensor_clamped(out)?,
        layers,
        weights,
    })
}
