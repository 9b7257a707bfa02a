//! Defenses that locate a suspicious region and blank or inpaint it.

use std::collections::VecDeque;
use std::fmt::Debug;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::entropy::{window_entropy_map, window_gradient_sums, WindowGrid};
use super::DefenseError;
use crate::gateway::wire::ProcessAdapter;
use crate::model::{BoundingBox, ImagePlane, MaskMap};

/// Replacement intensity for masked pixels.
pub const FILL: f64 = 0.5;

pub fn fill_mask(image: &ImagePlane, mask: &MaskMap) -> ImagePlane {
    let mut data = image.data().to_vec();
    for (px, &m) in data.chunks_exact_mut(3).zip(mask.values()) {
        if m >= 0.5 {
            px.fill(FILL);
        }
    }
    ImagePlane::from_clamped(image.height(), image.width(), data).expect("same dims")
}

fn check_mask(image: &ImagePlane, mask: &MaskMap, who: &str) -> Result<(), DefenseError> {
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(DefenseError::Component {
            component: who.to_string(),
            message: format!(
                "mask is {}x{}, image is {}x{}",
                mask.height(),
                mask.width(),
                image.height(),
                image.width()
            ),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdbdParams {
    /// Bits.
    pub entropy_threshold: f64,
    pub gradient_threshold: f64,
    pub window: usize,
    pub stride: usize,
    pub bins: usize,
}

impl Default for IdbdParams {
    fn default() -> Self {
        Self {
            entropy_threshold: 5.0,
            gradient_threshold: 8.0,
            window: 8,
            stride: 4,
            bins: 256,
        }
    }
}

/// Windows above both the entropy and the gradient-sum threshold.
pub fn idbd_mask(image: &ImagePlane, p: &IdbdParams) -> Result<MaskMap, DefenseError> {
    let ent = window_entropy_map(image, p.window, p.stride, p.bins)?;
    let grad = window_gradient_sums(image, &ent.grid);
    let flags: Vec<bool> = ent
        .values
        .iter()
        .zip(&grad)
        .map(|(&e, &g)| e > p.entropy_threshold && g > p.gradient_threshold)
        .collect();
    Ok(ent.grid.mask(&flags, image.height(), image.width()))
}

pub fn idbd_preprocess(image: &ImagePlane, p: &IdbdParams) -> Result<ImagePlane, DefenseError> {
    Ok(fill_mask(image, &idbd_mask(image, p)?))
}

/// A 4-connected component with its inclusive bounding rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Component {
    pub area: usize,
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

/// 4-connected components of the set pixels, in raster order of their
/// first pixel.
pub fn components(mask: &MaskMap) -> Vec<Component> {
    let (h, w) = (mask.height(), mask.width());
    let set = mask.to_bools();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !set[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut c = Component {
            area: 0,
            y0: usize::MAX,
            x0: usize::MAX,
            y1: 0,
            x1: 0,
        };
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            c.area += 1;
            c.y0 = c.y0.min(y);
            c.x0 = c.x0.min(x);
            c.y1 = c.y1.max(y);
            c.x1 = c.x1.max(x);
            let mut visit = |j: usize| {
                if set[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        out.push(c);
    }
    out
}

/// Components of at least `min_area` pixels become their filled bounding
/// rectangles; smaller ones are dropped.
pub fn shape_complete(mask: &MaskMap, min_area: usize) -> MaskMap {
    let (h, w) = (mask.height(), mask.width());
    let mut bits = vec![false; h * w];
    for c in components(mask).into_iter().filter(|c| c.area >= min_area) {
        for y in c.y0..=c.y1 {
            bits[y * w + c.x0..=y * w + c.x1].fill(true);
        }
    }
    MaskMap::from_bools(h, w, &bits)
}

/// Produces a raw patch mask for an image.
pub trait Segmenter: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn segment(&self, image: &ImagePlane) -> Result<MaskMap, DefenseError>;
}

/// Built-in segmenter: windows whose gradient sum exceeds a threshold
/// (calibrated as a high percentile of clean-image window sums).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientSegmenter {
    pub window: usize,
    pub stride: usize,
    pub threshold: f64,
}

impl Default for GradientSegmenter {
    fn default() -> Self {
        Self {
            window: 8,
            stride: 4,
            threshold: 10.0,
        }
    }
}

impl Segmenter for GradientSegmenter {
    fn name(&self) -> &str {
        "gradient-energy"
    }

    fn segment(&self, image: &ImagePlane) -> Result<MaskMap, DefenseError> {
        let grid = WindowGrid::new(image.height(), image.width(), self.window, self.stride)?;
        let flags: Vec<bool> = window_gradient_sums(image, &grid).iter().map(|&g| g > self.threshold).collect();
        Ok(grid.mask(&flags, image.height(), image.width()))
    }
}

/// Segmenter, locator or completer served by an external process.
pub struct ExternalComponent {
    name: String,
    adapter: Mutex<ProcessAdapter>,
}

impl Debug for ExternalComponent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalComponent").field("name", &self.name).finish_non_exhaustive()
    }
}

impl ExternalComponent {
    pub fn new(name: impl Into<String>, adapter: ProcessAdapter) -> Self {
        Self {
            name: name.into(),
            adapter: Mutex::new(adapter),
        }
    }

    fn err(&self, e: impl ToString) -> DefenseError {
        DefenseError::Component {
            component: self.name.clone(),
            message: e.to_string(),
        }
    }

    fn with<T>(&self, f: impl FnOnce(&mut ProcessAdapter) -> Result<T, crate::gateway::GatewayError>) -> Result<T, DefenseError> {
        let mut a = self.adapter.lock().map_err(|e| self.err(e))?;
        f(&mut a).map_err(|e| self.err(e))
    }
}

impl Segmenter for ExternalComponent {
    fn name(&self) -> &str {
        &self.name
    }

    fn segment(&self, image: &ImagePlane) -> Result<MaskMap, DefenseError> {
        let m = self.with(|a| a.mask(image))?;
        check_mask(image, &m, &self.name)?;
        Ok(m)
    }
}

pub fn sac_preprocess(image: &ImagePlane, segmenter: &dyn Segmenter, min_area: usize) -> Result<ImagePlane, DefenseError> {
    let raw = segmenter.segment(image)?;
    check_mask(image, &raw, segmenter.name())?;
    Ok(fill_mask(image, &shape_complete(&raw.binarize(0.5), min_area)))
}

/// Returns boxes around suspected patches.
pub trait PatchLocator: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn locate(&self, image: &ImagePlane) -> Result<Vec<BoundingBox>, DefenseError>;
}

/// Built-in stand-in for a trained patch detector: bounding rectangles of
/// the gradient segmenter's components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterLocator {
    pub segmenter: GradientSegmenter,
    pub min_area: usize,
}

impl PatchLocator for SegmenterLocator {
    fn name(&self) -> &str {
        "segmenter-boxes"
    }

    fn locate(&self, image: &ImagePlane) -> Result<Vec<BoundingBox>, DefenseError> {
        let raw = self.segmenter.segment(image)?;
        Ok(components(&raw)
            .into_iter()
            .filter(|c| c.area >= self.min_area)
            .map(|c| BoundingBox {
                x_min: c.x0 as f64,
                y_min: c.y0 as f64,
                x_max: (c.x1 + 1) as f64,
                y_max: (c.y1 + 1) as f64,
            })
            .collect())
    }
}

impl PatchLocator for ExternalComponent {
    fn name(&self) -> &str {
        &self.name
    }

    fn locate(&self, image: &ImagePlane) -> Result<Vec<BoundingBox>, DefenseError> {
        self.with(|a| a.boxes(image))
    }
}

/// Masks every pixel whose center lies inside one of `boxes`.
pub fn mask_boxes(image: &ImagePlane, boxes: &[BoundingBox]) -> ImagePlane {
    let (h, w) = (image.height(), image.width());
    let mut bits = vec![false; h * w];
    for b in boxes {
        for y in 0..h {
            let cy = y as f64 + 0.5;
            if cy <= b.y_min || cy >= b.y_max {
                continue;
            }
            for x in 0..w {
                let cx = x as f64 + 0.5;
                if cx > b.x_min && cx < b.x_max {
                    bits[y * w + x] = true;
                }
            }
        }
    }
    fill_mask(image, &MaskMap::from_bools(h, w, &bits))
}

pub fn patch_detector_mask(image: &ImagePlane, locator: &dyn PatchLocator) -> Result<ImagePlane, DefenseError> {
    Ok(mask_boxes(image, &locator.locate(image)?))
}

/// Turns a raw detection mask into a completed patch mask.
pub trait Completer: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn complete(&self, raw: &MaskMap) -> Result<MaskMap, DefenseError>;
}

/// Closing with a square element of the given radius, then hole filling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorphCompleter {
    pub radius: usize,
}

impl Default for MorphCompleter {
    fn default() -> Self {
        Self { radius: 1 }
    }
}

fn morph(bits: &[bool], h: usize, w: usize, r: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (ya, yb) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (xa, xb) = (x.saturating_sub(r), (x + r).min(w - 1));
            let full = yb - ya == 2 * r && xb - xa == 2 * r;
            let mut hit = !dilate && full;
            'scan: for yy in ya..=yb {
                for xx in xa..=xb {
                    if bits[yy * w + xx] == dilate {
                        hit = dilate;
                        break 'scan;
                    }
                }
            }
            out[y * w + x] = hit;
        }
    }
    out
}

/// Dilation followed by erosion, computed on a canvas padded by `radius` so
/// the result does not depend on where the image edge falls.
pub fn closing(mask: &MaskMap, radius: usize) -> MaskMap {
    let (h, w) = (mask.height(), mask.width());
    let (ph, pw) = (h + 2 * radius, w + 2 * radius);
    let mut padded = vec![false; ph * pw];
    for (i, b) in mask.to_bools().into_iter().enumerate() {
        padded[(i / w + radius) * pw + i % w + radius] = b;
    }
    let d = morph(&padded, ph, pw, radius, true);
    let e = morph(&d, ph, pw, radius, false);
    let bits: Vec<bool> = (0..h * w).map(|i| e[(i / w + radius) * pw + i % w + radius]).collect();
    MaskMap::from_bools(h, w, &bits)
}

/// Sets every unset pixel not 4-connected to the image border.
pub fn fill_holes(mask: &MaskMap) -> MaskMap {
    let (h, w) = (mask.height(), mask.width());
    let set = mask.to_bools();
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    for i in 0..h * w {
        let (y, x) = (i / w, i % w);
        if (y == 0 || x == 0 || y + 1 == h || x + 1 == w) && !set[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        let mut n = Vec::with_capacity(4);
        if y > 0 {
            n.push(i - w);
        }
        if y + 1 < h {
            n.push(i + w);
        }
        if x > 0 {
            n.push(i - 1);
        }
        if x + 1 < w {
            n.push(i + 1);
        }
        for j in n {
            if !set[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        }
    }
    let bits: Vec<bool> = outside.iter().map(|&o| !o).collect();
    MaskMap::from_bools(h, w, &bits)
}

impl Completer for MorphCompleter {
    fn name(&self) -> &str {
        "morphological"
    }

    fn complete(&self, raw: &MaskMap) -> Result<MaskMap, DefenseError> {
        Ok(fill_holes(&closing(raw, self.radius)))
    }
}

impl Completer for ExternalComponent {
    fn name(&self) -> &str {
        &self.name
    }

    /// The adapter sees the raw mask as a grayscale image.
    fn complete(&self, raw: &MaskMap) -> Result<MaskMap, DefenseError> {
        let img = ImagePlane::from_fn(raw.height(), raw.width(), |y, x| [raw.get(y, x); 3]);
        let m = self.with(|a| a.mask(&img))?;
        check_mask(&img, &m, &self.name)?;
        Ok(m.binarize(0.5))
    }
}

pub const INPAINT_TOLERANCE: f64 = 1e-4;
pub const INPAINT_MAX_ITERATIONS: usize = 500;

/// Fills masked pixels by repeated averaging of their 4-neighbors until the
/// largest update falls below `tolerance` or `max_iterations` is reached.
pub fn inpaint_diffusion(image: &ImagePlane, mask: &MaskMap, tolerance: f64, max_iterations: usize) -> ImagePlane {
    let (h, w) = (image.height(), image.width());
    let holes: Vec<usize> = (0..h * w).filter(|&i| mask.values()[i] >= 0.5).collect();
    if holes.is_empty() {
        return image.clone();
    }
    let known = h * w - holes.len();
    let mut data = image.data().to_vec();
    // start from the mean of the known pixels
    let mut mean = [FILL; 3];
    if known > 0 {
        for c in 0..3 {
            let s: f64 = (0..h * w).filter(|&i| mask.values()[i] < 0.5).map(|i| data[i * 3 + c]).sum();
            mean[c] = s / known as f64;
        }
    }
    for &i in &holes {
        data[i * 3..i * 3 + 3].copy_from_slice(&mean);
    }
    if known > 0 {
        let mut next = data.clone();
        for _ in 0..max_iterations {
            let mut delta: f64 = 0.0;
            for &i in &holes {
                let (y, x) = (i / w, i % w);
                let mut acc = [0.0; 3];
                let mut n = 0.0;
                let mut add = |j: usize| {
                    for c in 0..3 {
                        acc[c] += data[j * 3 + c];
                    }
                    n += 1.0;
                };
                if y > 0 {
                    add(i - w);
                }
                if y + 1 < h {
                    add(i + w);
                }
                if x > 0 {
                    add(i - 1);
                }
                if x + 1 < w {
                    add(i + 1);
                }
                for c in 0..3 {
                    let v = acc[c] / n;
                    delta = delta.max((v - data[i * 3 + c]).abs());
                    next[i * 3 + c] = v;
                }
            }
            std::mem::swap(&mut data, &mut next);
            if delta < tolerance {
                break;
            }
        }
    }
    ImagePlane::from_clamped(h, w, data).expect("same dims")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JediParams {
    pub window: usize,
    pub stride: usize,
    pub bins: usize,
    /// Bits.
    pub threshold: f64,
}

impl Default for JediParams {
    fn default() -> Self {
        Self {
            window: 8,
            stride: 4,
            bins: 256,
            threshold: 5.5,
        }
    }
}

pub fn jedi_raw_mask(image: &ImagePlane, p: &JediParams) -> Result<MaskMap, DefenseError> {
    let ent = window_entropy_map(image, p.window, p.stride, p.bins)?;
    let flags: Vec<bool> = ent.values.iter().map(|&e| e > p.threshold).collect();
    Ok(ent.grid.mask(&flags, image.height(), image.width()))
}

pub fn jedi_preprocess(image: &ImagePlane, completer: &dyn Completer, p: &JediParams) -> Result<ImagePlane, DefenseError> {
    let raw = jedi_raw_mask(image, p)?;
    if raw.is_empty() {
        return Ok(image.clone());
    }
    let mask = completer.complete(&raw)?;
    check_mask(image, &mask, completer.name())?;
    Ok(inpaint_diffusion(image, &mask, INPAINT_TOLERANCE, INPAINT_MAX_ITERATIONS))
}
