//! PNG + JSON sidecar persistence for patches and textures.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ImagePlane, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Patch,
    Texture,
}

/// Metadata stored next to an artifact PNG as `<stem>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactSidecar {
    pub kind: ArtifactKind,
    pub gamma: f64,
    pub base_w: usize,
    pub base_h: usize,
    pub c0: f64,
    pub kappa: f64,
    pub seed: u64,
}

fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Quantizes to 8 bits per channel, rounding to nearest.
pub(crate) fn to_rgb8(image: &ImagePlane) -> image::RgbImage {
    let raw: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    image::RgbImage::from_raw(image.width() as u32, image.height() as u32, raw)
        .expect("buffer length matches dimensions")
}

pub(crate) fn from_rgb8(img: &image::RgbImage) -> ImagePlane {
    let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    ImagePlane::new(img.height() as usize, img.width() as usize, data)
        .expect("8-bit values are always in range")
}

/// Rounds every channel to the nearest 8-bit level, as a PNG round trip would.
pub fn quantize_rgb8(image: &ImagePlane) -> ImagePlane {
    from_rgb8(&to_rgb8(image))
}

/// PNG encoding of the 8-bit quantized image.
pub fn encode_png(image: &ImagePlane) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    to_rgb8(image)
        .write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    buf.into_inner()
}

/// Writes an image as 8-bit RGB PNG.
pub fn save_png(path: &Path, image: &ImagePlane) -> Result<(), ModelError> {
    fs::write(path, encode_png(image)).map_err(|e| io_err(path, e))
}

pub fn load_png(path: &Path) -> Result<ImagePlane, ModelError> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => io_err(path, io),
        other => ModelError::Codec {
            path: path.display().to_string(),
            message: other.to_string(),
        },
    })?;
    Ok(from_rgb8(&img.to_rgb8()))
}

/// Saves `pixels` as PNG at `png_path` and the sidecar next to it.
pub fn save_artifact(png_path: &Path, pixels: &ImagePlane, sidecar: &ArtifactSidecar) -> Result<(), ModelError> {
    save_png(png_path, pixels)?;
    let side = sidecar_path(png_path);
    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    fs::write(&side, json).map_err(|e| io_err(&side, e))
}

pub fn load_artifact(png_path: &Path) -> Result<(ImagePlane, ArtifactSidecar), ModelError> {
    let pixels = load_png(png_path)?;
    let side = sidecar_path(png_path);
    let text = fs::read_to_string(&side).map_err(|e| io_err(&side, e))?;
    let sidecar: ArtifactSidecar = serde_json::from_str(&text).map_err(|e| ModelError::Sidecar {
        path: side.display().to_string(),
        message: e.to_string(),
    })?;
    Ok((pixels, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn artifact_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tex.png");
        let img = ImagePlane::from_fn(4, 5, |y, x| [y as f64 / 3.0, x as f64 / 4.0, 0.123]);
        let side = ArtifactSidecar {
            kind: ArtifactKind::Texture,
            gamma: 0.1,
            base_w: 4,
            base_h: 4,
            c0: 0.2,
            kappa: 1.0,
            seed: 7,
        };
        save_artifact(&path, &img, &side).unwrap();
        let (back, side2) = load_artifact(&path).unwrap();
        assert_eq!(side, side2);
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn missing_sidecar_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        save_png(&path, &ImagePlane::filled(2, 2, [0.0; 3])).unwrap();
        assert!(matches!(load_artifact(&path), Err(ModelError::Io { .. })));
    }
}
