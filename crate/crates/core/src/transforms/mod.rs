//! Differentiable image and texture transformations.
//!
//! Every operation that sits on a gradient path returns a trace whose
//! `backward` maps an output gradient back onto the optimized pixels.
//! Resampling is bilinear throughout.

mod crop;
mod eot;
mod losses;
pub mod render;
mod sampling;
mod tps;

pub use crop::{jitter_crop, jitter_crop_at, jitter_crop_backward, jitter_offsets, toroidal_crop, toroidal_crop_backward, JitterMode, JitterView};
pub use eot::{
    apply_color_eot, apply_eot_patch, apply_patch_to_boxes, compute_patch_edge, ColorTrace, EotParams, EotRanges,
    PatchComposite, PatchTrace,
};
pub use losses::{nps_loss, nps_loss_with_grad, tv_loss, tv_loss_with_grad, PrintableSet, TV_EPSILON};
pub use sampling::{bilinear_tap, EdgeMode, SamplingGrid, Tap};
pub use render::{render_scene, BillboardRenderer, PersonRenderer, PersonSpec, SceneRender};
pub use tps::{tps_warp, TpsConfig, TpsWarp};

use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("degenerate bounding box")]
    DegenerateBox,
    #[error("patch exceeds canvas: edge {edge:.2}px on a {height}×{width} image")]
    PatchExceedsCanvas { edge: f64, height: usize, width: usize },
    #[error("degenerate control grid: {0}")]
    DegenerateControlGrid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty printable color set")]
    EmptyPrintableSet,
    #[error("malformed printable color line {line}: {content:?}")]
    PrintableParse { line: usize, content: String },
    #[error("renderer {renderer} failed: {message}")]
    Renderer { renderer: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}
