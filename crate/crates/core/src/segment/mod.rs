//! Segmenter contract, backends, and detection/mask algebra.

pub mod http;
pub mod mask;
pub mod mock;
pub mod nms;
pub mod subprocess;
pub mod wire;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::PointPromptSet;

pub use self::http::HttpSegmenter;
pub use self::mask::{box_iou, mask_iou, mask_to_box, Bitmap, MaskError, PixelBox, SegMask};
pub use self::mock::MockSegmenter;
pub use self::nms::{nms, nms_per_label};
pub use self::subprocess::SubprocessSegmenter;

#[derive(Debug, Error)]
pub enum SegmentError {
    /// The connection to the backend failed (I/O, process exit, HTTP status).
    #[error("segmenter transport failure: {0}")]
    Transport(String),
    /// The backend understood the request and refused it.
    #[error("segmenter error: {0}")]
    Backend(String),
    #[error("segmenter protocol violation: {0}")]
    Protocol(String),
    #[error("mask is {got:?}, expected {expected:?}")]
    DimensionMismatch { expected: (u32, u32), got: (u32, u32) },
    #[error("segmenter returned no masks")]
    NoMasks,
    #[error("invalid prompts: {0}")]
    InvalidPrompts(String),
    #[error("invalid mask: {0}")]
    Mask(#[from] MaskError),
    #[error("segmenter setup: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredMask {
    pub mask: SegMask,
    pub score: f64,
}

/// Anything that answers point prompts with masks.
pub trait Segmenter: Send + Sync {
    /// Backend call without post-condition checks; prefer [`segment`].
    fn segment_raw(
        &self,
        image_ref: &str,
        prompts: &PointPromptSet,
    ) -> Result<Vec<ScoredMask>, SegmentError>;
}

/// Calls `seg` and enforces the contract: prompts inside a `dims` image,
/// at least one mask back, every mask `dims`-sized and well-formed, sorted
/// by score descending.
pub fn segment(
    seg: &dyn Segmenter,
    image_ref: &str,
    prompts: &PointPromptSet,
    dims: (u32, u32),
) -> Result<Vec<ScoredMask>, SegmentError> {
    prompts
        .validate(dims.0, dims.1)
        .map_err(SegmentError::InvalidPrompts)?;
    let mut masks = seg.segment_raw(image_ref, prompts)?;
    if masks.is_empty() {
        return Err(SegmentError::NoMasks);
    }
    for m in &masks {
        if m.mask.dims() != dims {
            return Err(SegmentError::DimensionMismatch {
                expected: dims,
                got: m.mask.dims(),
            });
        }
        m.mask.validate()?;
    }
    masks.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(masks)
}

/// Where a detection came from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub view: usize,
    pub prompt: u32,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub mapped_category: Option<String>,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub mask: SegMask,
    pub provenance: Provenance,
}

impl Detection {
    /// Builds a detection whose box is the tight box of `mask`.
    pub fn new(
        label: impl Into<String>,
        score: f64,
        mask: SegMask,
        provenance: Provenance,
    ) -> Result<Self, MaskError> {
        let bbox = mask_to_box(&mask)?;
        Ok(Detection {
            label: label.into(),
            mapped_category: None,
            score,
            bbox,
            mask,
            provenance,
        })
    }
}

/// A crop of a larger image is addressed as `<image>#crop=x,y,w,h`.
pub fn crop_ref(image: &str, x: u32, y: u32, w: u32, h: u32) -> String {
    format!("{image}#crop={x},{y},{w},{h}")
}

/// Splits an image reference into its base and optional crop rectangle.
pub fn parse_crop_ref(image_ref: &str) -> (&str, Option<[u32; 4]>) {
    if let Some((base, spec)) = image_ref.rsplit_once("#crop=") {
        let parts: Vec<u32> = spec.split(',').filter_map(|p| p.trim().parse().ok()).collect();
        if let [x, y, w, h] = parts[..] {
            return (base, Some([x, y, w, h]));
        }
    }
    (image_ref, None)
}

/// Backend selected from a `--segmenter` argument.
pub enum SegmenterHandle {
    Mock(MockSegmenter),
    Subprocess(SubprocessSegmenter),
    Http(HttpSegmenter),
}

impl SegmenterHandle {
    /// Parses `mock:<labels.pgm>`, `exec:<command>` or `http:<url>`.
    pub fn from_spec(spec: &str, pool: usize) -> Result<Self, SegmentError> {
        let (kind, arg) = spec
            .split_once(':')
            .ok_or_else(|| SegmentError::Setup(format!("bad segmenter spec `{spec}`")))?;
        match kind {
            "mock" => Ok(SegmenterHandle::Mock(
                MockSegmenter::load(arg).map_err(|e| SegmentError::Setup(e.to_string()))?,
            )),
            "exec" => Ok(SegmenterHandle::Subprocess(SubprocessSegmenter::spawn(arg, pool)?)),
            "http" => Ok(SegmenterHandle::Http(HttpSegmenter::new(arg))),
            other => Err(SegmentError::Setup(format!("unknown segmenter backend `{other}`"))),
        }
    }
}

impl Segmenter for SegmenterHandle {
    fn segment_raw(
        &self,
        image_ref: &str,
        prompts: &PointPromptSet,
    ) -> Result<Vec<ScoredMask>, SegmentError> {
        match self {
            SegmenterHandle::Mock(m) => m.segment_raw(image_ref, prompts),
            SegmenterHandle::Subprocess(s) => s.segment_raw(image_ref, prompts),
            SegmenterHandle::Http(h) => h.segment_raw(image_ref, prompts),
        }
    }
}
