//! Deterministic label-image segmenter used as a test oracle.
//!
//! The mask is every pixel carrying the label found under the first
//! positive point. A negative point on that same label carves out its own
//! 8-connected same-label region, unless that region also holds the
//! positive point (the object cannot exclude itself). Label 0 is
//! background and yields an error. Mask prompts are accepted and ignored.

use std::collections::VecDeque;
use std::path::Path;

use super::mask::{Bitmap, SegMask};
use super::{parse_crop_ref, ScoredMask, SegmentError, Segmenter};
use crate::labels::{LabelError, LabelImage};
use crate::prompting::{Point, PointPromptSet};

pub const NO_OBJECT: &str = "no object at positive point";

pub struct MockSegmenter {
    labels: LabelImage,
}

impl MockSegmenter {
    pub fn new(labels: LabelImage) -> Self {
        Self { labels }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LabelError> {
        Ok(Self::new(LabelImage::load(path)?))
    }

    pub fn labels(&self) -> &LabelImage {
        &self.labels
    }
}

impl Segmenter for MockSegmenter {
    fn segment_raw(
        &self,
        image_ref: &str,
        prompts: &PointPromptSet,
    ) -> Result<Vec<ScoredMask>, SegmentError> {
        let mask = match parse_crop_ref(image_ref).1 {
            Some([x, y, w, h]) => {
                let view = self
                    .labels
                    .crop(x, y, w, h)
                    .map_err(|e| SegmentError::Backend(e.to_string()))?;
                mock_segment(&view, prompts)?
            }
            None => mock_segment(&self.labels, prompts)?,
        };
        Ok(vec![ScoredMask { mask, score: 1.0 }])
    }
}

fn pixel_of(labels: &LabelImage, p: &Point) -> Result<(u32, u32), SegmentError> {
    if !(p.x >= 0.0 && p.y >= 0.0 && p.x < f64::from(labels.width) && p.y < f64::from(labels.height)) {
        return Err(SegmentError::Backend(format!(
            "point ({}, {}) outside {}x{} image",
            p.x, p.y, labels.width, labels.height
        )));
    }
    Ok((p.x.floor() as u32, p.y.floor() as u32))
}

/// 8-connected same-label flood fill from `seed`.
fn flood(labels: &LabelImage, seed: (u32, u32)) -> Bitmap {
    let target = labels.get(seed.0, seed.1);
    let mut seen = Bitmap::new(labels.width, labels.height);
    let mut queue = VecDeque::from([seed]);
    seen.set(seed.0, seed.1, true);
    while let Some((x, y)) = queue.pop_front() {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (nx, ny) = (i64::from(x) + dx, i64::from(y) + dy);
                if nx < 0 || ny < 0 || nx >= i64::from(labels.width) || ny >= i64::from(labels.height) {
                    continue;
                }
                let (nx, ny) = (nx as u32, ny as u32);
                if !seen.get(nx, ny) && labels.get(nx, ny) == target {
                    seen.set(nx, ny, true);
                    queue.push_back((nx, ny));
                }
            }
        }
    }
    seen
}

pub fn mock_segment(labels: &LabelImage, prompts: &PointPromptSet) -> Result<SegMask, SegmentError> {
    let first = prompts
        .positives
        .first()
        .ok_or_else(|| SegmentError::InvalidPrompts("no positive point".into()))?;
    let pos = pixel_of(labels, first)?;
    let label = labels.get(pos.0, pos.1);
    if label == 0 {
        return Err(SegmentError::Backend(NO_OBJECT.into()));
    }
    let mut mask = Bitmap {
        width: labels.width,
        height: labels.height,
        bits: labels.data.iter().map(|&l| l == label).collect(),
    };
    for neg in &prompts.negatives {
        let at = pixel_of(labels, neg)?;
        if labels.get(at.0, at.1) != label {
            continue;
        }
        let region = flood(labels, at);
        if region.get(pos.0, pos.1) {
            continue;
        }
        for (m, &r) in mask.bits.iter_mut().zip(&region.bits) {
            *m &= !r;
        }
    }
    Ok(SegMask::encode(&mask))
}
