//! Class-agnostic average recall (mAR / AR50 / AR75) over box IoU.
//!
//! For each IoU threshold `t` in 0.50, 0.55, ..., 0.95 detections are
//! visited in score order and each claims the unmatched ground-truth box
//! with the highest IoU, provided that IoU is at least `t`. Recall at `t` is
//! the matched fraction of all ground-truth objects across images.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::mask::iou_xyxy;
use crate::segment::nms::detection_order;
use crate::segment::{Detection, SegMask};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty ground truth")]
    EmptyGroundTruth,
    #[error("invalid ground-truth box {0:?}")]
    InvalidBox([f64; 4]),
    #[error("reading {path}: {message}")]
    Read { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<SegMask>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub objects: Vec<GtObject>,
}

impl GroundTruth {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let err = |message: String| EvalError::Read {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let gt: GroundTruth = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for o in &self.objects {
            let [x1, y1, x2, y2] = o.bbox;
            if !(x1 < x2 && y1 < y2) {
                return Err(EvalError::InvalidBox(o.bbox));
            }
        }
        Ok(())
    }
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>, EvalError> {
    let path = path.as_ref();
    let err = |message: String| EvalError::Read {
        path: path.display().to_string(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

/// The ten thresholds `0.50 + 0.05 k`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    #[serde(rename = "mAR")]
    pub mar: f64,
    #[serde(rename = "AR50")]
    pub ar50: f64,
    #[serde(rename = "AR75")]
    pub ar75: f64,
    /// Unrounded recall fraction at each threshold.
    pub recall: Vec<f64>,
    pub num_gt: usize,
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// Greedy one-to-one matching count for one image at threshold `t`.
fn matched(dets: &[&Detection], gt: &GroundTruth, t: f64) -> usize {
    let mut taken = vec![false; gt.objects.len()];
    let mut hits = 0;
    for d in dets {
        let b = d.bbox.as_f64();
        let mut best: Option<(usize, f64)> = None;
        for (g, obj) in gt.objects.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = iou_xyxy(b, obj.bbox);
            if iou >= t && best.is_none_or(|(_, bi)| iou > bi) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            hits += 1;
        }
    }
    hits
}

/// Recall over `(detections, ground truth)` pairs, one pair per image.
pub fn evaluate(images: &[(Vec<Detection>, GroundTruth)]) -> Result<RecallReport, EvalError> {
    let num_gt: usize = images.iter().map(|(_, gt)| gt.objects.len()).sum();
    if num_gt == 0 {
        return Err(EvalError::EmptyGroundTruth);
    }
    for (_, gt) in images {
        gt.validate()?;
    }
    let sorted: Vec<Vec<&Detection>> = images
        .iter()
        .map(|(dets, _)| {
            let mut v: Vec<&Detection> = dets.iter().collect();
            v.sort_by(|a, b| detection_order(a, b));
            v
        })
        .collect();
    let recall: Vec<f64> = iou_thresholds()
        .iter()
        .map(|&t| {
            let hits: usize = sorted.iter().zip(images).map(|(d, (_, gt))| matched(d, gt, t)).sum();
            hits as f64 / num_gt as f64
        })
        .collect();
    Ok(RecallReport {
        mar: round1(100.0 * recall.iter().sum::<f64>() / recall.len() as f64),
        ar50: round1(100.0 * recall[0]),
        ar75: round1(100.0 * recall[5]),
        recall,
        num_gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::{Bitmap, Provenance};

    fn det(b: [u32; 4], score: f64) -> Detection {
        let mut bm = Bitmap::new(20, 20);
        for y in b[1]..b[3] {
            for x in b[0]..b[2] {
                bm.set(x, y, true);
            }
        }
        Detection::new("x", score, SegMask::encode(&bm), Provenance::default()).unwrap()
    }

    fn gt(boxes: &[[f64; 4]]) -> GroundTruth {
        GroundTruth {
            objects: boxes
                .iter()
                .map(|&bbox| GtObject { bbox, label: None, mask: None })
                .collect(),
        }
    }

    #[test]
    fn perfect_detections_score_100() {
        let g = gt(&[[0.0, 0.0, 4.0, 4.0], [10.0, 10.0, 15.0, 12.0]]);
        let d = vec![det([0, 0, 4, 4], 0.9), det([10, 10, 15, 12], 0.3)];
        let r = evaluate(&[(d, g)]).unwrap();
        assert_eq!((r.mar, r.ar50, r.ar75), (100.0, 100.0, 100.0));
    }

    #[test]
    fn iou_point_six_hits_three_thresholds() {
        // [0,0,5,1] vs [0,0,3,1]: inter 3, union 5 -> IoU 0.6
        let g = gt(&[[0.0, 0.0, 5.0, 1.0], [10.0, 10.0, 12.0, 12.0]]);
        let r = evaluate(&[(vec![det([0, 0, 3, 1], 1.0)], g)]).unwrap();
        assert_eq!(r.ar50, 50.0);
        assert_eq!(r.ar75, 0.0);
        assert_eq!(r.mar, 15.0);
    }

    #[test]
    fn no_ground_truth_is_an_error() {
        let err = evaluate(&[(vec![], GroundTruth::default())]).unwrap_err();
        assert_eq!(err.to_string(), "empty ground truth");
    }

    #[test]
    fn one_detection_matches_one_object() {
        let g = gt(&[[0.0, 0.0, 4.0, 4.0], [0.0, 0.0, 4.0, 4.0]]);
        let r = evaluate(&[(vec![det([0, 0, 4, 4], 1.0)], g)]).unwrap();
        assert_eq!(r.ar50, 50.0);
    }

    #[test]
    fn thresholds_are_exact_decimals() {
        let t = iou_thresholds();
        assert_eq!(t[0], 0.5);
        assert_eq!(t[2], 0.6);
        assert_eq!(t[5], 0.75);
        assert_eq!(t[9], 0.95);
    }
}
