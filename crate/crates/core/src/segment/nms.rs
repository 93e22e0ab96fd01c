use std::cmp::Ordering;

use super::mask::box_iou;
use super::Detection;

/// Score descending, then smaller row-major box origin (`y1`, then `x1`).
/// Remaining ties keep input order (the sort is stable).
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| (a.bbox.y1, a.bbox.x1).cmp(&(b.bbox.y1, b.bbox.x1)))
}

/// Greedy class-agnostic NMS: a detection survives iff its box IoU with
/// every already-kept detection is below `iou_thresh`.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| box_iou(&k.bbox, &d.bbox) < iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// NMS applied independently within each label; output in global order.
pub fn nms_per_label(dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    let mut groups: Vec<(String, Vec<Detection>)> = Vec::new();
    for d in dets {
        match groups.iter_mut().find(|(l, _)| *l == d.label) {
            Some((_, g)) => g.push(d),
            None => groups.push((d.label.clone(), vec![d])),
        }
    }
    let mut out: Vec<Detection> = groups
        .into_iter()
        .flat_map(|(_, g)| nms(g, iou_thresh))
        .collect();
    out.sort_by(detection_order);
    out
}
