//! Point prompts from attention maps and the iterative refinement loop.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attnflow::AttentionMap;
use crate::segment::{segment, MaskError, SegMask, SegmentError, Segmenter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPromptSet {
    pub positives: Vec<Point>,
    pub negatives: Vec<Point>,
    pub mask_prompt: Option<SegMask>,
}

impl PointPromptSet {
    pub fn new(positives: Vec<Point>, negatives: Vec<Point>) -> Self {
        Self {
            positives,
            negatives,
            mask_prompt: None,
        }
    }

    pub fn with_mask(mut self, mask: SegMask) -> Self {
        self.mask_prompt = Some(mask);
        self
    }

    /// At least one positive, every point inside a `width x height` image.
    pub fn validate(&self, width: u32, height: u32) -> Result<(), String> {
        if self.positives.is_empty() {
            return Err("no positive point".into());
        }
        for p in self.positives.iter().chain(&self.negatives) {
            let inside = p.x >= 0.0 && p.y >= 0.0 && p.x < f64::from(width) && p.y < f64::from(height);
            if !inside {
                return Err(format!("point ({}, {}) outside {width}x{height}", p.x, p.y));
            }
        }
        if let Some(m) = &self.mask_prompt {
            if m.dims() != (width, height) {
                return Err(format!("mask prompt is {:?}, image {width}x{height}", m.dims()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    pub fn from_neighbors(n: u8) -> Option<Self> {
        match n {
            4 => Some(Connectivity::Four),
            8 => Some(Connectivity::Eight),
            _ => None,
        }
    }

    /// Already-visited neighbours in a row-major raster scan.
    fn backward_offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
        }
    }
}

/// Grid cells of one connected region, sorted row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    pub cells: Vec<(usize, usize)>,
    pub grid_side: usize,
}

impl RegionMask {
    pub fn contains(&self, cell: (usize, usize)) -> bool {
        self.cells.binary_search(&cell).is_ok()
    }
}

/// Cells at or above `tau * max`; nothing is active on an all-zero map.
pub fn threshold_filter(map: &AttentionMap, tau: f64) -> Array2<bool> {
    let max = map.max();
    if max <= 0.0 {
        return Array2::from_elem(map.grid.dim(), false);
    }
    let cut = tau * max;
    map.grid.mapv(|v| v >= cut)
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Keeps the smaller index as root so roots are row-major minima.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Largest connected component of `active`; ties go to the component whose
/// first cell comes earliest in row-major order.
pub fn max_connected_region(active: &Array2<bool>, connectivity: Connectivity) -> Option<RegionMask> {
    let (rows, cols) = active.dim();
    let idx = |r: usize, c: usize| r * cols + c;
    let mut sets = DisjointSet::new(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            if !active[[r, c]] {
                continue;
            }
            for &(dr, dc) in connectivity.backward_offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nc as usize >= cols {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if active[[nr, nc]] {
                    sets.union(idx(r, c), idx(nr, nc));
                }
            }
        }
    }
    let mut sizes = vec![0usize; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            if active[[r, c]] {
                let root = sets.find(idx(r, c));
                sizes[root] += 1;
            }
        }
    }
    // roots are component minima, so scanning in index order with a strict
    // comparison resolves ties to the earliest component
    let (best_root, best_size) = sizes
        .iter()
        .enumerate()
        .fold((0, 0), |best, (root, &size)| if size > best.1 { (root, size) } else { best });
    if best_size == 0 {
        return None;
    }
    let mut cells = Vec::with_capacity(best_size);
    for r in 0..rows {
        for c in 0..cols {
            if active[[r, c]] && sets.find(idx(r, c)) == best_root {
                cells.push((r, c));
            }
        }
    }
    Some(RegionMask {
        cells,
        grid_side: rows,
    })
}

fn point_at(map: &AttentionMap, (r, c): (usize, usize)) -> Point {
    let (x, y) = map.cell_center(r, c);
    Point { x, y }
}

/// One positive at the region's strongest cell and one negative at the
/// weakest cell outside it (none when the region covers the grid).
pub fn sample_points(map: &AttentionMap, region: &RegionMask) -> PointPromptSet {
    let mut best: Option<((usize, usize), f64)> = None;
    for &cell in &region.cells {
        let v = map.grid[cell];
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((cell, v));
        }
    }
    let positive = best.expect("region is non-empty").0;

    let mut worst: Option<((usize, usize), f64)> = None;
    for ((r, c), &v) in map.grid.indexed_iter() {
        if region.contains((r, c)) {
            continue;
        }
        if worst.is_none_or(|(_, w)| v < w) {
            worst = Some(((r, c), v));
        }
    }
    PointPromptSet::new(
        vec![point_at(map, positive)],
        worst.map(|(cell, _)| point_at(map, cell)).into_iter().collect(),
    )
}

/// Zeroes every cell whose pixel-center sample is covered by `seg`.
pub fn mask_attention(map: &AttentionMap, seg: &SegMask) -> Result<AttentionMap, MaskError> {
    let dims = (map.image_width, map.image_height);
    if seg.dims() != dims {
        return Err(MaskError::Dimensions { a: dims, b: seg.dims() });
    }
    let bits = seg.decode()?;
    let mut out = map.clone();
    for ((r, c), v) in out.grid.indexed_iter_mut() {
        let (x, y) = map.cell_center(r, c);
        let px = (x.floor() as u32).min(map.image_width - 1);
        let py = (y.floor() as u32).min(map.image_height - 1);
        if bits.get(px, py) {
            *v = 0.0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterConfig {
    pub tau: f64,
    pub connectivity: Connectivity,
    pub max_iters: usize,
    pub absolute_floor: f64,
}

impl Default for IterConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            connectivity: Connectivity::Eight,
            max_iters: 5,
            absolute_floor: 1e-6,
        }
    }
}

impl IterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_iters == 0 {
            return Err("max_iters must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self.absolute_floor.is_nan() || self.absolute_floor < 0.0 {
            return Err(format!("absolute_floor must be >= 0, got {}", self.absolute_floor));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    MaxIters,
    NoRegion,
    BelowFloor,
    /// The backend refused the prompt (e.g. nothing under the positive).
    Rejected(String),
    EmptyMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedMask {
    pub mask: SegMask,
    pub score: f64,
    pub iteration: usize,
    pub prompts: PointPromptSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterOutcome {
    pub masks: Vec<RefinedMask>,
    pub stop: StopReason,
    /// Iteration index (0-based) at which the loop stopped.
    pub stopped_at: usize,
    pub segmenter_calls: usize,
}

#[derive(Debug, Error)]
pub enum IterError {
    #[error("invalid iteration config: {0}")]
    Config(String),
    #[error("iteration {iteration}: {source}")]
    Segment {
        iteration: usize,
        #[source]
        source: SegmentError,
    },
    #[error("iteration {iteration}: {source}")]
    Mask {
        iteration: usize,
        #[source]
        source: MaskError,
    },
}

/// Sample -> segment -> re-segment with the mask as prompt -> mask the map,
/// until `max_iters`, no region is left, the residual maximum drops below
/// the floor, or the backend refuses a prompt.
pub fn iterate(
    map: &AttentionMap,
    seg: &dyn Segmenter,
    image_ref: &str,
    cfg: &IterConfig,
) -> Result<IterOutcome, IterError> {
    cfg.validate().map_err(IterError::Config)?;
    let dims = (map.image_width, map.image_height);
    let mut current = map.clone();
    let mut masks = Vec::new();
    let mut calls = 0;
    let finish = |masks, stop, stopped_at, calls| {
        Ok(IterOutcome {
            masks,
            stop,
            stopped_at,
            segmenter_calls: calls,
        })
    };
    for iteration in 0..cfg.max_iters {
        if current.max() < cfg.absolute_floor {
            return finish(masks, StopReason::BelowFloor, iteration, calls);
        }
        let active = threshold_filter(&current, cfg.tau);
        let Some(region) = max_connected_region(&active, cfg.connectivity) else {
            return finish(masks, StopReason::NoRegion, iteration, calls);
        };
        let prompts = sample_points(&current, &region);
        let seg_err = |source| IterError::Segment { iteration, source };

        calls += 1;
        let initial = match segment(seg, image_ref, &prompts, dims) {
            Ok(m) => m.into_iter().next().expect("segment returns at least one mask"),
            Err(SegmentError::Backend(msg)) => {
                return finish(masks, StopReason::Rejected(msg), iteration, calls)
            }
            Err(e) => return Err(seg_err(e)),
        };
        let cascaded = prompts.clone().with_mask(initial.mask);
        calls += 1;
        let refined = match segment(seg, image_ref, &cascaded, dims) {
            Ok(m) => m.into_iter().next().expect("segment returns at least one mask"),
            Err(SegmentError::Backend(msg)) => {
                return finish(masks, StopReason::Rejected(msg), iteration, calls)
            }
            Err(e) => return Err(seg_err(e)),
        };
        if refined.mask.area() == 0 {
            return finish(masks, StopReason::EmptyMask, iteration, calls);
        }
        current = mask_attention(&current, &refined.mask)
            .map_err(|source| IterError::Mask { iteration, source })?;
        masks.push(RefinedMask {
            mask: refined.mask,
            score: refined.score,
            iteration,
            prompts,
        });
    }
    finish(masks, StopReason::MaxIters, cfg.max_iters, calls)
}
