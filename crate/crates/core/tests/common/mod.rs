//! Brute-force reference implementations and random inputs shared by the
//! integration tests. Deliberately naive: plain loops over nested `Vec`s.
#![allow(dead_code)]

use std::collections::VecDeque;

use attnseg::atncache::{compute_similarity, AttentionCache};
use attnseg::segment::{Bitmap, Detection, PixelBox, Provenance, SegMask};
use ndarray::Array4;
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn random_qk(rng: &mut impl Rng, l: usize, h: usize, n: usize, d: usize, scale: f32) -> (Array4<f32>, Array4<f32>) {
    let q = Array4::from_shape_fn((l, h, n, d), |_| rng.random_range(-scale..scale));
    let k = Array4::from_shape_fn((l, h, n, d), |_| rng.random_range(-scale..scale));
    (q, k)
}

/// A `qk` cache whose single image token sits at position 0.
pub fn random_cache(rng: &mut impl Rng, l: usize, h: usize, n: usize, d: usize) -> AttentionCache {
    let (q, k) = random_qk(rng, l, h, n, d, 2.0);
    AttentionCache::from_qk(q, k, 0..1, 1, vec![]).unwrap()
}

/// Similarity as `[l][h]` nested matrices, straight from the definition.
pub fn oracle_similarity(q: &Array4<f32>, k: &Array4<f32>) -> Vec<Vec<Mat>> {
    let &[l, h, n, d] = q.shape() else { unreachable!() };
    let mut out = vec![vec![vec![vec![0.0; n]; n]; h]; l];
    for li in 0..l {
        for hi in 0..h {
            for i in 0..n {
                let logits: Vec<f64> = (0..=i)
                    .map(|j| {
                        (0..d)
                            .map(|e| f64::from(q[[li, hi, i, e]]) * f64::from(k[[li, hi, j, e]]))
                            .sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
                for j in 0..=i {
                    out[li][hi][i][j] = (logits[j] - m).exp() / z;
                }
            }
        }
    }
    out
}

pub fn sim_as_nested(cache: &AttentionCache) -> Vec<Vec<Mat>> {
    let s = compute_similarity(cache).unwrap();
    let v = s.values();
    let &[l, h, n, _] = v.shape() else { unreachable!() };
    (0..l)
        .map(|li| {
            (0..h)
                .map(|hi| (0..n).map(|i| (0..n).map(|j| v[[li, hi, i, j]]).collect()).collect())
                .collect()
        })
        .collect()
}

pub fn oracle_head_weights(s: &[Vec<Mat>]) -> Mat {
    s.iter()
        .map(|layer| {
            layer
                .iter()
                .map(|m| {
                    let n = m.len();
                    let mut total = 0.0;
                    for row in m {
                        let mut best = row[0];
                        for &v in row {
                            if v > best {
                                best = v;
                            }
                        }
                        total += best;
                    }
                    total / n as f64
                })
                .collect()
        })
        .collect()
}

pub fn oracle_aggregate(s: &[Vec<Mat>], w: &Mat) -> Vec<Mat> {
    let mut out = Vec::new();
    for (li, layer) in s.iter().enumerate() {
        let h = layer.len();
        let n = layer[0].len();
        let mut m = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for hi in 0..h {
                    acc += w[li][hi] * layer[hi][i][j];
                }
                m[i][j] = acc / h as f64;
            }
        }
        out.push(m);
    }
    out
}

pub fn oracle_regularize(stack: &[Mat]) -> Vec<Mat> {
    stack
        .iter()
        .map(|m| {
            let n = m.len();
            // column j is unmasked for rows j..n, i.e. n - j entries
            m.iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .map(|(j, &v)| v * (1.0 - (n - j - 1) as f64 / n as f64))
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn identity(n: usize) -> Mat {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn plus_identity(m: &Mat) -> Mat {
    let mut out = m.clone();
    for (i, row) in out.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    out
}

pub fn oracle_rollout(stack: &[Mat]) -> Mat {
    let n = stack[0].len();
    let mut r = vec![vec![0.0; n]; n];
    for layer in stack {
        let mut next = matmul(&plus_identity(layer), &plus_identity(&r));
        for (i, row) in next.iter_mut().enumerate() {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            } else {
                *row = identity(n)[i].clone();
            }
        }
        r = next;
    }
    r
}

pub fn max_abs_diff(a: &Mat, b: impl Fn(usize, usize) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in a.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((v - b(i, j)).abs());
        }
    }
    worst
}

/// Largest component by BFS flood fill. Ties go to the component whose
/// first cell is earliest in row-major order. Cells returned sorted.
pub fn bfs_largest(grid: &[Vec<bool>], eight: bool) -> Option<Vec<(usize, usize)>> {
    let rows = grid.len();
    let cols = grid.first().map_or(0, |r| r.len());
    let mut seen = vec![vec![false; cols]; rows];
    let mut best: Option<Vec<(usize, usize)>> = None;
    for r0 in 0..rows {
        for c0 in 0..cols {
            if !grid[r0][c0] || seen[r0][c0] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(r0, c0)]);
            seen[r0][c0] = true;
            while let Some((r, c)) = queue.pop_front() {
                comp.push((r, c));
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if (dr == 0 && dc == 0) || (!eight && dr != 0 && dc != 0) {
                            continue;
                        }
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if grid[nr][nc] && !seen[nr][nc] {
                            seen[nr][nc] = true;
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
            comp.sort();
            if best.as_ref().is_none_or(|b| comp.len() > b.len()) {
                best = Some(comp);
            }
        }
    }
    best
}

pub fn rect_bitmap(w: u32, h: u32, b: [u32; 4]) -> Bitmap {
    let mut bm = Bitmap::new(w, h);
    for y in b[1]..b[3] {
        for x in b[0]..b[2] {
            bm.set(x, y, true);
        }
    }
    bm
}

pub fn rect_detection(w: u32, h: u32, b: [u32; 4], score: f64, label: &str) -> Detection {
    Detection::new(label, score, SegMask::encode(&rect_bitmap(w, h, b)), Provenance::default()).unwrap()
}

pub fn random_box(rng: &mut impl Rng, w: u32, h: u32) -> [u32; 4] {
    let x1 = rng.random_range(0..w - 1);
    let y1 = rng.random_range(0..h - 1);
    let x2 = rng.random_range(x1 + 1..=w);
    let y2 = rng.random_range(y1 + 1..=h);
    [x1, y1, x2, y2]
}

/// Box IoU from pixel counting.
pub fn count_iou(a: [u32; 4], b: [u32; 4]) -> f64 {
    let area = |r: [u32; 4]| f64::from((r[2] - r[0]) * (r[3] - r[1]));
    let ix = a[2].min(b[2]).saturating_sub(a[0].max(b[0]));
    let iy = a[3].min(b[3]).saturating_sub(a[1].max(b[1]));
    let inter = f64::from(ix * iy);
    inter / (area(a) + area(b) - inter)
}

/// O(n^2) suppression table: pairwise IoUs up front, then one pass in
/// ranking order. Returns kept input indices in output order.
pub fn nms_reference(dets: &[Detection], thresh: f64) -> Vec<usize> {
    let n = dets.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&dets[a], &dets[b]);
        db.score
            .partial_cmp(&da.score)
            .unwrap()
            .then((da.bbox.y1, da.bbox.x1).cmp(&(db.bbox.y1, db.bbox.x1)))
            .then(a.cmp(&b))
    });
    let b = |i: usize| {
        let p: PixelBox = dets[i].bbox;
        [p.x1, p.y1, p.x2, p.y2]
    };
    let iou: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| count_iou(b(i), b(j))).collect()).collect();
    let mut suppressed = vec![false; n];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[rank + 1..] {
            if iou[i][j] >= thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Decodes a row-major RLE by walking runs pixel by pixel.
pub fn scan_decode(m: &SegMask) -> Vec<bool> {
    let mut out = Vec::with_capacity((m.width * m.height) as usize);
    for (k, &run) in m.rle.iter().enumerate() {
        out.extend(std::iter::repeat_n(k % 2 == 1, run as usize));
    }
    out
}

pub fn scan_box(bits: &[bool], w: u32) -> Option<[u32; 4]> {
    let mut b: Option<[u32; 4]> = None;
    for (i, &on) in bits.iter().enumerate() {
        if !on {
            continue;
        }
        let (x, y) = (i as u32 % w, i as u32 / w);
        b = Some(match b {
            None => [x, y, x + 1, y + 1],
            Some([x1, y1, x2, y2]) => [x1.min(x), y1.min(y), x2.max(x + 1), y2.max(y + 1)],
        });
    }
    b
}

pub fn random_bitmap(rng: &mut impl Rng, w: u32, h: u32, density: f64) -> Bitmap {
    let mut bm = Bitmap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if rng.random_bool(density) {
                bm.set(x, y, true);
            }
        }
    }
    bm
}

pub fn bitmap_bits(bm: &Bitmap) -> Vec<bool> {
    let mut v = Vec::new();
    for y in 0..bm.height {
        for x in 0..bm.width {
            v.push(bm.get(x, y));
        }
    }
    v
}
