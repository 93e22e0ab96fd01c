//! Head aggregation, causal regularization, rollout and per-tag map
//! extraction.

use ndarray::{s, Array2, Array3, Axis, Zip};
use thiserror::Error;

use crate::atncache::{AttentionCache, SimilarityTensor};

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("no token positions given for tag `{0}`")]
    NoTokens(String),
    #[error("token position {position} is not a generated token (image span ends at {image_end})")]
    NotGenerated { position: usize, image_end: usize },
    #[error("token position {position} beyond sequence length {seq_len}")]
    OutOfRange { position: usize, seq_len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("image dimensions must be positive")]
    EmptyImage,
}

/// Per-(layer, head) importance, `[L, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights(pub Array2<f64>);

/// One `N x N` matrix per layer, `[L, N, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack(pub Array3<f64>);

/// Final-layer rolled-out attention, rows on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct RolledAttention(pub Array2<f64>);

/// Mean over queries of each row's maximum similarity.
pub fn head_weights(sim: &SimilarityTensor) -> HeadWeights {
    let v = sim.values();
    let row_max = v.map_axis(Axis(3), |row| row.fold(f64::NEG_INFINITY, |m, &x| m.max(x)));
    HeadWeights(row_max.mean_axis(Axis(2)).expect("seq_len > 0"))
}

/// Head-weighted mean over heads: `S'[l] = 1/H * sum_h W[l,h] * S[l,h]`.
pub fn aggregate_heads(sim: &SimilarityTensor, weights: &HeadWeights) -> Result<LayerStack, FlowError> {
    let v = sim.values();
    let (l, h, n) = (sim.num_layers(), sim.num_heads(), sim.seq_len());
    if weights.0.dim() != (l, h) {
        return Err(FlowError::Shape(format!(
            "weights {:?} vs similarity layers/heads ({l}, {h})",
            weights.0.dim()
        )));
    }
    let mut out = Array3::<f64>::zeros((l, n, n));
    for li in 0..l {
        let mut acc = out.index_axis_mut(Axis(0), li);
        for hi in 0..h {
            let w = weights.0[[li, hi]];
            acc.scaled_add(w, &v.slice(s![li, hi, .., ..]));
        }
        acc /= h as f64;
    }
    Ok(LayerStack(out))
}

/// Column scale `(j+1)/N`: a column with unmasked length `N-j` is
/// multiplied by `1 - (N-j-1)/N`, damping the early columns that every
/// causal row can see.
pub fn column_factor(j: usize, n: usize) -> f64 {
    (j + 1) as f64 / n as f64
}

pub fn regularize(stack: &LayerStack) -> LayerStack {
    let mut out = stack.0.clone();
    let n = out.len_of(Axis(2));
    for mut layer in out.outer_iter_mut() {
        for (j, mut col) in layer.axis_iter_mut(Axis(1)).enumerate() {
            col *= column_factor(j, n);
        }
    }
    LayerStack(out)
}

/// Row-normalize in place; zero rows become identity rows.
fn normalize_rows(m: &mut Array2<f64>) {
    for (i, mut row) in m.outer_iter_mut().enumerate() {
        let sum = row.sum();
        if sum > 0.0 {
            row /= sum;
        } else {
            row.fill(0.0);
            row[i] = 1.0;
        }
    }
}

/// Rollout `R_l = norm((I + S'_l)(I + R_{l-1}))` with `R_0 = 0`.
pub fn rollout(stack: &LayerStack) -> RolledAttention {
    let n = stack.0.len_of(Axis(1));
    let eye = Array2::<f64>::eye(n);
    let mut rolled = Array2::<f64>::zeros((n, n));
    for layer in stack.0.outer_iter() {
        let lhs = &eye + &layer;
        let rhs = &eye + &rolled;
        rolled = lhs.dot(&rhs);
        normalize_rows(&mut rolled);
    }
    RolledAttention(rolled)
}

/// Full attention-flow chain from a similarity tensor to the rolled matrix.
pub fn attention_flow(sim: &SimilarityTensor, regularized: bool) -> RolledAttention {
    let weights = head_weights(sim);
    let stack = aggregate_heads(sim, &weights).expect("weights derived from the same tensor");
    if regularized {
        rollout(&regularize(&stack))
    } else {
        rollout(&stack)
    }
}

/// Image attention of one tag on the `P x P` patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub grid: Array2<f64>,
    pub image_width: u32,
    pub image_height: u32,
    pub tag: String,
    pub token_positions: Vec<usize>,
}

impl AttentionMap {
    pub fn grid_side(&self) -> usize {
        self.grid.nrows()
    }

    pub fn max(&self) -> f64 {
        self.grid.fold(0.0, |m, &v| m.max(v))
    }

    /// Pixel-space center of grid cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let p = self.grid_side() as f64;
        (
            (col as f64 + 0.5) * f64::from(self.image_width) / p,
            (row as f64 + 0.5) * f64::from(self.image_height) / p,
        )
    }

    /// Row-major flattening of the grid (inverse of the reshape in
    /// [`extract_map`]).
    pub fn flatten(&self) -> Vec<f64> {
        self.grid.iter().copied().collect()
    }
}

/// Averages the image-token columns of the rolled rows at `positions` and
/// reshapes them row-major onto the patch grid.
pub fn extract_map(
    rolled: &RolledAttention,
    cache: &AttentionCache,
    positions: &[usize],
    tag: &str,
    image_width: u32,
    image_height: u32,
) -> Result<AttentionMap, FlowError> {
    if positions.is_empty() {
        return Err(FlowError::NoTokens(tag.to_owned()));
    }
    if image_width == 0 || image_height == 0 {
        return Err(FlowError::EmptyImage);
    }
    let n = rolled.0.nrows();
    if n != cache.seq_len {
        return Err(FlowError::Shape(format!(
            "rolled attention is {n}x{n}, cache seq_len {}",
            cache.seq_len
        )));
    }
    let span = cache.image_tokens.clone();
    for &t in positions {
        if t >= n {
            return Err(FlowError::OutOfRange { position: t, seq_len: n });
        }
        if t < span.end {
            return Err(FlowError::NotGenerated {
                position: t,
                image_end: span.end,
            });
        }
    }
    let p = cache.grid_side;
    let mut acc = ndarray::Array1::<f64>::zeros(span.len());
    for &t in positions {
        acc += &rolled.0.slice(s![t, span.clone()]);
    }
    acc /= positions.len() as f64;
    let grid = acc.into_shape_with_order((p, p)).expect("span tiles the grid");
    Ok(AttentionMap {
        grid,
        image_width,
        image_height,
        tag: tag.to_owned(),
        token_positions: positions.to_vec(),
    })
}

/// For each output pixel along one axis: the two neighbouring grid samples
/// and the interpolation weight of the second.
fn sample_axis(len: usize, p: usize) -> Vec<(usize, usize, f64)> {
    (0..len)
        .map(|x| {
            let g = ((x as f64 + 0.5) * p as f64 / len as f64 - 0.5).clamp(0.0, (p - 1) as f64);
            let lo = g.floor() as usize;
            (lo, (lo + 1).min(p - 1), g - lo as f64)
        })
        .collect()
}

/// Bilinear upsampling to `[height, width]`, cell `(r, c)` sampled at its
/// pixel center and clamped at the borders.
pub fn upsample_map(map: &AttentionMap) -> Array2<f64> {
    let p = map.grid_side();
    let (w, h) = (map.image_width as usize, map.image_height as usize);
    let xs = sample_axis(w, p);
    let ys = sample_axis(h, p);
    let g = &map.grid;
    let mut out = Array2::<f64>::zeros((h, w));
    Zip::indexed(&mut out).for_each(|(y, x), v| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = g[[y0, x0]] * (1.0 - fx) + g[[y0, x1]] * fx;
        let bottom = g[[y1, x0]] * (1.0 - fx) + g[[y1, x1]] * fx;
        *v = top * (1.0 - fy) + bottom * fy;
    });
    out
}
