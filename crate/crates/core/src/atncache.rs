//! ATNC attention-cache container and causal similarity construction.
//!
//! On disk a cache is a directory holding `manifest.json` plus raw
//! little-endian `f32` blobs with no header:
//!
//! ```json
//! {"version":1,"mode":"qk","num_layers":2,"num_heads":1,"seq_len":4,
//!  "head_dim":2,"grid_side":1,"image_token_range":[1,2],
//!  "tokens":[{"position":3,"text":"cat"}],
//!  "tensors":{"q":"q.bin","k":"k.bin"}}
//! ```
//!
//! `q`/`k` are laid out `[L, H, N, D]` and `sim` is `[L, H, N, N]`, all
//! row-major. Tensor paths resolve relative to the manifest's directory.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

/// Tolerance for row sums of stored similarity tensors.
pub const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported ATNC version {0}")]
    Version(u32),
    #[error("manifest is missing tensor `{0}` for its mode")]
    MissingTensor(&'static str),
    #[error("blob size mismatch for {name}: expected {expected} bytes, found {actual}")]
    BlobSize {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("image_token_range [{start},{end}) invalid for seq_len {seq_len} and grid_side {grid_side}")]
    ImageSpan {
        start: usize,
        end: usize,
        seq_len: usize,
        grid_side: usize,
    },
    #[error("invalid dimensions: {0}")]
    Dimensions(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("similarity [{layer},{head},{row}] is not causal/normalized: {detail}")]
    NotNormalized {
        layer: usize,
        head: usize,
        row: usize,
        detail: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    Qk,
    Sim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub position: usize,
    pub text: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TensorFiles {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub mode: CacheMode,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub head_dim: usize,
    pub grid_side: usize,
    pub image_token_range: [usize; 2],
    #[serde(default)]
    pub tokens: Vec<Token>,
    pub tensors: TensorFiles,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CacheTensors {
    Qk {
        queries: Array4<f32>,
        keys: Array4<f32>,
    },
    Sim(Array4<f32>),
}

/// A fully validated attention cache.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache {
    pub num_layers: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub head_dim: usize,
    pub grid_side: usize,
    pub image_tokens: Range<usize>,
    pub tokens: Vec<Token>,
    pub tensors: CacheTensors,
}

impl AttentionCache {
    /// Builds a `qk` cache from in-memory tensors shaped `[L, H, N, D]`.
    pub fn from_qk(
        queries: Array4<f32>,
        keys: Array4<f32>,
        image_tokens: Range<usize>,
        grid_side: usize,
        tokens: Vec<Token>,
    ) -> Result<Self, CacheError> {
        if queries.shape() != keys.shape() {
            return Err(CacheError::Dimensions(format!(
                "queries {:?} vs keys {:?}",
                queries.shape(),
                keys.shape()
            )));
        }
        let &[l, h, n, d] = queries.shape() else {
            unreachable!()
        };
        let cache = AttentionCache {
            num_layers: l,
            num_heads: h,
            seq_len: n,
            head_dim: d,
            grid_side,
            image_tokens,
            tokens,
            tensors: CacheTensors::Qk { queries, keys },
        };
        cache.validate()?;
        Ok(cache)
    }

    /// Builds a `sim` cache from a precomputed `[L, H, N, N]` tensor.
    pub fn from_sim(
        sim: Array4<f32>,
        image_tokens: Range<usize>,
        grid_side: usize,
        tokens: Vec<Token>,
    ) -> Result<Self, CacheError> {
        let &[l, h, n, n2] = sim.shape() else {
            unreachable!()
        };
        if n != n2 {
            return Err(CacheError::Dimensions(format!("sim is not square: {n}x{n2}")));
        }
        let cache = AttentionCache {
            num_layers: l,
            num_heads: h,
            seq_len: n,
            head_dim: 0,
            grid_side,
            image_tokens,
            tokens,
            tensors: CacheTensors::Sim(sim),
        };
        cache.validate()?;
        Ok(cache)
    }

    pub fn mode(&self) -> CacheMode {
        match self.tensors {
            CacheTensors::Qk { .. } => CacheMode::Qk,
            CacheTensors::Sim(_) => CacheMode::Sim,
        }
    }

    fn validate(&self) -> Result<(), CacheError> {
        if self.num_layers == 0 || self.num_heads == 0 || self.seq_len == 0 {
            return Err(CacheError::Dimensions(
                "num_layers, num_heads and seq_len must be positive".into(),
            ));
        }
        let Range { start, end } = self.image_tokens;
        let p = self.grid_side;
        if p == 0 || start >= end || end > self.seq_len || end - start != p * p {
            return Err(CacheError::ImageSpan {
                start,
                end,
                seq_len: self.seq_len,
                grid_side: p,
            });
        }
        match &self.tensors {
            CacheTensors::Qk { queries, keys } => {
                if self.head_dim == 0 {
                    return Err(CacheError::Dimensions("head_dim must be positive".into()));
                }
                if !queries.iter().all(|v| v.is_finite()) {
                    return Err(CacheError::NonFinite("queries"));
                }
                if !keys.iter().all(|v| v.is_finite()) {
                    return Err(CacheError::NonFinite("keys"));
                }
            }
            CacheTensors::Sim(sim) => {
                for (l, layer) in sim.outer_iter().enumerate() {
                    for (h, mat) in layer.outer_iter().enumerate() {
                        check_causal_rows(mat, l, h)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_causal_rows<T: Copy + Into<f64>>(
    mat: ArrayView2<'_, T>,
    layer: usize,
    head: usize,
) -> Result<(), CacheError> {
    for (i, row) in mat.outer_iter().enumerate() {
        let mut sum = 0.0f64;
        for (j, v) in row.iter().enumerate() {
            let v: f64 = (*v).into();
            if !v.is_finite() {
                return Err(CacheError::NonFinite("sim"));
            }
            if j > i && v != 0.0 {
                return Err(CacheError::NotNormalized {
                    layer,
                    head,
                    row: i,
                    detail: format!("nonzero masked entry at column {j}"),
                });
            }
            if v < 0.0 {
                return Err(CacheError::NotNormalized {
                    layer,
                    head,
                    row: i,
                    detail: format!("negative entry at column {j}"),
                });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(CacheError::NotNormalized {
                layer,
                head,
                row: i,
                detail: format!("row sums to {sum}"),
            });
        }
    }
    Ok(())
}

/// Loads and validates an ATNC cache from its manifest path.
pub fn load_cache(path: impl AsRef<Path>) -> Result<AttentionCache, CacheError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CacheError::Io {
        path: path.to_owned(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| CacheError::Manifest {
        path: path.to_owned(),
        source,
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(CacheError::Version(manifest.version));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let [start, end] = manifest.image_token_range;
    let (l, h, n, d) = (
        manifest.num_layers,
        manifest.num_heads,
        manifest.seq_len,
        manifest.head_dim,
    );
    let tensors = match manifest.mode {
        CacheMode::Qk => {
            let q = manifest.tensors.q.as_deref().ok_or(CacheError::MissingTensor("q"))?;
            let k = manifest.tensors.k.as_deref().ok_or(CacheError::MissingTensor("k"))?;
            CacheTensors::Qk {
                queries: read_blob(&base.join(q), [l, h, n, d])?,
                keys: read_blob(&base.join(k), [l, h, n, d])?,
            }
        }
        CacheMode::Sim => {
            let s = manifest.tensors.sim.as_deref().ok_or(CacheError::MissingTensor("sim"))?;
            CacheTensors::Sim(read_blob(&base.join(s), [l, h, n, n])?)
        }
    };
    let cache = AttentionCache {
        num_layers: l,
        num_heads: h,
        seq_len: n,
        head_dim: d,
        grid_side: manifest.grid_side,
        image_tokens: start..end,
        tokens: manifest.tokens,
        tensors,
    };
    cache.validate()?;
    Ok(cache)
}

fn read_blob(path: &Path, shape: [usize; 4]) -> Result<Array4<f32>, CacheError> {
    let bytes = fs::read(path).map_err(|source| CacheError::Io {
        path: path.to_owned(),
        source,
    })?;
    let count = shape.iter().product::<usize>();
    let expected = count * 4;
    if bytes.len() != expected {
        return Err(CacheError::BlobSize {
            name: path.display().to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array4::from_shape_vec(shape, values).expect("length checked above"))
}

fn write_blob(path: &Path, data: &Array4<f32>) -> Result<(), CacheError> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|source| CacheError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Writes `cache` as `manifest.json` plus blobs into `dir` and returns the
/// manifest path.
pub fn write_cache(cache: &AttentionCache, dir: impl AsRef<Path>) -> Result<PathBuf, CacheError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| CacheError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let mut files = TensorFiles::default();
    match &cache.tensors {
        CacheTensors::Qk { queries, keys } => {
            write_blob(&dir.join("q.bin"), queries)?;
            write_blob(&dir.join("k.bin"), keys)?;
            files.q = Some("q.bin".into());
            files.k = Some("k.bin".into());
        }
        CacheTensors::Sim(sim) => {
            write_blob(&dir.join("sim.bin"), sim)?;
            files.sim = Some("sim.bin".into());
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        mode: cache.mode(),
        num_layers: cache.num_layers,
        num_heads: cache.num_heads,
        seq_len: cache.seq_len,
        head_dim: cache.head_dim,
        grid_side: cache.grid_side,
        image_token_range: [cache.image_tokens.start, cache.image_tokens.end],
        tokens: cache.tokens.clone(),
        tensors: files,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|source| CacheError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Causal, row-normalized similarity, stored `[L, H, N, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTensor {
    values: Array4<f64>,
}

impl SimilarityTensor {
    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn num_layers(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    pub fn num_heads(&self) -> usize {
        self.values.len_of(Axis(1))
    }

    pub fn seq_len(&self) -> usize {
        self.values.len_of(Axis(2))
    }

    /// Wraps raw values, checking the causal and row-sum invariants.
    pub fn new(values: Array4<f64>) -> Result<Self, CacheError> {
        let s = values.shape();
        if s[2] != s[3] {
            return Err(CacheError::Dimensions(format!("similarity not square: {s:?}")));
        }
        for (l, layer) in values.outer_iter().enumerate() {
            for (h, mat) in layer.outer_iter().enumerate() {
                check_causal_rows(mat, l, h)?;
            }
        }
        Ok(Self { values })
    }
}

/// Causally masked, softmax-normalized scaled dot-product similarity.
///
/// `S[l,h,i,j] = softmax_{j<=i}(q[l,h,i] . k[l,h,j] / sqrt(D))` with exact
/// zeros above the diagonal. Sim-mode caches pass through unchanged.
pub fn compute_similarity(cache: &AttentionCache) -> Result<SimilarityTensor, CacheError> {
    match &cache.tensors {
        CacheTensors::Sim(sim) => Ok(SimilarityTensor {
            values: sim.mapv(f64::from),
        }),
        CacheTensors::Qk { queries, keys } => {
            let (l, h, n, d) = (cache.num_layers, cache.num_heads, cache.seq_len, cache.head_dim);
            let scale = 1.0 / (d as f64).sqrt();
            let mut out = Array4::<f64>::zeros((l, h, n, n));
            let mut logits = vec![0.0f64; n];
            for li in 0..l {
                for hi in 0..h {
                    let q = queries.slice(ndarray::s![li, hi, .., ..]);
                    let k = keys.slice(ndarray::s![li, hi, .., ..]);
                    for i in 0..n {
                        let qi = q.row(i);
                        let mut max = f64::NEG_INFINITY;
                        for (j, logit) in logits[..=i].iter_mut().enumerate() {
                            let dot: f64 = qi
                                .iter()
                                .zip(k.row(j).iter())
                                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                                .sum();
                            let v = dot * scale;
                            if !v.is_finite() {
                                return Err(CacheError::NonFinite("logits"));
                            }
                            *logit = v;
                            max = max.max(v);
                        }
                        let mut sum = 0.0;
                        for v in &mut logits[..=i] {
                            *v = (*v - max).exp();
                            sum += *v;
                        }
                        for (j, v) in logits[..=i].iter().enumerate() {
                            out[[li, hi, i, j]] = v / sum;
                        }
                    }
                }
            }
            Ok(SimilarityTensor { values: out })
        }
    }
}
