//! Multi-scale views, detection remapping, merging and category mapping.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::{nms, nms_per_label, Bitmap, Detection, MaskError, SegMask};

/// A rectangle of the full image processed as its own scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct View {
    pub view_id: usize,
    pub offset_x: u32,
    pub offset_y: u32,
    pub width: u32,
    pub height: u32,
}

impl View {
    pub fn full(width: u32, height: u32) -> Self {
        View {
            view_id: 0,
            offset_x: 0,
            offset_y: 0,
            width,
            height,
        }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.offset_x && y >= self.offset_y && x < self.offset_x + self.width && y < self.offset_y + self.height
    }
}

/// The full image, plus (when `multiscale`) four half-size corner views.
/// Corners are `ceil(W/2) x ceil(H/2)` anchored at the four image corners,
/// so odd sizes overlap by one pixel instead of leaving a gap.
pub fn make_views(width: u32, height: u32, multiscale: bool) -> Vec<View> {
    let mut views = vec![View::full(width, height)];
    if multiscale {
        let (w, h) = (width.div_ceil(2), height.div_ceil(2));
        let (rx, by) = (width - w, height - h);
        for (i, (x, y)) in [(0, 0), (rx, 0), (0, by), (rx, by)].into_iter().enumerate() {
            views.push(View {
                view_id: i + 1,
                offset_x: x,
                offset_y: y,
                width: w,
                height: h,
            });
        }
    }
    views
}

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("view {view:?} does not fit a {width}x{height} image")]
    ViewOutside { view: View, width: u32, height: u32 },
    #[error("detection mask is {got:?}, view is {expected:?}")]
    MaskSize { expected: (u32, u32), got: (u32, u32) },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Copies the view-local `mask` into a `full_w x full_h` canvas.
pub fn embed_mask(mask: &SegMask, view: &View, full_w: u32, full_h: u32) -> Result<SegMask, EnsembleError> {
    if view.offset_x + view.width > full_w || view.offset_y + view.height > full_h {
        return Err(EnsembleError::ViewOutside {
            view: *view,
            width: full_w,
            height: full_h,
        });
    }
    if mask.dims() != (view.width, view.height) {
        return Err(EnsembleError::MaskSize {
            expected: (view.width, view.height),
            got: mask.dims(),
        });
    }
    let local = mask.decode()?;
    let mut full = Bitmap::new(full_w, full_h);
    for y in 0..view.height {
        for x in 0..view.width {
            if local.get(x, y) {
                full.set(x + view.offset_x, y + view.offset_y, true);
            }
        }
    }
    Ok(SegMask::encode(&full))
}

/// The part of a full-image mask that falls inside `view`.
pub fn crop_mask(mask: &SegMask, view: &View) -> Result<SegMask, MaskError> {
    let full = mask.decode()?;
    let mut local = Bitmap::new(view.width, view.height);
    for y in 0..view.height {
        for x in 0..view.width {
            local.set(x, y, full.get(x + view.offset_x, y + view.offset_y));
        }
    }
    Ok(SegMask::encode(&local))
}

/// Moves a view-local detection into full-image coordinates.
pub fn remap_detection(det: &Detection, view: &View, full_w: u32, full_h: u32) -> Result<Detection, EnsembleError> {
    let mask = embed_mask(&det.mask, view, full_w, full_h)?;
    let mut out = det.clone();
    out.bbox = det.bbox.translate(view.offset_x, view.offset_y);
    out.mask = mask;
    out.provenance.view = view.view_id;
    Ok(out)
}

/// Class-agnostic (or per-label) NMS over detections pooled from every view,
/// question prompt and iteration.
pub fn merge(all: Vec<Detection>, iou_thresh: f64, per_label: bool) -> Vec<Detection> {
    if per_label {
        nms_per_label(all, iou_thresh)
    } else {
        nms(all, iou_thresh)
    }
}

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed embedding manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("entry `{name}` at byte {offset} overruns the {len}-byte blob")]
    Overrun { name: String, offset: u64, len: usize },
    #[error("entry `{name}` has norm {norm}, expected 1")]
    NotUnit { name: String, norm: f64 },
    #[error("duplicate entry `{0}`")]
    Duplicate(String),
    #[error("dimension mismatch: table {table}, vector {vector}")]
    Dim { table: usize, vector: usize },
    #[error("blob offset {0} is not a multiple of 4")]
    Misaligned(u64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryRecord {
    name: String,
    blob_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableManifest {
    dim: usize,
    entries: Vec<EntryRecord>,
    /// Blob file, relative to the manifest; defaults to the manifest path
    /// with a `.bin` extension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blob: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingEntry {
    pub name: String,
    pub vector: Vec<f32>,
}

/// Unit-norm text embeddings of category prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub entries: Vec<EmbeddingEntry>,
}

const UNIT_TOL: f64 = 1e-5;

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

impl EmbeddingTable {
    pub fn new(dim: usize, entries: Vec<EmbeddingEntry>) -> Result<Self, EmbeddingError> {
        let table = EmbeddingTable { dim, entries };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<(), EmbeddingError> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if e.vector.len() != self.dim {
                return Err(EmbeddingError::Dim {
                    table: self.dim,
                    vector: e.vector.len(),
                });
            }
            let n = norm(&e.vector);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(EmbeddingError::NotUnit {
                    name: e.name.clone(),
                    norm: n,
                });
            }
            if !seen.insert(e.name.as_str()) {
                return Err(EmbeddingError::Duplicate(e.name.clone()));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.vector.as_slice())
    }

    /// Reads a JSON manifest `{dim, entries:[{name, blob_offset}], blob?}`
    /// plus its little-endian `f32` blob; `blob_offset` is in bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let path = path.as_ref();
        let io = |p: &Path| {
            let p = p.to_owned();
            move |source| EmbeddingError::Io { path: p, source }
        };
        let text = fs::read_to_string(path).map_err(io(path))?;
        let manifest: TableManifest = serde_json::from_str(&text).map_err(|source| EmbeddingError::Manifest {
            path: path.to_owned(),
            source,
        })?;
        let blob_path = match &manifest.blob {
            Some(b) => path.parent().unwrap_or(Path::new(".")).join(b),
            None => path.with_extension("bin"),
        };
        let blob = fs::read(&blob_path).map_err(io(&blob_path))?;
        let bytes = manifest.dim * 4;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for rec in manifest.entries {
            if rec.blob_offset % 4 != 0 {
                return Err(EmbeddingError::Misaligned(rec.blob_offset));
            }
            let start = rec.blob_offset as usize;
            let chunk = blob.get(start..start + bytes).ok_or_else(|| EmbeddingError::Overrun {
                name: rec.name.clone(),
                offset: rec.blob_offset,
                len: blob.len(),
            })?;
            let vector = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(EmbeddingEntry { name: rec.name, vector });
        }
        Self::new(manifest.dim, entries)
    }

    /// Writes the manifest at `path` and the blob next to it (`.bin`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
        let path = path.as_ref();
        let blob_path = path.with_extension("bin");
        let mut blob = Vec::with_capacity(self.entries.len() * self.dim * 4);
        let mut records = Vec::new();
        for e in &self.entries {
            records.push(EntryRecord {
                name: e.name.clone(),
                blob_offset: blob.len() as u64,
            });
            blob.extend(e.vector.iter().flat_map(|v| v.to_le_bytes()));
        }
        let manifest = TableManifest {
            dim: self.dim,
            entries: records,
            blob: blob_path.file_name().map(|n| n.to_string_lossy().into_owned()),
        };
        fs::write(&blob_path, blob).map_err(|source| EmbeddingError::Io {
            path: blob_path.clone(),
            source,
        })?;
        fs::write(path, serde_json::to_string_pretty(&manifest).expect("serializes") + "\n").map_err(
            |source| EmbeddingError::Io {
                path: path.to_owned(),
                source,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMatch {
    pub mapped: String,
    pub similarity: f64,
}

/// Nearest table entry by cosine similarity for each label vector (the
/// embedding of "a {label}"); ties resolve to the earlier table entry.
/// An empty table maps nothing.
pub fn map_categories(
    label_vectors: &[&[f32]],
    table: &EmbeddingTable,
) -> Result<Vec<Option<CategoryMatch>>, EmbeddingError> {
    label_vectors
        .iter()
        .map(|v| {
            if v.len() != table.dim {
                return Err(EmbeddingError::Dim {
                    table: table.dim,
                    vector: v.len(),
                });
            }
            let mut best: Option<CategoryMatch> = None;
            for e in &table.entries {
                let sim: f64 = e.vector.iter().zip(v.iter()).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
                if best.as_ref().is_none_or(|b| sim > b.similarity) {
                    best = Some(CategoryMatch {
                        mapped: e.name.clone(),
                        similarity: sim,
                    });
                }
            }
            Ok(best)
        })
        .collect()
}
