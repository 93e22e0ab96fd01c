//! Python bindings for the attnseg core.
//!
//! Tensors cross the boundary as nested lists; detections as the same JSON
//! text the CLI writes.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use attnseg::atncache;
use attnseg::attnflow::{self, AttentionMap};
use attnseg::ensemble;
use attnseg::eval;
use attnseg::pipeline::{self, PipelineConfig, SceneBundle};
use attnseg::prompting::{self, Connectivity, IterConfig};
use attnseg::segment::{self, Bitmap, Detection, PixelBox, Provenance, SegMask, SegmenterHandle};
use attnseg::synthetic::{self, SyntheticConfig};

create_exception!(attnseg_py, AttnsegError, PyException);
create_exception!(attnseg_py, BackendError, AttnsegError);

fn err(e: impl std::fmt::Display) -> PyErr {
    AttnsegError::new_err(e.to_string())
}

fn connectivity(n: u8) -> PyResult<Connectivity> {
    Connectivity::from_neighbors(n).ok_or_else(|| PyValueError::new_err(format!("connectivity must be 4 or 8, got {n}")))
}

type Points = Vec<(f64, f64)>;

fn rows(a: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

#[pyclass(name = "AttentionCache", frozen)]
struct PyCache {
    inner: atncache::AttentionCache,
}

#[pymethods]
impl PyCache {
    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.num_layers
    }
    #[getter]
    fn num_heads(&self) -> usize {
        self.inner.num_heads
    }
    #[getter]
    fn seq_len(&self) -> usize {
        self.inner.seq_len
    }
    #[getter]
    fn grid_side(&self) -> usize {
        self.inner.grid_side
    }
    #[getter]
    fn mode(&self) -> &'static str {
        match self.inner.mode() {
            atncache::CacheMode::Qk => "qk",
            atncache::CacheMode::Sim => "sim",
        }
    }
    #[getter]
    fn image_tokens(&self) -> (usize, usize) {
        (self.inner.image_tokens.start, self.inner.image_tokens.end)
    }
    #[getter]
    fn tokens(&self) -> Vec<(usize, String)> {
        self.inner.tokens.iter().map(|t| (t.position, t.text.clone())).collect()
    }

    /// Similarity as `[layer][head][i][j]` nested lists.
    fn similarity(&self) -> PyResult<Vec<Vec<Vec<Vec<f64>>>>> {
        let s = atncache::compute_similarity(&self.inner).map_err(err)?;
        Ok(s.values()
            .outer_iter()
            .map(|l| l.outer_iter().map(|h| h.outer_iter().map(|r| r.to_vec()).collect()).collect())
            .collect())
    }

    #[pyo3(signature = (regularize = true))]
    fn rollout(slf: Py<Self>, py: Python<'_>, regularize: bool) -> PyResult<PyRolled> {
        let sim = atncache::compute_similarity(&slf.get().inner).map_err(err)?;
        let rolled = py.detach(|| attnflow::attention_flow(&sim, regularize));
        Ok(PyRolled { cache: slf, rolled })
    }

    fn __repr__(&self) -> String {
        format!(
            "AttentionCache(mode={}, L={}, H={}, N={}, P={})",
            self.mode(),
            self.inner.num_layers,
            self.inner.num_heads,
            self.inner.seq_len,
            self.inner.grid_side
        )
    }
}

#[pyclass(name = "RolledAttention", frozen)]
struct PyRolled {
    cache: Py<PyCache>,
    rolled: attnflow::RolledAttention,
}

#[pymethods]
impl PyRolled {
    fn matrix(&self) -> Vec<Vec<f64>> {
        rows(&self.rolled.0)
    }

    fn attention_map(&self, positions: Vec<usize>, tag: &str, width: u32, height: u32) -> PyResult<PyMap> {
        let inner = attnflow::extract_map(&self.rolled, &self.cache.get().inner, &positions, tag, width, height)
            .map_err(err)?;
        Ok(PyMap { inner })
    }
}

#[pyclass(name = "AttentionMap", frozen)]
struct PyMap {
    inner: AttentionMap,
}

#[pymethods]
impl PyMap {
    #[new]
    fn new(grid: Vec<Vec<f64>>, width: u32, height: u32) -> PyResult<Self> {
        let p = grid.len();
        if p == 0 || grid.iter().any(|r| r.len() != p) {
            return Err(PyValueError::new_err("grid must be square and non-empty"));
        }
        let flat: Vec<f64> = grid.into_iter().flatten().collect();
        Ok(PyMap {
            inner: AttentionMap {
                grid: ndarray::Array2::from_shape_vec((p, p), flat).expect("square"),
                image_width: width,
                image_height: height,
                tag: String::new(),
                token_positions: vec![],
            },
        })
    }

    #[getter]
    fn grid(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.grid)
    }
    #[getter]
    fn tag(&self) -> &str {
        &self.inner.tag
    }
    fn max(&self) -> f64 {
        self.inner.max()
    }
    fn upsample(&self) -> Vec<Vec<f64>> {
        rows(&attnflow::upsample_map(&self.inner))
    }

    /// Largest connected region above `tau * max`, as (row, col) cells.
    #[pyo3(signature = (tau = 0.5, connectivity = 8))]
    fn region(&self, tau: f64, connectivity: u8) -> PyResult<Option<Vec<(usize, usize)>>> {
        let active = prompting::threshold_filter(&self.inner, tau);
        Ok(prompting::max_connected_region(&active, self::connectivity(connectivity)?).map(|r| r.cells))
    }

    /// `(positives, negatives)` as lists of `(x, y)` pixel coordinates.
    #[pyo3(signature = (tau = 0.5, connectivity = 8))]
    fn sample_points(&self, tau: f64, connectivity: u8) -> PyResult<Option<(Points, Points)>> {
        let active = prompting::threshold_filter(&self.inner, tau);
        let Some(region) = prompting::max_connected_region(&active, self::connectivity(connectivity)?) else {
            return Ok(None);
        };
        let p = prompting::sample_points(&self.inner, &region);
        let xy = |v: Vec<prompting::Point>| v.into_iter().map(|p| (p.x, p.y)).collect();
        Ok(Some((xy(p.positives), xy(p.negatives))))
    }
}

#[pyfunction]
fn load_cache(path: PathBuf) -> PyResult<PyCache> {
    Ok(PyCache {
        inner: atncache::load_cache(path).map_err(err)?,
    })
}

fn to_bitmap(bits: &[Vec<bool>]) -> PyResult<Bitmap> {
    let h = bits.len() as u32;
    let w = bits.first().map_or(0, |r| r.len()) as u32;
    if bits.iter().any(|r| r.len() as u32 != w) {
        return Err(PyValueError::new_err("ragged mask rows"));
    }
    let mut b = Bitmap::new(w, h);
    for (y, row) in bits.iter().enumerate() {
        for (x, &on) in row.iter().enumerate() {
            b.set(x as u32, y as u32, on);
        }
    }
    Ok(b)
}

fn mask(width: u32, height: u32, rle: Vec<u32>) -> PyResult<SegMask> {
    let m = SegMask { width, height, rle };
    m.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(m)
}

/// Row-major RLE of a `[height][width]` boolean mask, starting with a
/// background run. Returns `(width, height, counts)`.
#[pyfunction]
fn rle_encode(bits: Vec<Vec<bool>>) -> PyResult<(u32, u32, Vec<u32>)> {
    let m = SegMask::encode(&to_bitmap(&bits)?);
    Ok((m.width, m.height, m.rle))
}

#[pyfunction]
fn rle_decode(width: u32, height: u32, rle: Vec<u32>) -> PyResult<Vec<Vec<bool>>> {
    let b = mask(width, height, rle)?.decode().map_err(err)?;
    Ok((0..height).map(|y| (0..width).map(|x| b.get(x, y)).collect()).collect())
}

#[pyfunction]
fn mask_to_box(width: u32, height: u32, rle: Vec<u32>) -> PyResult<[u32; 4]> {
    Ok(segment::mask_to_box(&mask(width, height, rle)?).map_err(err)?.into())
}

#[pyfunction]
fn box_iou(a: [u32; 4], b: [u32; 4]) -> f64 {
    segment::box_iou(&PixelBox::from(a), &PixelBox::from(b))
}

#[pyfunction]
fn mask_iou(a: Vec<Vec<bool>>, b: Vec<Vec<bool>>) -> PyResult<f64> {
    let (a, b) = (SegMask::encode(&to_bitmap(&a)?), SegMask::encode(&to_bitmap(&b)?));
    segment::mask_iou(&a, &b).map_err(err)
}

/// Greedy class-agnostic NMS; returns kept indices in output order.
#[pyfunction]
#[pyo3(signature = (boxes, scores, iou = 0.5))]
fn nms(boxes: Vec<[u32; 4]>, scores: Vec<f64>, iou: f64) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err("boxes and scores differ in length"));
    }
    let mut dets = Vec::with_capacity(boxes.len());
    for (i, (b, s)) in boxes.iter().zip(&scores).enumerate() {
        let pb = PixelBox::from(*b);
        if pb.x1 >= pb.x2 || pb.y1 >= pb.y2 {
            return Err(PyValueError::new_err(format!("empty box {b:?}")));
        }
        // a one-pixel stand-in mask keeps the box while staying cheap
        let mut d = Detection::new(i.to_string(), *s, SegMask { width: 1, height: 1, rle: vec![0, 1] }, Provenance::default())
            .map_err(err)?;
        d.bbox = pb;
        dets.push(d);
    }
    Ok(segment::nms(dets, iou).into_iter().map(|d| d.label.parse().expect("index label")).collect())
}

#[pyclass(name = "RecallReport", frozen, get_all)]
struct PyReport {
    #[pyo3(name = "mAR")]
    mar: f64,
    #[pyo3(name = "AR50")]
    ar50: f64,
    #[pyo3(name = "AR75")]
    ar75: f64,
    recall: Vec<f64>,
    num_gt: usize,
}

#[pymethods]
impl PyReport {
    fn __repr__(&self) -> String {
        format!("RecallReport(mAR={:.1}, AR50={:.1}, AR75={:.1}, num_gt={})", self.mar, self.ar50, self.ar75, self.num_gt)
    }
}

/// Recall over `(detections.json, gt.json)` path pairs.
#[pyfunction]
fn evaluate(pairs: Vec<(PathBuf, PathBuf)>) -> PyResult<PyReport> {
    let mut loaded = Vec::with_capacity(pairs.len());
    for (d, g) in pairs {
        loaded.push((eval::load_detections(d).map_err(err)?, eval::GroundTruth::load(g).map_err(err)?));
    }
    let r = eval::evaluate(&loaded).map_err(err)?;
    Ok(PyReport {
        mar: r.mar,
        ar50: r.ar50,
        ar75: r.ar75,
        recall: r.recall,
        num_gt: r.num_gt,
    })
}

/// Runs the pipeline on a scene file; returns the detections JSON text.
#[pyfunction]
#[pyo3(signature = (
    scene, segmenter, *, tau = 0.5, connectivity = 8, max_iters = 5, absolute_floor = 1e-6,
    nms_iou = 0.5, per_label_nms = false, multiscale = false, regularize = true, embeddings = None, pool = 1,
))]
#[allow(clippy::too_many_arguments, clippy::result_large_err)]
fn run_scene(
    py: Python<'_>,
    scene: PathBuf,
    segmenter: &str,
    tau: f64,
    connectivity: u8,
    max_iters: usize,
    absolute_floor: f64,
    nms_iou: f64,
    per_label_nms: bool,
    multiscale: bool,
    regularize: bool,
    embeddings: Option<PathBuf>,
    pool: usize,
) -> PyResult<String> {
    let cfg = PipelineConfig {
        iter: IterConfig {
            tau,
            connectivity: self::connectivity(connectivity)?,
            max_iters,
            absolute_floor,
        },
        nms_iou,
        per_label_nms,
        multiscale,
        regularize,
        embeddings: embeddings.map(ensemble::EmbeddingTable::load).transpose().map_err(err)?,
        dump_maps: None,
        workers: None,
    };
    let (bundle, base) = SceneBundle::load(&scene).map_err(err)?;
    let seg = SegmenterHandle::from_spec(segmenter, pool).map_err(|e| BackendError::new_err(e.to_string()))?;
    let dets = py
        .detach(|| pipeline::run_pipeline(&bundle, &base, &seg, &cfg))
        .map_err(|e| if e.is_backend() { BackendError::new_err(e.to_string()) } else { err(e) })?;
    Ok(pipeline::detections_to_string(&dets))
}

/// Writes a seeded synthetic corpus; returns `(scene name, adversarial)`.
#[pyfunction]
#[pyo3(signature = (out, scenes = 20, seed = 42, with_views = false))]
fn generate_synthetic(out: PathBuf, scenes: usize, seed: u64, with_views: bool) -> PyResult<Vec<(String, bool)>> {
    let cfg = SyntheticConfig {
        with_views,
        ..Default::default()
    };
    let corpus = synthetic::generate(out, scenes, seed, &cfg).map_err(err)?;
    Ok(corpus.scenes.into_iter().map(|s| (s.name, s.adversarial)).collect())
}

/// `(view_id, x, y, width, height)` for the full image and, when
/// `multiscale`, its four corner views.
#[pyfunction]
#[pyo3(signature = (width, height, multiscale = true))]
fn make_views(width: u32, height: u32, multiscale: bool) -> Vec<(usize, u32, u32, u32, u32)> {
    ensemble::make_views(width, height, multiscale)
        .into_iter()
        .map(|v| (v.view_id, v.offset_x, v.offset_y, v.width, v.height))
        .collect()
}

#[pymodule]
fn attnseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AttnsegError", m.py().get_type::<AttnsegError>())?;
    m.add("BackendError", m.py().get_type::<BackendError>())?;
    m.add_class::<PyCache>()?;
    m.add_class::<PyRolled>()?;
    m.add_class::<PyMap>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(load_cache, m)?)?;
    m.add_function(wrap_pyfunction!(rle_encode, m)?)?;
    m.add_function(wrap_pyfunction!(rle_decode, m)?)?;
    m.add_function(wrap_pyfunction!(mask_to_box, m)?)?;
    m.add_function(wrap_pyfunction!(box_iou, m)?)?;
    m.add_function(wrap_pyfunction!(mask_iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_scene, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(make_views, m)?)?;
    Ok(())
}
