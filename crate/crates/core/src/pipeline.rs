//! Scene bundle -> detections.
//!
//! For every view x question prompt the cache is loaded and rolled out once;
//! every tag of that prompt then yields a map, an iterative prompting run
//! and view-local detections, which are remapped to the full image, merged
//! with NMS and optionally mapped onto a fixed category vocabulary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atncache::{compute_similarity, load_cache, AttentionCache, CacheError};
use crate::attnflow::{attention_flow, extract_map, upsample_map, FlowError, RolledAttention};
use crate::ensemble::{make_views, map_categories, merge, remap_detection, EmbeddingError, EmbeddingTable, EnsembleError, View};
use crate::labels::{dump_dense_map, LabelError};
use crate::prompting::{iterate, IterConfig, IterError};
use crate::segment::{crop_ref, Detection, MaskError, Provenance, Segmenter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagSpec {
    pub text: String,
    pub token_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub prompt_id: u32,
    #[serde(default)]
    pub prompt_text: String,
    /// ATNC manifest, relative to the scene file.
    pub cache_path: String,
    pub tags: Vec<TagSpec>,
}

/// Per-view inputs for one corner view of the multi-scale ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewBundle {
    pub view_id: usize,
    /// Defaults to `<image_ref>#crop=x,y,w,h`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub prompts: Vec<PromptSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBundle {
    pub image_width: u32,
    pub image_height: u32,
    pub image_ref: String,
    pub prompts: Vec<PromptSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub views: Vec<ViewBundle>,
    /// Embedding table whose entry names are tag texts (vectors of
    /// "a {tag}"), used for category mapping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_embeddings: Option<String>,
}

impl SceneBundle {
    /// Reads a scene file; relative paths inside resolve against its
    /// directory, which is returned alongside.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf), PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Input(format!("reading {}: {e}", path.display())))?;
        let bundle: SceneBundle = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Input(format!("parsing {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_owned();
        Ok((bundle, base))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).expect("serializes") + "\n")
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub iter: IterConfig,
    pub nms_iou: f64,
    pub per_label_nms: bool,
    pub multiscale: bool,
    /// Column regularization before rollout; off only for ablations.
    pub regularize: bool,
    pub embeddings: Option<EmbeddingTable>,
    pub dump_maps: Option<PathBuf>,
    /// Worker threads for the per-(view, prompt, tag) fan-out; `None` uses
    /// the global pool.
    pub workers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iter: IterConfig::default(),
            nms_iou: 0.5,
            per_label_nms: false,
            multiscale: false,
            regularize: true,
            embeddings: None,
            dump_maps: None,
            workers: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Iterate(#[from] IterError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("dumping map: {0}")]
    Dump(#[from] LabelError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Input(String),
    #[error("view {view}, prompt {prompt}{}: {source}", tag.as_ref().map(|t| format!(", tag `{t}`")).unwrap_or_default())]
    Task {
        view: usize,
        prompt: u32,
        tag: Option<String>,
        #[source]
        source: TaskError,
    },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

impl PipelineError {
    /// True when the segmenter, not the inputs, caused the failure.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            PipelineError::Task {
                source: TaskError::Iterate(IterError::Segment { .. }),
                ..
            }
        )
    }
}

struct PromptJob<'a> {
    view: View,
    image_ref: String,
    prompt: &'a PromptSpec,
}

struct Rolled<'a> {
    job: PromptJob<'a>,
    cache: AttentionCache,
    rolled: RolledAttention,
}

fn view_jobs<'a>(bundle: &'a SceneBundle, cfg: &PipelineConfig) -> Result<Vec<PromptJob<'a>>, PipelineError> {
    let mut jobs = Vec::new();
    for view in make_views(bundle.image_width, bundle.image_height, cfg.multiscale) {
        let (image_ref, prompts) = if view.view_id == 0 {
            (bundle.image_ref.clone(), &bundle.prompts)
        } else {
            let sub = bundle
                .views
                .iter()
                .find(|v| v.view_id == view.view_id)
                .ok_or_else(|| PipelineError::Input(format!("scene has no inputs for view {}", view.view_id)))?;
            let image_ref = sub.image_ref.clone().unwrap_or_else(|| {
                crop_ref(&bundle.image_ref, view.offset_x, view.offset_y, view.width, view.height)
            });
            (image_ref, &sub.prompts)
        };
        jobs.extend(prompts.iter().map(|prompt| PromptJob {
            view,
            image_ref: image_ref.clone(),
            prompt,
        }));
    }
    Ok(jobs)
}

fn roll<'a>(job: PromptJob<'a>, base: &Path, regularize: bool) -> Result<Rolled<'a>, PipelineError> {
    let wrap = |source: TaskError| PipelineError::Task {
        view: job.view.view_id,
        prompt: job.prompt.prompt_id,
        tag: None,
        source,
    };
    let cache = load_cache(base.join(&job.prompt.cache_path)).map_err(|e| wrap(e.into()))?;
    let sim = compute_similarity(&cache).map_err(|e| wrap(e.into()))?;
    let rolled = attention_flow(&sim, regularize);
    Ok(Rolled { job, cache, rolled })
}

fn run_tag(
    r: &Rolled<'_>,
    tag_index: usize,
    bundle: &SceneBundle,
    seg: &dyn Segmenter,
    cfg: &PipelineConfig,
) -> Result<Vec<Detection>, TaskError> {
    let tag = &r.job.prompt.tags[tag_index];
    let view = r.job.view;
    let map = extract_map(&r.rolled, &r.cache, &tag.token_positions, &tag.text, view.width, view.height)?;
    if let Some(dir) = &cfg.dump_maps {
        let name = format!("v{}_p{}_t{}.pgm", view.view_id, r.job.prompt.prompt_id, tag_index);
        dump_dense_map(dir.join(name), &upsample_map(&map))?;
    }
    let outcome = iterate(&map, seg, &r.job.image_ref, &cfg.iter)?;
    log::debug!(
        "view {} prompt {} tag `{}`: {} masks, stop {:?}",
        view.view_id,
        r.job.prompt.prompt_id,
        tag.text,
        outcome.masks.len(),
        outcome.stop
    );
    outcome
        .masks
        .into_iter()
        .map(|m| {
            let prov = Provenance {
                view: view.view_id,
                prompt: r.job.prompt.prompt_id,
                iteration: m.iteration,
            };
            let local = Detection::new(tag.text.clone(), m.score, m.mask, prov)?;
            Ok(remap_detection(&local, &view, bundle.image_width, bundle.image_height)?)
        })
        .collect()
}

fn run_inner(
    bundle: &SceneBundle,
    base: &Path,
    seg: &dyn Segmenter,
    cfg: &PipelineConfig,
) -> Result<Vec<Detection>, PipelineError> {
    let label_table = match (&cfg.embeddings, &bundle.label_embeddings) {
        (Some(_), Some(p)) => Some(EmbeddingTable::load(base.join(p))?),
        (Some(_), None) => {
            return Err(PipelineError::Input(
                "category mapping requested but the scene has no label_embeddings".into(),
            ))
        }
        (None, _) => None,
    };
    if let Some(dir) = &cfg.dump_maps {
        fs::create_dir_all(dir).map_err(|e| PipelineError::Input(format!("creating {}: {e}", dir.display())))?;
    }
    let jobs = view_jobs(bundle, cfg)?;
    let rolled: Vec<Rolled<'_>> = jobs
        .into_par_iter()
        .map(|job| roll(job, base, cfg.regularize))
        .collect::<Result<_, _>>()?;
    let tasks: Vec<(usize, usize)> = rolled
        .iter()
        .enumerate()
        .flat_map(|(ri, r)| (0..r.job.prompt.tags.len()).map(move |ti| (ri, ti)))
        .collect();
    let per_task: Vec<Vec<Detection>> = tasks
        .into_par_iter()
        .map(|(ri, ti)| {
            let r = &rolled[ri];
            run_tag(r, ti, bundle, seg, cfg).map_err(|source| PipelineError::Task {
                view: r.job.view.view_id,
                prompt: r.job.prompt.prompt_id,
                tag: Some(r.job.prompt.tags[ti].text.clone()),
                source,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut dets = merge(per_task.into_iter().flatten().collect(), cfg.nms_iou, cfg.per_label_nms);

    if let (Some(table), Some(labels)) = (&cfg.embeddings, &label_table) {
        for d in &mut dets {
            let Some(v) = labels.get(&d.label) else {
                log::warn!("no embedding for label `{}`", d.label);
                continue;
            };
            d.mapped_category = map_categories(&[v], table)?.remove(0).map(|m| m.mapped);
        }
    }
    Ok(dets)
}

/// Runs the whole pipeline for one scene. Deterministic for a deterministic
/// segmenter: results are collected in (view, prompt, tag, iteration) order
/// before the stable NMS sort.
pub fn run_pipeline(
    bundle: &SceneBundle,
    base: &Path,
    seg: &dyn Segmenter,
    cfg: &PipelineConfig,
) -> Result<Vec<Detection>, PipelineError> {
    cfg.iter.validate().map_err(PipelineError::Input)?;
    if !(0.0..=1.0).contains(&cfg.nms_iou) {
        return Err(PipelineError::Input(format!("nms iou {} outside [0, 1]", cfg.nms_iou)));
    }
    match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| PipelineError::Input(e.to_string()))?
            .install(|| run_inner(bundle, base, seg, cfg)),
        None => run_inner(bundle, base, seg, cfg),
    }
}

/// JSON array, one compact detection per line, LF endings.
pub fn detections_to_string(dets: &[Detection]) -> String {
    if dets.is_empty() {
        return "[]\n".into();
    }
    let mut out = String::from("[\n");
    for (i, d) in dets.iter().enumerate() {
        out.push_str(&serde_json::to_string(d).expect("detection serializes"));
        out.push_str(if i + 1 < dets.len() { ",\n" } else { "\n" });
    }
    out.push_str("]\n");
    out
}

pub fn write_detections(path: impl AsRef<Path>, dets: &[Detection]) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(detections_to_string(dets).as_bytes())
}
