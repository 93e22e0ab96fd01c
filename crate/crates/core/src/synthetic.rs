//! Seeded synthetic scenes with hand-built attention caches.
//!
//! Each scene plants axis-aligned rectangles in a label image. The matching
//! cache is a `sim`-mode tensor with token layout
//!
//! ```text
//! 0: BOS | 1 ..= P*P: image patches | prompt text | one token per object tag
//! ```
//!
//! Head 0 carries the signal: patch and BOS rows attend to themselves,
//! prompt-text rows attend uniformly, and each tag row puts `TAG_RECT_MASS`
//! evenly on the patches whose centers fall inside its rectangle. Head 1 is
//! the identity. Because patch rows are self-loops the rolled-out tag row,
//! restricted to the image, stays proportional to the tag's raw row times
//! the column regularization, so the map peaks inside the rectangle.
//!
//! Collapse-adversarial scenes add an attention sink: every tag row also
//! puts `SINK_RATIO` times a rectangle cell's mass on the first image patch
//! (a background cell). Without regularization that sink is the map's
//! strongest cell and the only one above a 0.5 threshold; with it, the
//! sink's early column is damped below half of the rectangle's peak.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atncache::{write_cache, AttentionCache, CacheError, Token};
use crate::ensemble::{crop_mask, make_views, View};
use crate::eval::{GroundTruth, GtObject};
use crate::labels::{LabelError, LabelImage};
use crate::pipeline::{PromptSpec, SceneBundle, TagSpec, ViewBundle};
use crate::segment::{Bitmap, PixelBox, SegMask};

pub const BOS_MASS: f32 = 0.1;
pub const TAG_RECT_MASS: f32 = 0.5;
pub const SINK_RATIO: f32 = 2.5;
const TEXT_TOKENS: usize = 3;
const NAMES: [&str; 12] = [
    "crate", "panel", "sign", "block", "door", "window", "poster", "box", "tile", "screen", "mat", "board",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub width: u32,
    pub height: u32,
    pub grid_side: usize,
    pub layers: usize,
    pub min_side: u32,
    pub max_side: u32,
    pub max_objects: usize,
    /// Every `adversarial_every`-th scene (1-based) gets an attention sink.
    pub adversarial_every: usize,
    /// Also emit corner-view caches for the multi-scale ensemble.
    pub with_views: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 160,
            height: 160,
            grid_side: 8,
            layers: 3,
            min_side: 40,
            max_side: 64,
            max_objects: 4,
            adversarial_every: 4,
            with_views: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub name: String,
    pub label: u32,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
}

#[derive(Debug, thiserror::Error)]
pub enum SyntheticError {
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Labels(#[from] LabelError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("could not place {0} rectangles")]
    Placement(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SyntheticError + '_ {
    move |source| SyntheticError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Grid cells whose pixel-center sample lies inside `rect`.
pub fn covered_cells(rect: &PixelBox, width: u32, height: u32, p: usize) -> Vec<usize> {
    let mut cells = Vec::new();
    for r in 0..p {
        let cy = ((r as f64 + 0.5) * f64::from(height) / p as f64).floor() as u32;
        for c in 0..p {
            let cx = ((c as f64 + 0.5) * f64::from(width) / p as f64).floor() as u32;
            if cx >= rect.x1 && cx < rect.x2 && cy >= rect.y1 && cy < rect.y2 {
                cells.push(r * p + c);
            }
        }
    }
    cells
}

/// Builds the sim cache and tag list for objects inside a `width x height`
/// image. Objects covering no cell center get no tag.
pub fn build_cache(
    objects: &[PlantedObject],
    width: u32,
    height: u32,
    cfg: &SyntheticConfig,
    adversarial: bool,
) -> Result<(AttentionCache, Vec<TagSpec>), CacheError> {
    let p = cfg.grid_side;
    let image_start = 1;
    let image_end = image_start + p * p;
    let tagged: Vec<(&PlantedObject, Vec<usize>)> = objects
        .iter()
        .map(|o| (o, covered_cells(&o.bbox, width, height, p)))
        .filter(|(_, cells)| !cells.is_empty())
        .collect();
    let first_tag = image_end + TEXT_TOKENS;
    let n = first_tag + tagged.len();
    let mut sim = Array4::<f32>::zeros((cfg.layers, 2, n, n));
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for l in 0..cfg.layers {
        for i in 0..n {
            sim[[l, 1, i, i]] = 1.0;
        }
        for i in 0..first_tag {
            if i < image_end {
                sim[[l, 0, i, i]] = 1.0;
            } else {
                for j in 0..=i {
                    sim[[l, 0, i, j]] = 1.0 / (i + 1) as f32;
                }
            }
        }
        for (k, (_, cells)) in tagged.iter().enumerate() {
            let t = first_tag + k;
            let per_cell = TAG_RECT_MASS / cells.len() as f32;
            let sink = if adversarial { SINK_RATIO * per_cell } else { 0.0 };
            sim[[l, 0, t, 0]] = BOS_MASS;
            for &u in cells {
                sim[[l, 0, t, image_start + u]] = per_cell;
            }
            sim[[l, 0, t, image_start]] += sink;
            sim[[l, 0, t, t]] = 1.0 - BOS_MASS - TAG_RECT_MASS - sink;
        }
    }
    for (k, (o, _)) in tagged.iter().enumerate() {
        tokens.push(Token {
            position: first_tag + k,
            text: o.name.clone(),
        });
        tags.push(TagSpec {
            text: o.name.clone(),
            token_positions: vec![first_tag + k],
        });
    }
    let cache = AttentionCache::from_sim(sim, image_start..image_end, p, tokens)?;
    Ok((cache, tags))
}

/// Non-overlapping rectangles (4 px apart) that avoid the first grid
/// cell's center, where adversarial scenes put their sink.
pub fn place_objects(rng: &mut impl Rng, cfg: &SyntheticConfig, count: usize) -> Result<Vec<PlantedObject>, SyntheticError> {
    let sink = {
        let cx = (0.5 * f64::from(cfg.width) / cfg.grid_side as f64) as u32;
        let cy = (0.5 * f64::from(cfg.height) / cfg.grid_side as f64) as u32;
        (cx, cy)
    };
    let mut names: Vec<&str> = NAMES.to_vec();
    let mut out: Vec<PlantedObject> = Vec::new();
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(SyntheticError::Placement(count));
        }
        let w = rng.random_range(cfg.min_side..=cfg.max_side);
        let h = rng.random_range(cfg.min_side..=cfg.max_side);
        let x = rng.random_range(0..=cfg.width - w);
        let y = rng.random_range(0..=cfg.height - h);
        let b = PixelBox::from([x, y, x + w, y + h]);
        if sink.0 >= b.x1 && sink.0 < b.x2 && sink.1 >= b.y1 && sink.1 < b.y2 {
            continue;
        }
        let clash = out.iter().any(|o| {
            b.x1 < o.bbox.x2 + 4 && o.bbox.x1 < b.x2 + 4 && b.y1 < o.bbox.y2 + 4 && o.bbox.y1 < b.y2 + 4
        });
        if clash {
            continue;
        }
        let name = names.remove(rng.random_range(0..names.len()));
        out.push(PlantedObject {
            name: name.to_owned(),
            label: out.len() as u32 + 1,
            bbox: b,
        });
    }
    Ok(out)
}

pub fn rect_mask(b: &PixelBox, width: u32, height: u32) -> SegMask {
    let mut bm = Bitmap::new(width, height);
    for y in b.y1..b.y2 {
        for x in b.x1..b.x2 {
            bm.set(x, y, true);
        }
    }
    SegMask::encode(&bm)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneEntry {
    pub name: String,
    pub adversarial: bool,
    pub objects: Vec<PlantedObject>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub seed: u64,
    pub config: SyntheticConfig,
    pub scenes: Vec<SceneEntry>,
}

impl Corpus {
    pub fn load(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = fs::read_to_string(dir.as_ref().join("corpus.json"))?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

fn clip(b: &PixelBox, v: &View) -> Option<PixelBox> {
    let x1 = b.x1.max(v.offset_x);
    let y1 = b.y1.max(v.offset_y);
    let x2 = b.x2.min(v.offset_x + v.width);
    let y2 = b.y2.min(v.offset_y + v.height);
    (x1 < x2 && y1 < y2).then(|| PixelBox::from([x1 - v.offset_x, y1 - v.offset_y, x2 - v.offset_x, y2 - v.offset_y]))
}

fn write_scene(
    dir: &Path,
    objects: &[PlantedObject],
    adversarial: bool,
    cfg: &SyntheticConfig,
) -> Result<(), SyntheticError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (w, h) = (cfg.width, cfg.height);
    let mut labels = LabelImage::new(w, h);
    for o in objects {
        labels.fill_rect(o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2, o.label);
    }
    labels.save(dir.join("labels.pgm"))?;

    let (cache, tags) = build_cache(objects, w, h, cfg, adversarial)?;
    write_cache(&cache, dir.join("cache"))?;
    let prompt = |cache_path: String, tags: Vec<TagSpec>| PromptSpec {
        prompt_id: 0,
        prompt_text: "List all objects in the image.".into(),
        cache_path,
        tags,
    };

    let mut views = Vec::new();
    if cfg.with_views {
        for view in make_views(w, h, true).into_iter().skip(1) {
            let local: Vec<PlantedObject> = objects
                .iter()
                .filter_map(|o| {
                    clip(&o.bbox, &view).map(|bbox| PlantedObject {
                        bbox,
                        ..o.clone()
                    })
                })
                .collect();
            let (vcache, vtags) = build_cache(&local, view.width, view.height, cfg, false)?;
            let rel = format!("views/v{}", view.view_id);
            write_cache(&vcache, dir.join(&rel))?;
            views.push(ViewBundle {
                view_id: view.view_id,
                image_ref: None,
                prompts: vec![prompt(format!("{rel}/manifest.json"), vtags)],
            });
        }
    }

    let bundle = SceneBundle {
        image_width: w,
        image_height: h,
        image_ref: "image.png".into(),
        prompts: vec![prompt("cache/manifest.json".into(), tags)],
        views,
        label_embeddings: None,
    };
    let scene_path = dir.join("scene.json");
    bundle.save(&scene_path).map_err(io_err(&scene_path))?;

    let gt = GroundTruth {
        objects: objects
            .iter()
            .map(|o| GtObject {
                bbox: o.bbox.as_f64(),
                label: Some(o.name.clone()),
                mask: Some(rect_mask(&o.bbox, w, h)),
            })
            .collect(),
    };
    let gt_path = dir.join("gt.json");
    fs::write(&gt_path, serde_json::to_string(&gt).expect("serializes") + "\n").map_err(io_err(&gt_path))?;
    Ok(())
}

/// Writes `scenes` seeded scenes plus `corpus.json` under `out`.
pub fn generate(out: impl AsRef<Path>, scenes: usize, seed: u64, cfg: &SyntheticConfig) -> Result<Corpus, SyntheticError> {
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(scenes);
    for i in 0..scenes {
        let count = rng.random_range(1..=cfg.max_objects);
        let objects = place_objects(&mut rng, cfg, count)?;
        let adversarial = cfg.adversarial_every > 0 && (i + 1) % cfg.adversarial_every == 0;
        let name = format!("scene_{i:03}");
        write_scene(&out.join(&name), &objects, adversarial, cfg)?;
        entries.push(SceneEntry {
            name,
            adversarial,
            objects,
        });
    }
    let corpus = Corpus {
        seed,
        config: cfg.clone(),
        scenes: entries,
    };
    let path = out.join("corpus.json");
    fs::write(&path, serde_json::to_string_pretty(&corpus).expect("serializes") + "\n").map_err(io_err(&path))?;
    Ok(corpus)
}

/// The crop of a planted scene's ground-truth mask seen by `view`.
pub fn view_mask(obj: &PlantedObject, cfg: &SyntheticConfig, view: &View) -> Option<SegMask> {
    clip(&obj.bbox, view)?;
    crop_mask(&rect_mask(&obj.bbox, cfg.width, cfg.height), view).ok()
}
