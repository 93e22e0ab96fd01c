//! Training-free open-ended detection from cached vision-language attention.
//!
//! A recognizer describes an image and its per-layer queries/keys are cached
//! to disk (the ATNC format, see [`atncache`]). For every generated object
//! tag the cached attention is aggregated over heads, propagated through the
//! layers by a regularized rollout, and cropped to the image-token grid
//! ([`attnflow`]). Point prompts are sampled from that grid and refined
//! iteratively against a promptable segmenter ([`prompting`], [`segment`]).
//! Results from several views and question prompts are merged with NMS
//! ([`ensemble`]), and [`pipeline`] ties the stages together.

pub mod atncache;
pub mod attnflow;
pub mod ensemble;
pub mod eval;
pub mod labels;
pub mod pipeline;
pub mod prompting;
pub mod segment;
pub mod synthetic;

pub use atncache::{load_cache, AttentionCache, CacheError, CacheMode, SimilarityTensor};
pub use attnflow::{AttentionMap, FlowError, HeadWeights, LayerStack, RolledAttention};
pub use ensemble::{EmbeddingTable, View};
pub use eval::{evaluate, GroundTruth, RecallReport};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineError, SceneBundle};
pub use prompting::{Connectivity, IterConfig, Point, PointPromptSet, RegionMask};
pub use segment::{
    Detection, PixelBox, Provenance, ScoredMask, SegMask, SegmentError, Segmenter,
    SegmenterHandle,
};
