//! HTTP transport: one wire-protocol request per `POST /segment`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use super::wire::{SegmentRequest, SegmentResponse};
use super::{ScoredMask, SegmentError, Segmenter};
use crate::prompting::PointPromptSet;

pub struct HttpSegmenter {
    agent: ureq::Agent,
    endpoint: String,
    next_id: AtomicU64,
}

impl HttpSegmenter {
    /// `base` is either the full endpoint or a server root to which
    /// `/segment` is appended.
    pub fn new(base: &str) -> Self {
        let base = base.trim_end_matches('/');
        let endpoint = if base.ends_with("/segment") {
            base.to_owned()
        } else {
            format!("{base}/segment")
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        HttpSegmenter {
            agent,
            endpoint,
            next_id: AtomicU64::new(1),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl Segmenter for HttpSegmenter {
    fn segment_raw(
        &self,
        image_ref: &str,
        prompts: &PointPromptSet,
    ) -> Result<Vec<ScoredMask>, SegmentError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let req = SegmentRequest::from_prompts(id, image_ref, prompts, false);
        let body = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json")
            .send(req.to_line())
            .map_err(|e| SegmentError::Transport(e.to_string()))?
            .into_body()
            .read_to_string()
            .map_err(|e| SegmentError::Transport(e.to_string()))?;
        SegmentResponse::parse(&body)?.into_result(id)
    }
}
