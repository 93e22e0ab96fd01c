//! Line-delimited JSON segmenter protocol, shared by the stdio and HTTP
//! transports.
//!
//! ```text
//! -> {"id":1,"image":"a.png","points":[{"x":75.0,"y":25.0,"positive":true}],"mask_prompt":null,"multimask":false}
//! <- {"id":1,"masks":[{"width":100,"height":100,"rle":[...],"score":0.97}]}
//! <- {"id":1,"error":"no object at positive point"}
//! ```

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::mask::SegMask;
use super::{ScoredMask, SegmentError};
use crate::prompting::{Point, PointPromptSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePoint {
    pub x: f64,
    pub y: f64,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub id: u64,
    pub image: String,
    pub points: Vec<WirePoint>,
    pub mask_prompt: Option<SegMask>,
    pub multimask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMask {
    pub width: u32,
    pub height: u32,
    pub rle: Vec<u32>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SegmentResponse {
    Masks { id: u64, masks: Vec<WireMask> },
    Error { id: u64, error: String },
}

impl SegmentRequest {
    /// Positives first, then negatives, each in prompt order.
    pub fn from_prompts(id: u64, image: &str, prompts: &PointPromptSet, multimask: bool) -> Self {
        let tag = |positive: bool| move |p: &Point| WirePoint { x: p.x, y: p.y, positive };
        SegmentRequest {
            id,
            image: image.to_owned(),
            points: prompts
                .positives
                .iter()
                .map(tag(true))
                .chain(prompts.negatives.iter().map(tag(false)))
                .collect(),
            mask_prompt: prompts.mask_prompt.clone(),
            multimask,
        }
    }

    pub fn to_prompts(&self) -> PointPromptSet {
        let split = |positive: bool| {
            self.points
                .iter()
                .filter(|p| p.positive == positive)
                .map(|p| Point { x: p.x, y: p.y })
                .collect()
        };
        PointPromptSet {
            positives: split(true),
            negatives: split(false),
            mask_prompt: self.mask_prompt.clone(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }
}

impl SegmentResponse {
    pub fn id(&self) -> u64 {
        match self {
            SegmentResponse::Masks { id, .. } | SegmentResponse::Error { id, .. } => *id,
        }
    }

    pub fn from_result(id: u64, result: Result<Vec<ScoredMask>, SegmentError>) -> Self {
        match result {
            Ok(masks) => SegmentResponse::Masks {
                id,
                masks: masks
                    .into_iter()
                    .map(|m| WireMask {
                        width: m.mask.width,
                        height: m.mask.height,
                        rle: m.mask.rle,
                        score: m.score,
                    })
                    .collect(),
            },
            Err(SegmentError::Backend(msg)) => SegmentResponse::Error { id, error: msg },
            Err(other) => SegmentResponse::Error {
                id,
                error: other.to_string(),
            },
        }
    }

    /// Checks the id and converts to masks; error objects become
    /// [`SegmentError::Backend`].
    pub fn into_result(self, expected_id: u64) -> Result<Vec<ScoredMask>, SegmentError> {
        if self.id() != expected_id {
            return Err(SegmentError::Protocol(format!(
                "response id {} does not match request id {expected_id}",
                self.id()
            )));
        }
        match self {
            SegmentResponse::Masks { masks, .. } => Ok(masks
                .into_iter()
                .map(|m| ScoredMask {
                    mask: SegMask {
                        width: m.width,
                        height: m.height,
                        rle: m.rle,
                    },
                    score: m.score,
                })
                .collect()),
            SegmentResponse::Error { error, .. } => Err(SegmentError::Backend(error)),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }

    pub fn parse(line: &str) -> Result<Self, SegmentError> {
        serde_json::from_str(line.trim())
            .map_err(|e| SegmentError::Protocol(format!("bad response line: {e}")))
    }
}

/// Answers one raw request line. Malformed lines produce an error object
/// (with the request id when one can be recovered, otherwise 0).
pub fn handle_line(
    line: &str,
    handler: impl Fn(&SegmentRequest) -> Result<Vec<ScoredMask>, SegmentError>,
) -> SegmentResponse {
    match serde_json::from_str::<SegmentRequest>(line.trim()) {
        Ok(req) => SegmentResponse::from_result(req.id, handler(&req)),
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line.trim())
                .ok()
                .and_then(|v| v.get("id").and_then(|id| id.as_u64()))
                .unwrap_or(0);
            SegmentResponse::Error {
                id,
                error: format!("malformed request: {e}"),
            }
        }
    }
}

/// Serves requests line by line until EOF.
pub fn serve_lines<R: BufRead, W: Write>(
    input: R,
    mut output: W,
    handler: impl Fn(&SegmentRequest) -> Result<Vec<ScoredMask>, SegmentError>,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle_line(&line, &handler);
        writeln!(output, "{}", resp.to_line())?;
        output.flush()?;
    }
    Ok(())
}
