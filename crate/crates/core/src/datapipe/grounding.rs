//! Grounded-caption requests to a vision-language service and validation of its replies.

use std::io::Cursor;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::SampleRecord;

/// Paraphrased instruction; not the original service prompt.
pub const GROUNDING_INSTRUCTION: &str = "You are given a satellite image and its original caption. \
Use both the image and the original caption to write an improved caption: one paragraph describing \
the scene in detail. Then detect the subjects mentioned in your caption and provide structured \
bounding box coordinates for each: the pixel coordinates [x_min, y_min, x_max, y_max] of a box \
encompassing the object, with 0 <= x_min < x_max <= image width and 0 <= y_min < y_max <= image height. \
Answer with JSON matching the response schema only.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    pub phrase: String,
    /// `[x_min, y_min, x_max, y_max]` in pixels.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundedCaption {
    pub text: String,
    pub groundings: Vec<Grounding>,
    /// Set when the service's boxes were rejected and only the caption was kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum GroundingError {
    #[error("malformed grounding response: {0}")]
    Malformed(String),

    #[error("invalid box {bbox:?} for phrase {phrase:?} in a {width}x{height} image: {reason}")]
    InvalidBox {
        phrase: String,
        bbox: Vec<f64>,
        width: u32,
        height: u32,
        reason: String,
        /// The improved caption, kept so callers can salvage it.
        caption: String,
    },
}

/// Payload sent to the service for one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingRequest {
    pub id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub image_png_base64: String,
    pub original_caption: String,
    pub instruction: String,
    pub response_schema: Value,
}

impl GroundingRequest {
    /// sha256 of everything except the record id.
    pub fn prompt_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            self.image_width.to_string(),
            self.image_height.to_string(),
            self.image_png_base64.clone(),
            self.original_caption.clone(),
            self.instruction.clone(),
            self.response_schema.to_string(),
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Cache key combining record id and prompt fingerprint.
    pub fn cache_key(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.id.as_bytes());
        h.update(b"\0");
        h.update(self.prompt_fingerprint().as_bytes());
        hex::encode(h.finalize())
    }
}

pub fn response_schema() -> Value {
    json!({
        "type": "object",
        "required": ["caption", "groundings"],
        "properties": {
            "caption": {"type": "string"},
            "groundings": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["phrase", "bbox"],
                    "properties": {
                        "phrase": {"type": "string", "minLength": 1},
                        "bbox": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}
                    }
                }
            }
        }
    })
}

pub fn build_grounding_request(record: &SampleRecord, image: &image::RgbImage) -> crate::Result<GroundingRequest> {
    let mut png = Vec::new();
    image.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)?;
    Ok(GroundingRequest {
        id: record.id.clone(),
        image_width: image.width(),
        image_height: image.height(),
        image_png_base64: base64::engine::general_purpose::STANDARD.encode(&png),
        original_caption: record.caption.clone(),
        instruction: GROUNDING_INSTRUCTION.to_string(),
        response_schema: response_schema(),
    })
}

/// Accepts a bare JSON object or one wrapped in a ```json fence.
fn extract_json(text: &str) -> &str {
    let t = text.trim();
    if let Some(start) = t.find("```") {
        let body = &t[start + 3..];
        let body = body.strip_prefix("json").unwrap_or(body);
        if let Some(end) = body.find("```") {
            return body[..end].trim();
        }
    }
    t
}

fn malformed(msg: impl Into<String>) -> GroundingError {
    GroundingError::Malformed(msg.into())
}

pub fn parse_grounded_response(text: &str, width: u32, height: u32) -> Result<GroundedCaption, GroundingError> {
    let value: Value = serde_json::from_str(extract_json(text)).map_err(|e| malformed(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| malformed("response is not a JSON object"))?;
    let caption = obj
        .get("caption")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing string field `caption`"))?
        .to_string();
    let items = obj
        .get("groundings")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing array field `groundings`"))?;
    let mut raw = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let phrase = item
            .get("phrase")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed(format!("grounding {i} has no string `phrase`")))?;
        let coords = item
            .get("bbox")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(format!("grounding {i} has no array `bbox`")))?;
        let nums: Option<Vec<f64>> = coords.iter().map(Value::as_f64).collect();
        let nums = nums.ok_or_else(|| malformed(format!("grounding {i} bbox has non-numeric entries")))?;
        raw.push((phrase.to_string(), nums));
    }
    let mut groundings = Vec::with_capacity(raw.len());
    for (phrase, nums) in raw {
        let invalid = |reason: &str| GroundingError::InvalidBox {
            phrase: phrase.clone(),
            bbox: nums.clone(),
            width,
            height,
            reason: reason.to_string(),
            caption: caption.clone(),
        };
        if phrase.trim().is_empty() {
            return Err(invalid("empty phrase"));
        }
        if nums.len() != 4 {
            return Err(invalid("bbox must have exactly four coordinates"));
        }
        let [x0, y0, x1, y1] = [nums[0], nums[1], nums[2], nums[3]];
        if !(x0 >= 0.0 && y0 >= 0.0) {
            return Err(invalid("negative minimum coordinate"));
        }
        if !(x0 < x1 && y0 < y1) {
            return Err(invalid("degenerate box"));
        }
        if x1 > width as f64 || y1 > height as f64 {
            return Err(invalid("box exceeds the image bounds"));
        }
        groundings.push(Grounding {
            bbox: [x0, y0, x1, y1],
            phrase,
        });
    }
    Ok(GroundedCaption {
        text: caption,
        groundings,
        warning: None,
    })
}

/// Like [`parse_grounded_response`], but an invalid box keeps the caption with no
/// groundings and a warning instead of failing.
pub fn parse_or_salvage(text: &str, width: u32, height: u32) -> Result<GroundedCaption, GroundingError> {
    match parse_grounded_response(text, width, height) {
        Err(e @ GroundingError::InvalidBox { .. }) => {
            let GroundingError::InvalidBox { ref caption, .. } = e else { unreachable!() };
            Ok(GroundedCaption {
                text: caption.clone(),
                groundings: Vec::new(),
                warning: Some(e.to_string()),
            })
        }
        other => other,
    }
}

/// True when every box satisfies the in-bounds, non-degenerate invariant.
pub fn is_valid_grounding(g: &GroundedCaption, width: u32, height: u32) -> bool {
    g.groundings.iter().all(|b| {
        let [x0, y0, x1, y1] = b.bbox;
        !b.phrase.trim().is_empty()
            && x0 >= 0.0
            && y0 >= 0.0
            && x0 < x1
            && y0 < y1
            && x1 <= width as f64
            && y1 <= height as f64
    })
}
