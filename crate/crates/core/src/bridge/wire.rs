// SPDX-License-Identifier: MIT OR Apache-2.0

//! Request and response bodies. Unknown fields are rejected.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{LineError, Result};

pub const PNG: &str = "image/png";
pub const JPEG: &str = "image/jpeg";

/// Media type from the leading magic bytes, if PNG or JPEG.
pub fn sniff_media_type(bytes: &[u8]) -> Option<&'static str> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        Some(PNG)
    } else if bytes.starts_with(&[0xff, 0xd8, 0xff]) {
        Some(JPEG)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireImage {
    pub b64: String,
    pub media_type: String,
}

impl WireImage {
    pub fn encode(media_type: &str, bytes: &[u8]) -> Self {
        Self {
            b64: STANDARD.encode(bytes),
            media_type: media_type.to_string(),
        }
    }

    /// Decodes and checks the bytes are an image of the declared type.
    pub fn decode(&self) -> Result<(String, Vec<u8>)> {
        let bytes = STANDARD
            .decode(&self.b64)
            .map_err(|e| LineError::Protocol(format!("image payload is not base64: {e}")))?;
        match sniff_media_type(&bytes) {
            Some(t) if t == self.media_type => Ok((self.media_type.clone(), bytes)),
            Some(t) => Err(LineError::Protocol(format!(
                "image declared as {} but bytes are {t}",
                self.media_type
            ))),
            None => Err(LineError::Protocol(format!(
                "image payload declared as {} is not a PNG or JPEG image",
                self.media_type
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRequest {
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: Option<u64>,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WirePrompt {
    pub text: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagesRequest {
    pub prompts: Vec<WirePrompt>,
    #[serde(default)]
    pub options: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagesResponse {
    pub images: Vec<WireImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationsRequest {
    pub images: Vec<WireImage>,
    pub layer: String,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationsResponse {
    pub activations: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub image: WireImage,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditResponse {
    pub image: WireImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}
