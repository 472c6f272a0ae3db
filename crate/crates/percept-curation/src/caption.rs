//! Auto-captioning and caption refinement. Captions come from pluggable
//! sources (a deterministic table-driven mock and an HTTP client speaking a
//! one-request-per-image JSON protocol); refinement filters on length,
//! character entropy, and a banned-word list.

use base64::Engine;
use percept_core::RasterImage;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Duration;
use thiserror::Error;

/// At most this many captions are kept per image.
pub const MAX_CAPTIONS_PER_IMAGE: usize = 4;

/// Hedging words that disqualify a caption (case-insensitive, whole word).
pub const BANNED_WORDS: [&str; 6] = ["indicate", "might", "may", "imply", "perhaps", "possibly"];

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("source {source_id}: {detail}")]
    SourceFailed { source_id: String, detail: String },
    #[error("no caption available for image {image_ref}")]
    NoEntry { image_ref: String },
}

/// One caption with its provenance and refinement verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub source: String,
    pub text: String,
    pub accepted: bool,
    pub reject_reason: Option<String>,
}

/// All captions gathered for one image plus any source failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_ref: String,
    pub captions: Vec<CaptionEntry>,
    pub failures: Vec<String>,
}

impl CaptionRecord {
    /// Texts of captions that passed refinement.
    pub fn accepted_texts(&self) -> Vec<String> {
        self.captions.iter().filter(|c| c.accepted).map(|c| c.text.clone()).collect()
    }

    /// True when every source failed and nothing was stored.
    pub fn all_failed(&self) -> bool {
        self.captions.is_empty() && !self.failures.is_empty()
    }
}

/// A captioning backend: one image in, one or more caption strings out.
pub trait CaptionSource {
    fn id(&self) -> &str;
    fn caption(&self, image_ref: &str, image: &RasterImage) -> Result<Vec<String>, CaptionError>;
}

/// Deterministic, table-driven source for tests and offline pipelines.
pub struct MockCaptioner {
    id: String,
    table: BTreeMap<String, Vec<String>>,
    fail_with: Option<String>,
}

impl MockCaptioner {
    pub fn new(id: impl Into<String>, table: BTreeMap<String, Vec<String>>) -> Self {
        Self { id: id.into(), table, fail_with: None }
    }

    /// A mock that always fails, for degradation tests.
    pub fn failing(id: impl Into<String>, detail: impl Into<String>) -> Self {
        Self { id: id.into(), table: BTreeMap::new(), fail_with: Some(detail.into()) }
    }
}

impl CaptionSource for MockCaptioner {
    fn id(&self) -> &str {
        &self.id
    }

    fn caption(&self, image_ref: &str, _image: &RasterImage) -> Result<Vec<String>, CaptionError> {
        if let Some(detail) = &self.fail_with {
            return Err(CaptionError::SourceFailed {
                source_id: self.id.clone(),
                detail: detail.clone(),
            });
        }
        self.table
            .get(image_ref)
            .cloned()
            .ok_or_else(|| CaptionError::NoEntry { image_ref: image_ref.to_string() })
    }
}

#[derive(Serialize)]
struct CaptionRequest<'a> {
    image_id: &'a str,
    height: usize,
    width: usize,
    rgb_b64: String,
}

#[derive(Deserialize)]
struct CaptionResponse {
    captions: Vec<String>,
}

/// HTTP caption source. Protocol: POST a JSON body with the image id plus
/// base64 raw RGB bytes; the server answers `{"captions": ["..."]}`.
pub struct HttpCaptioner {
    id: String,
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpCaptioner {
    pub fn new(id: impl Into<String>, endpoint: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        Self { id: id.into(), endpoint: endpoint.into(), agent: ureq::Agent::new_with_config(config) }
    }
}

impl CaptionSource for HttpCaptioner {
    fn id(&self) -> &str {
        &self.id
    }

    fn caption(&self, image_ref: &str, image: &RasterImage) -> Result<Vec<String>, CaptionError> {
        let fail = |detail: String| CaptionError::SourceFailed { source_id: self.id.clone(), detail };
        let request = CaptionRequest {
            image_id: image_ref,
            height: image.height(),
            width: image.width(),
            rgb_b64: base64::engine::general_purpose::STANDARD.encode(image.bytes()),
        };
        let body = serde_json::to_string(&request).map_err(|e| fail(e.to_string()))?;
        let mut response = self
            .agent
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .send(&body)
            .map_err(|e| fail(e.to_string()))?;
        let text = response.body_mut().read_to_string().map_err(|e| fail(e.to_string()))?;
        let parsed: CaptionResponse =
            serde_json::from_str(&text).map_err(|e| fail(format!("bad response body: {e}")))?;
        Ok(parsed.captions)
    }
}

/// Queries every source, deduplicates caption texts (first source wins), and
/// keeps at most [`MAX_CAPTIONS_PER_IMAGE`]. Failures degrade gracefully and
/// are recorded rather than propagated.
pub fn request_captions(
    image_ref: &str,
    image: &RasterImage,
    sources: &[&dyn CaptionSource],
) -> CaptionRecord {
    let mut captions: Vec<CaptionEntry> = Vec::new();
    let mut failures = Vec::new();
    for source in sources {
        match source.caption(image_ref, image) {
            Ok(texts) => {
                for text in texts {
                    if captions.len() >= MAX_CAPTIONS_PER_IMAGE {
                        break;
                    }
                    if captions.iter().any(|c| c.text == text) {
                        continue;
                    }
                    captions.push(CaptionEntry {
                        source: source.id().to_string(),
                        text,
                        accepted: false,
                        reject_reason: None,
                    });
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    CaptionRecord { image_ref: image_ref.to_string(), captions, failures }
}

/// Refinement thresholds; defaults give the filter used throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub min_words: usize,
    pub max_words: usize,
    pub min_entropy_bits: f64,
    pub banned: Vec<String>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            min_words: 5,
            max_words: 128,
            min_entropy_bits: 3.0,
            banned: BANNED_WORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Shannon entropy in bits of the lowercase a-z character distribution.
fn char_entropy_bits(text: &str) -> f64 {
    let mut hist = [0usize; 26];
    let mut total = 0usize;
    for ch in text.chars().flat_map(|c| c.to_lowercase()) {
        if ch.is_ascii_lowercase() {
            hist[(ch as u8 - b'a') as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &count in &hist {
        if count > 0 {
            let p = count as f64 / total as f64;
            h -= p * p.log2();
        }
    }
    h
}

/// First banned word appearing in the text by position, if any.
fn first_banned<'a>(text: &str, banned: &'a [String]) -> Option<&'a str> {
    let lowered = text.to_lowercase();
    let mut best: Option<(usize, &str)> = None;
    for word in banned {
        let needle = word.to_lowercase();
        let mut start = 0;
        while let Some(rel) = lowered[start..].find(&needle) {
            let pos = start + rel;
            let end = pos + needle.len();
            let left_ok =
                pos == 0 || !lowered[..pos].chars().next_back().unwrap().is_alphanumeric();
            let right_ok =
                end == lowered.len() || !lowered[end..].chars().next().unwrap().is_alphanumeric();
            if left_ok && right_ok {
                if best.is_none_or(|(bpos, _)| pos < bpos) {
                    best = Some((pos, word.as_str()));
                }
                break;
            }
            start = pos + 1;
        }
    }
    best.map(|(_, w)| w)
}

/// Applies the filters in a fixed order (length, entropy, banned words) and
/// rewrites every entry's verdict; idempotent by construction.
pub fn refine_captions(mut rec: CaptionRecord, config: &RefineConfig) -> CaptionRecord {
    for entry in &mut rec.captions {
        let words = entry.text.split_whitespace().count();
        let verdict = if words < config.min_words {
            Err(format!("too short: {words} words < {}", config.min_words))
        } else if words > config.max_words {
            Err(format!("too long: {words} words > {}", config.max_words))
        } else {
            let h = char_entropy_bits(&entry.text);
            if h < config.min_entropy_bits {
                Err(format!("low character entropy: {h:.2} bits < {}", config.min_entropy_bits))
            } else if let Some(word) = first_banned(&entry.text, &config.banned) {
                Err(format!("banned word {word:?}"))
            } else {
                Ok(())
            }
        };
        match verdict {
            Ok(()) => {
                entry.accepted = true;
                entry.reject_reason = None;
            }
            Err(reason) => {
                entry.accepted = false;
                entry.reject_reason = Some(reason);
            }
        }
    }
    rec
}
