//! Remote backends speaking JSON over HTTP.
//!
//! Wire format (all requests are `POST` with a JSON body; images travel as
//! base64-encoded PNG):
//!
//! | backend   | path     | request body                                                        | response body                          |
//! |-----------|----------|---------------------------------------------------------------------|----------------------------------------|
//! | llm       | `/`      | `{system, user, images: [png_b64], schema, schema_format}`          | `{output: string \| object}`           |
//! | embed     | `/text`  | `{text}`                                                            | `{embedding: [f64], model}`            |
//! | embed     | `/image` | `{image}`                                                           | `{embedding: [f64], model}`            |
//! | generate  | `/`      | `{canvas, mask, caption, seed}`                                     | `{image, notes?: [string]}`            |
//! | aesthetic | `/`      | `{image}`                                                           | `{score}`                              |

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    AestheticScorer, BackendError, BackendErrorKind, Embedder, EmbeddingVector, GeneratedScene,
    GenerationRequest, LanguageModel, SceneGenerator, TextCompletionRequest,
};
use crate::raster::{Mask, Raster};

/// Connection settings for one remote backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpOptions {
    pub url: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_max_in_flight() -> usize {
    4
}

/// Sends one JSON request and returns the raw response body.
pub trait Transport: Send + Sync {
    fn post_json(&self, path: &str, body: &Value) -> Result<String, BackendError>;
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimiter {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimiter {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        InFlightGuard { limiter: self }
    }

    pub fn active(&self) -> usize {
        *self.active.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct InFlightGuard<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.limiter.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Blocking reqwest transport with bearer auth and an in-flight limit.
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    limiter: InFlightLimiter,
}

impl ReqwestTransport {
    pub fn new(options: &HttpOptions) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(options.timeout_ms))
            .build()
            .map_err(|e| BackendError::new(BackendErrorKind::ServiceUnavailable, e.to_string(), false))?;
        let api_key = match &options.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::new(
                    BackendErrorKind::ServiceUnavailable,
                    format!("environment variable {var} is not set"),
                    false,
                )
            })?),
            None => None,
        };
        Ok(Self {
            client,
            base_url: options.url.trim_end_matches('/').to_string(),
            api_key,
            limiter: InFlightLimiter::new(options.max_in_flight),
        })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(&self, path: &str, body: &Value) -> Result<String, BackendError> {
        let _slot = self.limiter.acquire();
        let url = format!("{}{}", self.base_url, path);
        let mut req = self.client.post(&url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::timeout(format!("{url}: {e}"))
            } else {
                BackendError::unavailable(format!("{url}: {e}"))
            }
        })?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| BackendError::malformed(format!("{url}: unreadable body: {e}")))?;
        if status.is_success() {
            Ok(text)
        } else {
            let retryable = status.is_server_error() || status.as_u16() == 429;
            Err(BackendError::new(
                BackendErrorKind::ServiceUnavailable,
                format!("{url}: HTTP {status}: {text}"),
                retryable,
            ))
        }
    }
}

fn png_b64(image: &Raster) -> Result<String, BackendError> {
    image
        .encode_png()
        .map(|png| BASE64.encode(png))
        .map_err(|e| BackendError::malformed(format!("png encode failed: {e}")))
}

fn mask_b64(mask: &Mask) -> Result<String, BackendError> {
    mask.encode_png()
        .map(|png| BASE64.encode(png))
        .map_err(|e| BackendError::malformed(format!("png encode failed: {e}")))
}

fn decode_png_b64(text: &str) -> Result<Raster, BackendError> {
    let bytes = BASE64
        .decode(text)
        .map_err(|e| BackendError::malformed(format!("bad base64 image: {e}")))?;
    Raster::decode(&bytes).map_err(|e| BackendError::malformed(format!("bad image: {e}")))
}

fn parse_body(body: &str) -> Result<Value, BackendError> {
    serde_json::from_str(body).map_err(|e| BackendError::malformed(format!("response is not JSON: {e}")))
}

pub struct HttpLanguageModel<T> {
    name: String,
    transport: T,
}

impl<T: Transport> HttpLanguageModel<T> {
    pub fn new(name: impl Into<String>, transport: T) -> Self {
        Self {
            name: name.into(),
            transport,
        }
    }
}

impl<T: Transport> LanguageModel for HttpLanguageModel<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete_raw(&self, request: &TextCompletionRequest) -> Result<String, BackendError> {
        let images = request
            .attached_images
            .iter()
            .map(png_b64)
            .collect::<Result<Vec<_>, _>>()?;
        let body = json!({
            "system": request.system_instructions,
            "user": request.user_content,
            "images": images,
            "schema": request.expected_schema.as_str(),
            "schema_format": request.expected_schema.describe(),
        });
        let raw = self.transport.post_json("/", &body)?;
        // The structured layer validates; here we only unwrap the envelope.
        Ok(match serde_json::from_str::<Value>(&raw) {
            Ok(Value::Object(mut obj)) => match obj.remove("output") {
                Some(Value::String(s)) => s,
                Some(other) => other.to_string(),
                None => Value::Object(obj).to_string(),
            },
            _ => raw,
        })
    }
}

pub struct HttpEmbedder<T> {
    transport: T,
    model_tag: String,
    dimension: usize,
}

impl<T: Transport> HttpEmbedder<T> {
    pub fn new(transport: T, model_tag: impl Into<String>, dimension: usize) -> Self {
        Self {
            transport,
            model_tag: model_tag.into(),
            dimension,
        }
    }

    fn read(&self, raw: &str) -> Result<EmbeddingVector, BackendError> {
        let body = parse_body(raw)?;
        let values: Vec<f64> = body
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::malformed("missing `embedding` array"))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| BackendError::malformed("non-numeric embedding entry")))
            .collect::<Result<_, _>>()?;
        if values.len() != self.dimension {
            return Err(BackendError::malformed(format!(
                "embedding has dimension {}, expected {}",
                values.len(),
                self.dimension
            )));
        }
        if let Some(model) = body.get("model").and_then(Value::as_str) {
            if model != self.model_tag {
                return Err(BackendError::malformed(format!(
                    "embedding model `{model}` does not match configured `{}`",
                    self.model_tag
                )));
            }
        }
        EmbeddingVector::new(values, self.model_tag.clone())
    }
}

impl<T: Transport> Embedder for HttpEmbedder<T> {
    fn model_tag(&self) -> &str {
        &self.model_tag
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        self.read(&self.transport.post_json("/text", &json!({ "text": text }))?)
    }

    fn embed_image(&self, image: &Raster) -> Result<EmbeddingVector, BackendError> {
        self.read(&self.transport.post_json("/image", &json!({ "image": png_b64(image)? }))?)
    }
}

pub struct HttpSceneGenerator<T> {
    name: String,
    transport: T,
}

impl<T: Transport> HttpSceneGenerator<T> {
    pub fn new(name: impl Into<String>, transport: T) -> Self {
        Self {
            name: name.into(),
            transport,
        }
    }
}

impl<T: Transport> SceneGenerator for HttpSceneGenerator<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate_scene(&self, request: &GenerationRequest) -> Result<GeneratedScene, BackendError> {
        let body = json!({
            "canvas": png_b64(&request.composed_canvas)?,
            "mask": mask_b64(&request.product_mask)?,
            "caption": request.caption,
            "seed": request.seed,
        });
        let reply = parse_body(&self.transport.post_json("/", &body)?)?;
        let image = reply
            .get("image")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::malformed("missing `image`"))?;
        let raster = decode_png_b64(image)?;
        if raster.dimensions() != request.composed_canvas.dimensions() {
            return Err(BackendError::malformed(format!(
                "generated image is {:?}, expected {:?}",
                raster.dimensions(),
                request.composed_canvas.dimensions()
            )));
        }
        let notes = reply
            .get("notes")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
            .unwrap_or_default();
        Ok(GeneratedScene { raster, notes })
    }
}

pub struct HttpAestheticScorer<T> {
    transport: T,
}

impl<T: Transport> HttpAestheticScorer<T> {
    pub fn new(transport: T) -> Self {
        Self { transport }
    }
}

impl<T: Transport> AestheticScorer for HttpAestheticScorer<T> {
    fn score(&self, image: &Raster) -> Result<f64, BackendError> {
        let reply = parse_body(&self.transport.post_json("/", &json!({ "image": png_b64(image)? }))?)?;
        reply
            .get("score")
            .and_then(Value::as_f64)
            .filter(|s| s.is_finite())
            .ok_or_else(|| BackendError::malformed("missing numeric `score`"))
    }
}
