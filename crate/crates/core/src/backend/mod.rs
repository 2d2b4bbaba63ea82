//! Uniform contracts for every external model the pipeline talks to.
//!
//! Each model family sits behind one trait: [`LanguageModel`] for text and
//! multimodal completion, [`Embedder`] for image/text embeddings,
//! [`SceneGenerator`] for outpainting around a fixed product, and
//! [`AestheticScorer`] for the learned aesthetic predictor. Deterministic
//! mocks live in [`mock`], remote JSON-over-HTTP clients in [`http`].

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Mask, Raster};

pub mod http;
pub mod mock;
mod schema;
mod structured;

pub use schema::{FieldKind, SchemaId};
pub use structured::{extract_json, StructuredLlm, DEFAULT_RETRY_BUDGET};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendErrorKind {
    Timeout,
    MalformedResponse,
    ServiceUnavailable,
    SchemaViolation,
}

impl fmt::Display for BackendErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Timeout => "timeout",
            Self::MalformedResponse => "malformed_response",
            Self::ServiceUnavailable => "service_unavailable",
            Self::SchemaViolation => "schema_violation",
        })
    }
}

/// Failure reported by a model backend. Schema violations are never retryable.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{kind}: {detail}")]
pub struct BackendError {
    kind: BackendErrorKind,
    detail: String,
    retryable: bool,
}

impl BackendError {
    pub fn new(kind: BackendErrorKind, detail: impl Into<String>, retryable: bool) -> Self {
        Self {
            kind,
            detail: detail.into(),
            retryable: retryable && kind != BackendErrorKind::SchemaViolation,
        }
    }

    pub fn timeout(detail: impl Into<String>) -> Self {
        Self::new(BackendErrorKind::Timeout, detail, true)
    }

    pub fn malformed(detail: impl Into<String>) -> Self {
        Self::new(BackendErrorKind::MalformedResponse, detail, true)
    }

    pub fn unavailable(detail: impl Into<String>) -> Self {
        Self::new(BackendErrorKind::ServiceUnavailable, detail, true)
    }

    pub fn schema_violation(detail: impl Into<String>) -> Self {
        Self::new(BackendErrorKind::SchemaViolation, detail, false)
    }

    pub fn kind(&self) -> BackendErrorKind {
        self.kind
    }

    pub fn detail(&self) -> &str {
        &self.detail
    }

    pub fn retryable(&self) -> bool {
        self.retryable
    }
}

/// One structured-output request to a (possibly multimodal) language model.
#[derive(Debug, Clone)]
pub struct TextCompletionRequest {
    pub system_instructions: String,
    pub user_content: String,
    pub attached_images: Vec<Raster>,
    pub expected_schema: SchemaId,
}

impl TextCompletionRequest {
    pub fn new(
        system_instructions: impl Into<String>,
        user_content: impl Into<String>,
        expected_schema: SchemaId,
    ) -> Result<Self, BackendError> {
        let user_content = user_content.into();
        if user_content.trim().is_empty() {
            return Err(BackendError::new(
                BackendErrorKind::MalformedResponse,
                "completion request has empty user content",
                false,
            ));
        }
        Ok(Self {
            system_instructions: system_instructions.into(),
            user_content,
            attached_images: Vec::new(),
            expected_schema,
        })
    }

    pub fn with_image(mut self, image: Raster) -> Self {
        self.attached_images.push(image);
        self
    }
}

/// Dense embedding tagged with the model that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    model_tag: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, model_tag: impl Into<String>) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::malformed("embedding has zero dimension"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::malformed("embedding contains non-finite values"));
        }
        Ok(Self {
            values,
            model_tag: model_tag.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Same vector with each component rounded through `f32`, the precision
    /// used on disk by the asset store.
    pub fn quantized(&self) -> Self {
        Self {
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
            model_tag: self.model_tag.clone(),
        }
    }

    /// Cosine similarity. Vectors from different models or of different
    /// dimension are not comparable.
    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64, EmbeddingMismatch> {
        if self.model_tag != other.model_tag {
            return Err(EmbeddingMismatch::ModelTag(
                self.model_tag.clone(),
                other.model_tag.clone(),
            ));
        }
        if self.dimension() != other.dimension() {
            return Err(EmbeddingMismatch::Dimension(
                self.dimension(),
                other.dimension(),
            ));
        }
        Ok(cosine(&self.values, &other.values))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmbeddingMismatch {
    #[error("embedding model tags differ: {0} vs {1}")]
    ModelTag(String, String),
    #[error("embedding dimensions differ: {0} vs {1}")]
    Dimension(usize, usize),
}

/// Plain cosine similarity; zero vectors compare as 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Product-on-canvas composition handed to a scene generator.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub composed_canvas: Raster,
    pub product_mask: Mask,
    pub caption: String,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn new(
        composed_canvas: Raster,
        product_mask: Mask,
        caption: impl Into<String>,
        seed: u64,
    ) -> Result<Self, BackendError> {
        if composed_canvas.dimensions() != product_mask.dimensions() {
            return Err(BackendError::new(
                BackendErrorKind::MalformedResponse,
                format!(
                    "mask {:?} does not match canvas {:?}",
                    product_mask.dimensions(),
                    composed_canvas.dimensions()
                ),
                false,
            ));
        }
        Ok(Self {
            composed_canvas,
            product_mask,
            caption: caption.into(),
            seed,
        })
    }
}

/// Output of a scene generator: the image plus any notes the backend
/// attached (mock generators use these to plant known defects).
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub raster: Raster,
    pub notes: Vec<String>,
}

pub trait LanguageModel: Send + Sync {
    fn name(&self) -> &str;

    /// Raw model reply. Parsing and schema validation happen in
    /// [`StructuredLlm`].
    fn complete_raw(&self, request: &TextCompletionRequest) -> Result<String, BackendError>;
}

pub trait Embedder: Send + Sync {
    fn model_tag(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError>;
    fn embed_image(&self, image: &Raster) -> Result<EmbeddingVector, BackendError>;
}

pub trait SceneGenerator: Send + Sync {
    fn name(&self) -> &str;
    fn generate_scene(&self, request: &GenerationRequest) -> Result<GeneratedScene, BackendError>;
}

/// Learned aesthetic predictor on a 0..=10 scale.
pub trait AestheticScorer: Send + Sync {
    fn score(&self, image: &Raster) -> Result<f64, BackendError>;
}

/// Backend handles for one pipeline instance.
#[derive(Clone)]
pub struct Backends {
    pub decomposer: StructuredLlm,
    pub validator: StructuredLlm,
    pub captioner: StructuredLlm,
    pub advisor: StructuredLlm,
    pub rubric: StructuredLlm,
    pub embedder: Arc<dyn Embedder>,
    pub generator: Arc<dyn SceneGenerator>,
    pub aesthetic: Arc<dyn AestheticScorer>,
}

impl Backends {
    /// All roles bound to the same language model.
    pub fn uniform(
        llm: StructuredLlm,
        embedder: Arc<dyn Embedder>,
        generator: Arc<dyn SceneGenerator>,
        aesthetic: Arc<dyn AestheticScorer>,
    ) -> Self {
        Self {
            decomposer: llm.clone(),
            validator: llm.clone(),
            captioner: llm.clone(),
            advisor: llm.clone(),
            rubric: llm,
            embedder,
            generator,
            aesthetic,
        }
    }

    /// Deterministic mocks with default settings.
    pub fn mock() -> Self {
        Self::uniform(
            StructuredLlm::new(Arc::new(mock::MockLanguageModel::default())),
            Arc::new(mock::MockEmbedder::default()),
            Arc::new(mock::MockSceneGenerator::default()),
            Arc::new(mock::MockAestheticScorer::default()),
        )
    }
}
