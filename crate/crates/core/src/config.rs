//! Pipeline configuration, loaded from TOML.
//!
//! Every section is optional; omitted keys take the documented defaults.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::http::{
    HttpAestheticScorer, HttpEmbedder, HttpLanguageModel, HttpOptions, HttpSceneGenerator,
    ReqwestTransport,
};
use crate::backend::mock::{
    MockAestheticScorer, MockEmbedder, MockGeneratorOptions, MockLanguageModel,
    MockSceneGenerator, ValidatorPolicy, MOCK_AESTHETIC_HALF_POINT, MOCK_EMBED_DIMENSION,
};
use crate::backend::{
    AestheticScorer, Backends, Embedder, LanguageModel, SceneGenerator, StructuredLlm,
    DEFAULT_RETRY_BUDGET,
};
use crate::caption::DEFAULT_MAX_WORDS;
use crate::composition::{PlanConfig, Slot};
use crate::error::{PipelineError, Result};
use crate::quality::SelectionPolicy;
use crate::store::{DEFAULT_BACKGROUND_K, DEFAULT_PRODUCT_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LlmBinding {
    Mock {
        #[serde(default)]
        validator: ValidatorPolicy,
    },
    Http {
        #[serde(flatten)]
        http: HttpOptions,
        #[serde(default = "default_model_name")]
        model: String,
    },
}

fn default_model_name() -> String {
    "remote-llm".into()
}

impl Default for LlmBinding {
    fn default() -> Self {
        Self::Mock { validator: ValidatorPolicy::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedBinding {
    Mock {
        #[serde(default = "default_mock_dimension")]
        dimension: usize,
    },
    Http {
        #[serde(flatten)]
        http: HttpOptions,
        model_tag: String,
        dimension: usize,
    },
}

fn default_mock_dimension() -> usize {
    MOCK_EMBED_DIMENSION
}

impl Default for EmbedBinding {
    fn default() -> Self {
        Self::Mock { dimension: MOCK_EMBED_DIMENSION }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GenerateBinding {
    Mock(MockGeneratorOptions),
    Http {
        #[serde(flatten)]
        http: HttpOptions,
        #[serde(default = "default_generator_name")]
        model: String,
    },
}

fn default_generator_name() -> String {
    "remote-generator".into()
}

impl Default for GenerateBinding {
    fn default() -> Self {
        Self::Mock(MockGeneratorOptions::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AestheticBinding {
    Mock {
        #[serde(default = "default_half_point")]
        half_point: f64,
    },
    Http {
        #[serde(flatten)]
        http: HttpOptions,
    },
}

fn default_half_point() -> f64 {
    MOCK_AESTHETIC_HALF_POINT
}

impl Default for AestheticBinding {
    fn default() -> Self {
        Self::Mock { half_point: MOCK_AESTHETIC_HALF_POINT }
    }
}

/// Optional per-role language model overrides; unset roles use `llm`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmRoles {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decomposer: Option<LlmBinding>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validator: Option<LlmBinding>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub captioner: Option<LlmBinding>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub advisor: Option<LlmBinding>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rubric: Option<LlmBinding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub llm: LlmBinding,
    pub roles: LlmRoles,
    /// Attempts per structured completion, including the first.
    pub retry_budget: u32,
    pub embed: EmbedBinding,
    pub generate: GenerateBinding,
    pub aesthetic: AestheticBinding,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            llm: LlmBinding::default(),
            roles: LlmRoles::default(),
            retry_budget: DEFAULT_RETRY_BUDGET,
            embed: EmbedBinding::default(),
            generate: GenerateBinding::default(),
            aesthetic: AestheticBinding::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    pub path: PathBuf,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self { path: PathBuf::from("assets.cpst") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub product_threshold: f64,
    pub background_k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            product_threshold: DEFAULT_PRODUCT_THRESHOLD,
            background_k: DEFAULT_BACKGROUND_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionConfig {
    pub max_words: usize,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        Self { max_words: DEFAULT_MAX_WORDS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub seeds_per_variant: u32,
    pub max_in_flight: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { seeds_per_variant: 1, max_in_flight: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Variant used as the unfiltered baseline when evaluating a run.
    pub baseline_slot: Slot,
    pub baseline_rotation_deg: u32,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { baseline_slot: Slot::Center, baseline_rotation_deg: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub runs_dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { runs_dir: PathBuf::from("runs") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run_seed: u64,
    pub backend: BackendConfig,
    pub store: StoreConfig,
    pub retrieval: RetrievalConfig,
    pub caption: CaptionConfig,
    pub plan: PlanConfig,
    pub generate: GenerateConfig,
    pub quality: SelectionPolicy,
    pub evaluation: EvaluationConfig,
    pub output: OutputConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            run_seed: 0,
            backend: BackendConfig::default(),
            store: StoreConfig::default(),
            retrieval: RetrievalConfig::default(),
            caption: CaptionConfig::default(),
            plan: PlanConfig::default(),
            generate: GenerateConfig::default(),
            quality: SelectionPolicy::default(),
            evaluation: EvaluationConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

fn check_http(http: &HttpOptions, what: &str) -> Result<()> {
    if !(http.url.starts_with("http://") || http.url.starts_with("https://")) {
        return Err(config_err(format!("{what}: url must start with http:// or https://")));
    }
    if http.timeout_ms == 0 || http.max_in_flight == 0 {
        return Err(config_err(format!("{what}: timeout_ms and max_in_flight must be positive")));
    }
    Ok(())
}

fn check_llm(binding: &LlmBinding, what: &str) -> Result<()> {
    match binding {
        LlmBinding::Mock { .. } => Ok(()),
        LlmBinding::Http { http, .. } => check_http(http, what),
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`; relative store and output paths are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut config = Self::from_toml_str(&text)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            if config.store.path.is_relative() {
                config.store.path = dir.join(&config.store.path);
            }
            if config.output.runs_dir.is_relative() {
                config.output.runs_dir = dir.join(&config.output.runs_dir);
            }
        }
        Ok(config)
    }

    /// Copy with machine-local paths cleared, so equal settings compare
    /// equal across working directories.
    pub fn portable(&self) -> Self {
        let mut c = self.clone();
        c.store.path = PathBuf::new();
        c.output.runs_dir = PathBuf::new();
        c
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backend;
        check_llm(&b.llm, "backend.llm")?;
        for (name, role) in [
            ("decomposer", &b.roles.decomposer),
            ("validator", &b.roles.validator),
            ("captioner", &b.roles.captioner),
            ("advisor", &b.roles.advisor),
            ("rubric", &b.roles.rubric),
        ] {
            if let Some(r) = role {
                check_llm(r, &format!("backend.roles.{name}"))?;
            }
        }
        if b.retry_budget == 0 {
            return Err(config_err("backend.retry_budget must be at least 1"));
        }
        match &b.embed {
            EmbedBinding::Mock { dimension } if *dimension == 0 => {
                return Err(config_err("backend.embed.dimension must be positive"))
            }
            EmbedBinding::Http { http, dimension, model_tag } => {
                check_http(http, "backend.embed")?;
                if *dimension == 0 || model_tag.is_empty() {
                    return Err(config_err("backend.embed needs a model_tag and a positive dimension"));
                }
            }
            _ => {}
        }
        match &b.generate {
            GenerateBinding::Mock(o) => {
                let unit = |v: f64| (0.0..=1.0).contains(&v);
                if !(unit(o.defect_rate) && unit(o.fail_rate) && o.perturb_product >= 0.0) {
                    return Err(config_err("backend.generate: rates must lie in [0, 1], perturb_product ≥ 0"));
                }
            }
            GenerateBinding::Http { http, .. } => check_http(http, "backend.generate")?,
        }
        match &b.aesthetic {
            AestheticBinding::Mock { half_point } if *half_point <= 0.0 => {
                return Err(config_err("backend.aesthetic.half_point must be positive"))
            }
            AestheticBinding::Http { http } => check_http(http, "backend.aesthetic")?,
            _ => {}
        }
        if !(-1.0..=1.0).contains(&self.retrieval.product_threshold) {
            return Err(config_err("retrieval.product_threshold must lie in [-1, 1]"));
        }
        if self.retrieval.background_k == 0 {
            return Err(config_err("retrieval.background_k must be positive"));
        }
        if self.caption.max_words == 0 {
            return Err(config_err("caption.max_words must be positive"));
        }
        self.plan.validate()?;
        if self.generate.seeds_per_variant == 0 || self.generate.max_in_flight == 0 {
            return Err(config_err("generate.seeds_per_variant and generate.max_in_flight must be positive"));
        }
        self.quality.validate()?;
        if !self.plan.slots.contains(&self.evaluation.baseline_slot)
            || !self.plan.rotations_deg.contains(&self.evaluation.baseline_rotation_deg)
        {
            return Err(config_err("evaluation baseline variant is not part of the plan"));
        }
        Ok(())
    }

    /// Instantiates the configured backends.
    pub fn build_backends(&self) -> Result<Backends> {
        let b = &self.backend;
        let llm = |binding: &Option<LlmBinding>| -> Result<StructuredLlm> {
            let binding = binding.as_ref().unwrap_or(&b.llm);
            let model: Arc<dyn LanguageModel> = match binding {
                LlmBinding::Mock { validator } => Arc::new(MockLanguageModel::new(*validator)),
                LlmBinding::Http { http, model } => {
                    Arc::new(HttpLanguageModel::new(model.clone(), ReqwestTransport::new(http)?))
                }
            };
            Ok(StructuredLlm::with_retry_budget(model, b.retry_budget))
        };
        let embedder: Arc<dyn Embedder> = match &b.embed {
            EmbedBinding::Mock { dimension } => Arc::new(MockEmbedder::new(*dimension)),
            EmbedBinding::Http { http, model_tag, dimension } => {
                Arc::new(HttpEmbedder::new(ReqwestTransport::new(http)?, model_tag.clone(), *dimension))
            }
        };
        let generator: Arc<dyn SceneGenerator> = match &b.generate {
            GenerateBinding::Mock(o) => Arc::new(MockSceneGenerator::new(o.clone())),
            GenerateBinding::Http { http, model } => {
                Arc::new(HttpSceneGenerator::new(model.clone(), ReqwestTransport::new(http)?))
            }
        };
        let aesthetic: Arc<dyn AestheticScorer> = match &b.aesthetic {
            AestheticBinding::Mock { half_point } => Arc::new(MockAestheticScorer { half_point: *half_point }),
            AestheticBinding::Http { http } => Arc::new(HttpAestheticScorer::new(ReqwestTransport::new(http)?)),
        };
        Ok(Backends {
            decomposer: llm(&b.roles.decomposer)?,
            validator: llm(&b.roles.validator)?,
            captioner: llm(&b.roles.captioner)?,
            advisor: llm(&b.roles.advisor)?,
            rubric: llm(&b.roles.rubric)?,
            embedder,
            generator,
            aesthetic,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quality::SelectionMode;

    #[test]
    fn empty_document_gives_defaults() {
        let c = PipelineConfig::from_toml_str("").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.retrieval.product_threshold, 0.39);
        assert_eq!(c.plan.rotations_deg, vec![0, 15, 345]);
        assert_eq!(c.quality.k, 4);
    }

    #[test]
    fn full_document_round_trips() {
        let text = r#"
run_seed = 42

[backend]
retry_budget = 2

[backend.llm]
kind = "mock"
validator = "accept_all"

[backend.roles.rubric]
kind = "http"
url = "http://localhost:9000/rubric"
api_key_env = "RUBRIC_KEY"

[backend.embed]
kind = "mock"
dimension = 32

[backend.generate]
kind = "mock"
perturb_product = 0.1
forced_notes = ["duplicate"]

[backend.aesthetic]
kind = "mock"
half_point = 2.0

[plan]
canvas_width = 512
canvas_height = 384
slots = ["left", "center"]
rotations_deg = [0, 15]

[quality]
mode = "strict_gate"
patterns = [[1, 1, 1, 1]]
k = 2
"#;
        let c = PipelineConfig::from_toml_str(text).unwrap();
        assert_eq!(c.run_seed, 42);
        assert_eq!(c.backend.llm, LlmBinding::Mock { validator: ValidatorPolicy::AcceptAll });
        assert!(matches!(c.backend.roles.rubric, Some(LlmBinding::Http { .. })));
        assert_eq!(c.quality.mode, SelectionMode::StrictGate);
        assert_eq!(c.plan.slots, vec![Slot::Left, Slot::Center]);
        let again = PipelineConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml_str("[plan]\ncanvas = 3").is_err());
        assert!(PipelineConfig::from_toml_str("[backend.llm]\nkind = \"magic\"").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(PipelineConfig::from_toml_str("[quality]\nalpha = 0.0\nbeta = 0.0").is_err());
        assert!(PipelineConfig::from_toml_str("[plan]\nrotations_deg = [400]").is_err());
        assert!(PipelineConfig::from_toml_str("[backend.embed]\nkind = \"http\"\nurl = \"ftp://x\"\nmodel_tag = \"m\"\ndimension = 3").is_err());
        assert!(PipelineConfig::from_toml_str("[evaluation]\nbaseline_rotation_deg = 90").is_err());
    }

    #[test]
    fn mock_backends_build() {
        let b = PipelineConfig::default().build_backends().unwrap();
        assert_eq!(b.embedder.dimension(), MOCK_EMBED_DIMENSION);
        assert_eq!(b.rubric.backend_name(), "mock-llm");
    }
}
