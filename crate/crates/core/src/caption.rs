//! Scene caption for generation and composition planning.

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::backend::{SchemaId, StructuredLlm, TextCompletionRequest};
use crate::decompose::MarketingBrief;
use crate::prompts::{self, label};
use crate::raster::content_hash;
use crate::store::Asset;

pub const DEFAULT_MAX_WORDS: usize = 77;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneCaption {
    pub text: String,
    pub derived_from_background: bool,
    /// Digest of the brief the caption was written for.
    pub brief_ref: String,
    /// True when the backend failed and the template was used.
    #[serde(default)]
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Short digest identifying a brief.
pub fn brief_ref(brief: &MarketingBrief) -> String {
    let json = serde_json::to_string(brief).expect("brief serializes");
    content_hash(json.as_bytes())[..12].to_string()
}

/// Caption assembled from the brief alone; empty parts are left out.
pub fn template_caption(brief: &MarketingBrief) -> String {
    let mut text = brief.primary_product.trim().to_string();
    let background = brief.background_elements.trim();
    if !background.is_empty() {
        text.push_str(&format!(" placed in {background}"));
    }
    let theme = brief.theme.trim();
    if !theme.is_empty() {
        text.push_str(&format!(", {theme} atmosphere"));
    }
    text.push_str(", professional marketing photo");
    text
}

fn mentions(text: &str, product: &str) -> bool {
    text.to_lowercase().contains(&product.trim().to_lowercase())
}

fn truncate_words(text: &str, max_words: usize) -> (String, bool) {
    let words: Vec<&str> = text.split_whitespace().collect();
    let cut = words.len() > max_words;
    (words[..words.len().min(max_words)].join(" "), cut)
}

fn request(brief: &MarketingBrief, background: Option<&Asset>) -> Option<TextCompletionRequest> {
    let mut lines = vec![
        prompts::field(label::PRIMARY_PRODUCT, &brief.primary_product),
        prompts::field(label::BACKGROUND_ELEMENTS, &brief.background_elements),
        prompts::field(label::THEME, &brief.theme),
    ];
    if let Some(bg) = background {
        lines.push(prompts::field(label::REFERENCE_BACKGROUND, &bg.label));
    }
    lines.push(prompts::field(label::OUTPUT_FORMAT, SchemaId::Caption.describe()));
    let req = TextCompletionRequest::new(prompts::CAPTION_SYSTEM, lines.join("\n"), SchemaId::Caption).ok()?;
    Some(match background {
        Some(bg) => req.with_image(bg.raster.clone()),
        None => req,
    })
}

/// Writes the generation caption. Never fails: backend errors and unusable
/// replies fall back to [`template_caption`] with `fallback` set.
pub fn generate_caption(
    llm: &StructuredLlm,
    brief: &MarketingBrief,
    background: Option<&Asset>,
    max_words: usize,
) -> SceneCaption {
    let max_words = max_words.max(1);
    let mut warnings = Vec::new();
    let reply = request(brief, background)
        .ok_or_else(|| "empty caption request".to_string())
        .and_then(|req| llm.complete(&req).map_err(|e| e.to_string()))
        .and_then(|v| {
            let text = v["caption"].as_str().unwrap_or_default().trim().to_string();
            let (text, cut) = truncate_words(&text, max_words);
            if cut {
                warnings.push(format!("caption truncated to {max_words} words"));
            }
            if text.is_empty() {
                Err("caption is empty".to_string())
            } else if !mentions(&text, &brief.primary_product) {
                Err(format!("caption does not mention {:?}", brief.primary_product))
            } else {
                Ok(text)
            }
        });

    match reply {
        Ok(text) => SceneCaption {
            text,
            derived_from_background: background.is_some(),
            brief_ref: brief_ref(brief),
            fallback: false,
            warnings,
        },
        Err(reason) => {
            warn!(%reason, "caption backend unusable, using template");
            warnings.push(format!("template caption used: {reason}"));
            SceneCaption {
                text: truncate_words(&template_caption(brief), max_words).0,
                derived_from_background: false,
                brief_ref: brief_ref(brief),
                fallback: true,
                warnings,
            }
        }
    }
}
