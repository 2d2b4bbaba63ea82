//! Marketing prompt → structured brief.

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::backend::{SchemaId, StructuredLlm, TextCompletionRequest};
use crate::error::{PipelineError, Result};
use crate::prompts::{self, label};

/// Structured reading of a marketing prompt.
///
/// Empty `background_elements` means no background retrieval is attempted;
/// empty `theme` means no theme constraint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarketingBrief {
    pub primary_product: String,
    pub background_elements: String,
    pub theme: String,
    pub source_prompt: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MarketingBrief {
    /// Text used to query background assets.
    pub fn background_query(&self) -> String {
        [self.background_elements.trim(), self.theme.trim()]
            .iter()
            .filter(|s| !s.is_empty())
            .copied()
            .collect::<Vec<_>>()
            .join(", ")
    }
}

fn request_for(prompt: &str) -> Result<TextCompletionRequest> {
    let single_line = prompt.split_whitespace().collect::<Vec<_>>().join(" ");
    let user = format!(
        "{}\n{}\n{}",
        prompts::DECOMPOSE_FEW_SHOT,
        prompts::field(label::PROMPT, single_line),
        prompts::field(label::OUTPUT_FORMAT, SchemaId::Brief.describe()),
    );
    Ok(TextCompletionRequest::new(
        prompts::DECOMPOSE_SYSTEM,
        user,
        SchemaId::Brief,
    )?)
}

/// Decomposes `prompt` with the language model.
///
/// Only one product is supported: when the model reports further products the
/// first is kept and a warning is recorded on the brief.
pub fn decompose(llm: &StructuredLlm, prompt: &str) -> Result<MarketingBrief> {
    if prompt.trim().is_empty() {
        return Err(PipelineError::invalid("prompt is empty"));
    }
    let value = llm.complete(&request_for(prompt)?)?;
    let text = |key: &str| value[key].as_str().unwrap_or_default().trim().to_string();

    let product = text("product");
    if product.is_empty() {
        return Err(PipelineError::invalid(format!(
            "no primary product found in prompt {prompt:?}"
        )));
    }
    let mut warnings = Vec::new();
    let others = text("other_products");
    if !others.is_empty() {
        let msg = format!("prompt names several products; using {product:?}, ignoring {others:?}");
        warn!("{msg}");
        warnings.push(msg);
    }
    Ok(MarketingBrief {
        primary_product: product,
        background_elements: text("background"),
        theme: text("theme"),
        source_prompt: prompt.to_string(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::backend::mock::MockLanguageModel;

    fn mock() -> StructuredLlm {
        StructuredLlm::new(Arc::new(MockLanguageModel::default()))
    }

    #[test]
    fn reference_prompt() {
        let b = decompose(&mock(), "Shoe on the floor on an urban street at sunset").unwrap();
        assert_eq!(b.primary_product, "shoe");
        assert_eq!(b.background_elements, "floor, urban street");
        assert_eq!(b.theme, "sunset");
        assert_eq!(b.source_prompt, "Shoe on the floor on an urban street at sunset");
        assert!(b.warnings.is_empty());
    }

    #[test]
    fn single_token_prompt() {
        let b = decompose(&mock(), "mug").unwrap();
        assert_eq!(b.primary_product, "mug");
        assert_eq!(b.background_elements, "");
        assert_eq!(b.theme, "");
        assert_eq!(b.background_query(), "");
    }

    #[test]
    fn empty_prompt_is_an_input_error() {
        assert!(matches!(decompose(&mock(), "   \n"), Err(PipelineError::InvalidInput(_))));
    }

    #[test]
    fn prompt_without_product_is_rejected() {
        assert!(matches!(decompose(&mock(), "on the beach"), Err(PipelineError::InvalidInput(_))));
    }

    #[test]
    fn two_products_keep_first_with_warning() {
        let b = decompose(&mock(), "Watch and wallet on a walnut desk").unwrap();
        assert_eq!(b.primary_product, "watch");
        assert_eq!(b.warnings.len(), 1);
        assert!(b.warnings[0].contains("wallet"));
    }

    #[test]
    fn source_prompt_is_verbatim() {
        let prompt = "  Red   mug\non a table ";
        let b = decompose(&mock(), prompt).unwrap();
        assert_eq!(b.source_prompt, prompt);
        assert_eq!(b.primary_product, "red mug");
    }

    proptest! {
        #[test]
        fn idempotent_and_serde_lossless(words in proptest::collection::vec("[a-z]{1,8}", 1..8)) {
            let prompt = words.join(" ");
            let llm = mock();
            match (decompose(&llm, &prompt), decompose(&llm, &prompt)) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(&a, &b);
                    let back: MarketingBrief = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
                    prop_assert_eq!(back, a);
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "non-deterministic decomposition"),
            }
        }
    }
}
