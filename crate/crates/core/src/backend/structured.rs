use std::sync::Arc;

use serde_json::Value;
use tracing::warn;

use super::{BackendError, BackendErrorKind, LanguageModel, TextCompletionRequest};

pub const DEFAULT_RETRY_BUDGET: u32 = 3;

/// Schema-validating wrapper around a [`LanguageModel`].
///
/// Replies that are not JSON or do not match the requested schema are retried
/// with a repair note appended to the user content, up to the retry budget
/// (total attempts). Retryable transport errors consume the same budget.
#[derive(Clone)]
pub struct StructuredLlm {
    backend: Arc<dyn LanguageModel>,
    retry_budget: u32,
}

impl StructuredLlm {
    pub fn new(backend: Arc<dyn LanguageModel>) -> Self {
        Self::with_retry_budget(backend, DEFAULT_RETRY_BUDGET)
    }

    pub fn with_retry_budget(backend: Arc<dyn LanguageModel>, retry_budget: u32) -> Self {
        Self {
            backend,
            retry_budget: retry_budget.max(1),
        }
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn retry_budget(&self) -> u32 {
        self.retry_budget
    }

    /// Returns a value that validates against `request.expected_schema`,
    /// reduced to the schema's fields.
    pub fn complete(&self, request: &TextCompletionRequest) -> Result<Value, BackendError> {
        let schema = request.expected_schema;
        let mut current = request.clone();
        let mut last_error = None;
        for attempt in 1..=self.retry_budget {
            let problem = match self.backend.complete_raw(&current) {
                Ok(raw) => match extract_json(&raw).and_then(|v| schema.validate(&v)) {
                    Ok(value) => return Ok(value),
                    Err(problem) => problem,
                },
                Err(e) if e.retryable() => {
                    warn!(backend = self.backend.name(), attempt, error = %e, "retrying completion");
                    last_error = Some(e);
                    continue;
                }
                Err(e) => return Err(e),
            };
            warn!(backend = self.backend.name(), %schema, attempt, %problem, "invalid structured output");
            last_error = Some(BackendError::schema_violation(format!(
                "{schema} output invalid after {attempt} attempt(s): {problem}"
            )));
            current = request.clone();
            current.user_content = format!(
                "{}\n\nYour previous reply was rejected ({problem}). Reply with one JSON object of the form {} and nothing else.",
                request.user_content,
                schema.describe()
            );
        }
        Err(last_error.unwrap_or_else(|| {
            BackendError::new(BackendErrorKind::ServiceUnavailable, "no attempts made", false)
        }))
    }
}

/// Pulls the first JSON object out of a model reply, tolerating markdown
/// fences and surrounding prose.
pub fn extract_json(raw: &str) -> Result<Value, String> {
    let trimmed = raw.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        return Ok(v);
    }
    let start = trimmed.find('{');
    let end = trimmed.rfind('}');
    match (start, end) {
        (Some(s), Some(e)) if s < e => serde_json::from_str(&trimmed[s..=e])
            .map_err(|err| format!("reply is not valid JSON: {err}")),
        _ => Err("reply contains no JSON object".to_string()),
    }
}
