//! Registered structured-output schemas.
//!
//! Every schema is a flat JSON object with typed, required fields. That is all
//! the pipeline ever asks a language model for, so a full JSON-Schema engine
//! is not needed.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Text,
    Number,
    /// Integer 0 or 1.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaId {
    Brief,
    BackgroundVerdict,
    Caption,
    ScaleAdvice,
    Rubric,
}

impl SchemaId {
    pub const ALL: [SchemaId; 5] = [
        SchemaId::Brief,
        SchemaId::BackgroundVerdict,
        SchemaId::Caption,
        SchemaId::ScaleAdvice,
        SchemaId::Rubric,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Brief => "brief",
            Self::BackgroundVerdict => "background_verdict",
            Self::Caption => "caption",
            Self::ScaleAdvice => "scale_advice",
            Self::Rubric => "rubric",
        }
    }

    pub fn fields(self) -> &'static [(&'static str, FieldKind)] {
        use FieldKind::*;
        match self {
            Self::Brief => &[
                ("product", Text),
                ("background", Text),
                ("theme", Text),
                ("other_products", Text),
            ],
            Self::BackgroundVerdict => &[("verdict", Binary)],
            Self::Caption => &[("caption", Text)],
            Self::ScaleAdvice => &[("s_w", Number), ("s_h", Number)],
            Self::Rubric => &[
                ("caption_alignment", Binary),
                ("product_uniqueness", Binary),
                ("physical_realism", Binary),
                ("lighting_consistency", Binary),
            ],
        }
    }

    /// Compact description embedded in prompts, e.g.
    /// `{"verdict": 0 or 1}`.
    pub fn describe(self) -> String {
        let parts: Vec<String> = self
            .fields()
            .iter()
            .map(|(name, kind)| {
                let ty = match kind {
                    FieldKind::Text => "string",
                    FieldKind::Number => "number",
                    FieldKind::Binary => "0 or 1",
                };
                format!("\"{name}\": {ty}")
            })
            .collect();
        format!("{{{}}}", parts.join(", "))
    }

    /// Checks `value` against the schema and returns it reduced to the
    /// declared fields.
    pub fn validate(self, value: &Value) -> Result<Value, String> {
        let obj = value
            .as_object()
            .ok_or_else(|| format!("{} output must be a JSON object", self.as_str()))?;
        let mut out = Map::new();
        for (name, kind) in self.fields() {
            let field = obj
                .get(*name)
                .ok_or_else(|| format!("missing field `{name}`"))?;
            let ok = match kind {
                FieldKind::Text => field.is_string(),
                FieldKind::Number => field.as_f64().is_some_and(f64::is_finite),
                FieldKind::Binary => matches!(field.as_u64(), Some(0 | 1)),
            };
            if !ok {
                return Err(format!("field `{name}` has wrong type: {field}"));
            }
            out.insert((*name).to_string(), field.clone());
        }
        Ok(Value::Object(out))
    }
}

impl fmt::Display for SchemaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn binary_fields_accept_only_zero_or_one() {
        let s = SchemaId::BackgroundVerdict;
        assert!(s.validate(&json!({"verdict": 1})).is_ok());
        assert!(s.validate(&json!({"verdict": 2})).is_err());
        assert!(s.validate(&json!({"verdict": true})).is_err());
        assert!(s.validate(&json!({"verdict": 0.5})).is_err());
    }

    #[test]
    fn extra_fields_are_dropped() {
        let v = SchemaId::Caption
            .validate(&json!({"caption": "x", "reasoning": "y"}))
            .unwrap();
        assert_eq!(v, json!({"caption": "x"}));
    }

    #[test]
    fn missing_field_is_reported() {
        let err = SchemaId::ScaleAdvice.validate(&json!({"s_w": 0.3})).unwrap_err();
        assert!(err.contains("s_h"));
    }

    #[test]
    fn describe_lists_every_field() {
        assert_eq!(
            SchemaId::Brief.describe(),
            r#"{"product": string, "background": string, "theme": string, "other_products": string}"#
        );
    }
}
