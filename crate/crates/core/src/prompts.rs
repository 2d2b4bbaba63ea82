//! Fixed prompt templates shared by the stages that call language models.
//!
//! Requests are line-oriented `Label: value` documents so that both real
//! models and the rule-based mock can read them.

pub const DECOMPOSE_FEW_SHOT: &str = include_str!("../resources/decompose_few_shot_v1.txt");
pub const DECOMPOSE_TEMPLATE_VERSION: &str = "decompose-v1";

pub const DECOMPOSE_SYSTEM: &str = "You convert marketing image requests into structured briefs. \
Extract the primary product being promoted, the background elements describing the scene, and the \
theme or occasion. Use empty strings for absent elements. Answer with JSON only.";

pub const VALIDATOR_SYSTEM: &str = "You judge whether a candidate background image suits a \
marketing prompt. Consider scene context, theme and visual compatibility with the product. Answer \
with JSON only: verdict 1 if suitable, 0 otherwise.";

pub const CAPTION_SYSTEM: &str = "You write one descriptive caption for generating a marketing \
image. Emphasise the primary product, position other elements around it, and when a reference \
background image is attached, describe its visual features. Answer with JSON only.";

pub const ADVISOR_SYSTEM: &str = "You are a composition advisor. Given a canvas, a product image \
and a scene caption, recommend the product's width and height as fractions of the canvas \
dimensions so that it looks naturally sized in the described scene. Answer with JSON only.";

pub const RUBRIC_SYSTEM: &str = "You are a quality controller for generated marketing images. \
Score each criterion 1 (pass) or 0 (fail):\n\
caption_alignment: every element specified in the caption is accurately depicted;\n\
product_uniqueness: the scene contains exactly one instance of the product, no duplicates;\n\
physical_realism: object placement is consistent with real-world physics and spatial relations;\n\
lighting_consistency: shadows and reflections match the scene's lighting.\n\
Answer with JSON only.";

pub mod label {
    pub const PROMPT: &str = "Prompt";
    pub const PRIMARY_PRODUCT: &str = "Primary product";
    pub const BACKGROUND_ELEMENTS: &str = "Background elements";
    pub const THEME: &str = "Theme";
    pub const CANDIDATE_BACKGROUND: &str = "Candidate background";
    pub const CANDIDATE_CATEGORY: &str = "Candidate category";
    pub const REFERENCE_BACKGROUND: &str = "Reference background";
    pub const CAPTION: &str = "Caption";
    pub const CANVAS_SIZE: &str = "Canvas size";
    pub const CANVAS_BACKGROUND: &str = "Canvas background";
    pub const PRODUCT: &str = "Product";
    pub const PRODUCT_CATEGORY: &str = "Product category";
    pub const PRODUCT_SIZE: &str = "Product size";
    pub const GENERATOR_NOTES: &str = "Generator notes";
    pub const OUTPUT_FORMAT: &str = "Output format";
}

/// Formats one `Label: value` line.
pub fn field(label: &str, value: impl std::fmt::Display) -> String {
    format!("{label}: {value}")
}

/// Value of the last line starting with `label:`.
pub fn read_field<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    text.lines().rev().find_map(|line| {
        line.strip_prefix(label)
            .and_then(|rest| rest.strip_prefix(':'))
            .map(str::trim)
    })
}

/// Parses `WIDTHxHEIGHT`.
pub fn parse_size(text: &str) -> Option<(u32, u32)> {
    let (w, h) = text.split_once('x')?;
    Some((w.trim().parse().ok()?, h.trim().parse().ok()?))
}
