//! Deterministic stand-ins for every backend.
//!
//! All mocks are pure functions of their inputs (and seed): repeated calls
//! return byte-identical results, so the whole pipeline can run and be tested
//! without any model service.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{
    AestheticScorer, BackendError, Embedder, EmbeddingVector, GeneratedScene, GenerationRequest,
    LanguageModel, SceneGenerator, SchemaId, TextCompletionRequest,
};
use crate::prompts::{self, label};
use crate::raster::Raster;

/// Generator notes understood by the mock rubric scorer, one per criterion in
/// rubric order.
pub const DEFECT_NOTES: [&str; 4] = ["misaligned", "duplicate", "unrealistic", "lighting"];

fn rng_from(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn unit_uniform(parts: &[&[u8]]) -> f64 {
    rng_from(parts).random::<f64>()
}

/// Lowercase alphanumeric tokens (apostrophes kept inside words).
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\'').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

// ---------------------------------------------------------------------------
// Language model

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidatorPolicy {
    AcceptAll,
    RejectAll,
    /// Accept iff the candidate label shares a non-stopword token with the
    /// brief's background elements.
    #[default]
    TokenOverlap,
}

/// Rule-based language model. It answers every registered schema by reading
/// the `Label: value` lines of the request.
#[derive(Debug, Clone, Default)]
pub struct MockLanguageModel {
    pub validator: ValidatorPolicy,
}

impl MockLanguageModel {
    pub fn new(validator: ValidatorPolicy) -> Self {
        Self { validator }
    }

    fn brief(&self, text: &str) -> serde_json::Value {
        let prompt = prompts::read_field(text, label::PROMPT).unwrap_or(text);
        let parsed = parse_marketing_prompt(prompt);
        json!({
            "product": parsed.product,
            "background": parsed.background.join(", "),
            "theme": parsed.theme.join(", "),
            "other_products": parsed.extra_products.join(", "),
        })
    }

    fn verdict(&self, text: &str) -> serde_json::Value {
        let verdict = match self.validator {
            ValidatorPolicy::AcceptAll => 1,
            ValidatorPolicy::RejectAll => 0,
            ValidatorPolicy::TokenOverlap => {
                let candidate = prompts::read_field(text, label::CANDIDATE_BACKGROUND).unwrap_or("");
                let background = prompts::read_field(text, label::BACKGROUND_ELEMENTS).unwrap_or("");
                u8::from(shares_content_token(candidate, background))
            }
        };
        json!({ "verdict": verdict })
    }

    fn caption(&self, request: &TextCompletionRequest) -> serde_json::Value {
        let text = &request.user_content;
        let product = prompts::read_field(text, label::PRIMARY_PRODUCT).unwrap_or("product");
        let background = prompts::read_field(text, label::BACKGROUND_ELEMENTS).unwrap_or("");
        let theme = prompts::read_field(text, label::THEME).unwrap_or("");
        let mut caption = format!("A {product}");
        if !background.is_empty() {
            caption.push_str(&format!(" in a scene with {background}"));
        }
        if !theme.is_empty() {
            caption.push_str(&format!(", {theme} mood"));
        }
        if !request.attached_images.is_empty() {
            let reference = prompts::read_field(text, label::REFERENCE_BACKGROUND).unwrap_or("the reference");
            let tone = dominant_tone(&request.attached_images[0]);
            caption.push_str(&format!(", {tone} tones drawn from {reference}"));
        }
        caption.push_str(", soft natural light, product in sharp focus");
        json!({ "caption": caption })
    }

    fn scale(&self, text: &str) -> serde_json::Value {
        let category = prompts::read_field(text, label::PRODUCT_CATEGORY).unwrap_or("");
        let product = prompts::read_field(text, label::PRODUCT_SIZE).and_then(prompts::parse_size);
        let canvas = prompts::read_field(text, label::CANVAS_SIZE).and_then(prompts::parse_size);
        let (s_w, s_h) = mock_scale_advice(category, product, canvas);
        json!({ "s_w": s_w, "s_h": s_h })
    }

    fn rubric(&self, text: &str) -> serde_json::Value {
        let notes: BTreeSet<String> = prompts::read_field(text, label::GENERATOR_NOTES)
            .map(|n| n.split(',').map(|s| s.trim().to_lowercase()).collect())
            .unwrap_or_default();
        let bit = |i: usize| u8::from(!notes.contains(DEFECT_NOTES[i]));
        json!({
            "caption_alignment": bit(0),
            "product_uniqueness": bit(1),
            "physical_realism": bit(2),
            "lighting_consistency": bit(3),
        })
    }
}

impl LanguageModel for MockLanguageModel {
    fn name(&self) -> &str {
        "mock-llm"
    }

    fn complete_raw(&self, request: &TextCompletionRequest) -> Result<String, BackendError> {
        let text = request.user_content.as_str();
        let value = match request.expected_schema {
            SchemaId::Brief => self.brief(text),
            SchemaId::BackgroundVerdict => self.verdict(text),
            SchemaId::Caption => self.caption(request),
            SchemaId::ScaleAdvice => self.scale(text),
            SchemaId::Rubric => self.rubric(text),
        };
        Ok(value.to_string())
    }
}

const STOPWORDS: &[&str] = &["a", "an", "the", "and", "of", "at", "on", "in", "with", "by", "for"];

fn shares_content_token(a: &str, b: &str) -> bool {
    let left: BTreeSet<String> = tokens(a)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect();
    tokens(b).iter().any(|t| left.contains(t))
}

fn dominant_tone(image: &Raster) -> &'static str {
    let luma = image.luma();
    let mean = luma.iter().sum::<f64>() / luma.len().max(1) as f64;
    match mean {
        m if m < 85.0 => "deep",
        m if m < 170.0 => "balanced",
        _ => "bright",
    }
}

/// Product scale (fraction of canvas) per category for the mock advisor.
pub const CATEGORY_SCALE: &[(&str, f64)] = &[
    ("sofa", 0.6),
    ("bed", 0.6),
    ("table", 0.55),
    ("chair", 0.45),
    ("lamp", 0.4),
    ("bag", 0.35),
    ("shoe", 0.3),
    ("bottle", 0.25),
    ("mug", 0.25),
    ("watch", 0.2),
];
pub const DEFAULT_CATEGORY_SCALE: f64 = 0.35;

/// The larger of the two factors equals the category scale; the other keeps
/// the product's aspect ratio on the canvas.
pub fn mock_scale_advice(
    category: &str,
    product: Option<(u32, u32)>,
    canvas: Option<(u32, u32)>,
) -> (f64, f64) {
    let base = CATEGORY_SCALE
        .iter()
        .find(|(c, _)| c.eq_ignore_ascii_case(category.trim()))
        .map_or(DEFAULT_CATEGORY_SCALE, |(_, s)| *s);
    let (Some((pw, ph)), Some((cw, ch))) = (product, canvas) else {
        return (base, base);
    };
    if pw == 0 || ph == 0 || cw == 0 || ch == 0 {
        return (base, base);
    }
    // s_h / s_w that keeps the product's pixel aspect ratio.
    let ratio = (ph as f64 / pw as f64) * (cw as f64 / ch as f64);
    if ratio <= 1.0 {
        (base, base * ratio)
    } else {
        (base / ratio, base)
    }
}

/// Result of the rule-based prompt parse used by the mock decomposer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub product: String,
    pub extra_products: Vec<String>,
    pub background: Vec<String>,
    pub theme: Vec<String>,
}

const PREPOSITIONS: &[&str] = &[
    "on", "in", "at", "by", "near", "under", "over", "beside", "with", "for", "during", "against",
    "inside", "outside", "atop", "across", "along", "beneath", "behind", "amid", "among", "around",
    "onto", "into", "next",
];
const THEME_PREPOSITIONS: &[&str] = &["for", "during"];
const DETERMINERS: &[&str] = &["a", "an", "the", "some", "this", "to"];
const THEME_WORDS: &[&str] = &[
    "sunset", "sunrise", "dusk", "dawn", "night", "nighttime", "evening", "morning", "noon",
    "twilight", "christmas", "holiday", "holidays", "halloween", "thanksgiving", "easter", "summer",
    "winter", "spring", "autumn", "fall", "valentine's", "valentines", "birthday", "wedding",
    "party", "sale", "festive", "diwali", "ramadan",
];

/// Splits a prompt into a product phrase and prepositional phrases. The first
/// noun phrase (text before the first preposition) is the product; phrases
/// introduced by temporal/occasion prepositions or containing a theme word
/// form the theme, the rest the background.
pub fn parse_marketing_prompt(prompt: &str) -> ParsedPrompt {
    let words = tokens(prompt);
    let mut segments: Vec<(Option<&str>, Vec<&str>)> = vec![(None, Vec::new())];
    for w in &words {
        if let Some(p) = PREPOSITIONS.iter().find(|p| **p == w.as_str()) {
            segments.push((Some(p), Vec::new()));
        } else {
            segments.last_mut().expect("non-empty").1.push(w.as_str());
        }
    }
    let strip = |phrase: &[&str]| -> String {
        let start = phrase
            .iter()
            .position(|w| !DETERMINERS.contains(w))
            .unwrap_or(phrase.len());
        phrase[start..].join(" ")
    };

    let head = &segments[0].1;
    let mut products: Vec<String> = head
        .split(|w| *w == "and" || *w == "or")
        .map(strip)
        .filter(|p| !p.is_empty())
        .collect();
    let product = if products.is_empty() {
        String::new()
    } else {
        products.remove(0)
    };

    let mut background = Vec::new();
    let mut theme = Vec::new();
    for (prep, phrase) in &segments[1..] {
        let text = strip(phrase);
        if text.is_empty() {
            continue;
        }
        let is_theme = prep.is_some_and(|p| THEME_PREPOSITIONS.contains(&p))
            || phrase.iter().any(|w| THEME_WORDS.contains(w));
        if is_theme {
            theme.push(text);
        } else {
            background.push(text);
        }
    }
    ParsedPrompt {
        product,
        extra_products: products,
        background,
        theme,
    }
}

// ---------------------------------------------------------------------------
// Embeddings

/// Hash-to-unit-vector embedder.
///
/// Text is embedded as the normalised sum of per-token hash vectors, so equal
/// strings collide and strings sharing words are correlated. Images are
/// embedded from a hash of their pixels, so only identical rasters collide.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dimension: usize,
    tag: String,
}

pub const MOCK_EMBED_DIMENSION: usize = 64;

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(MOCK_EMBED_DIMENSION)
    }
}

impl MockEmbedder {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension: dimension.max(1),
            tag: format!("mock-hash-{dimension}"),
        }
    }

    fn gaussian(&self, parts: &[&[u8]]) -> Vec<f64> {
        let mut rng = rng_from(parts);
        (0..self.dimension)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }

    fn finish(&self, mut v: Vec<f64>) -> Result<EmbeddingVector, BackendError> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(BackendError::malformed("degenerate mock embedding"));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        EmbeddingVector::new(v, self.tag.clone())
    }
}

impl Embedder for MockEmbedder {
    fn model_tag(&self) -> &str {
        &self.tag
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(BackendError::new(
                super::BackendErrorKind::MalformedResponse,
                "cannot embed empty text",
                false,
            ));
        }
        let mut toks = tokens(trimmed);
        if toks.is_empty() {
            toks.push(trimmed.to_string());
        }
        let mut sum = vec![0.0; self.dimension];
        for t in &toks {
            let v = self.gaussian(&[b"text", self.tag.as_bytes(), t.as_bytes()]);
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
        }
        self.finish(sum)
    }

    fn embed_image(&self, image: &Raster) -> Result<EmbeddingVector, BackendError> {
        if image.width() == 0 || image.height() == 0 {
            return Err(BackendError::new(
                super::BackendErrorKind::MalformedResponse,
                "cannot embed empty image",
                false,
            ));
        }
        let v = self.gaussian(&[b"image", self.tag.as_bytes(), image.fingerprint().as_bytes()]);
        self.finish(v)
    }
}

// ---------------------------------------------------------------------------
// Scene generation

/// Procedural outpainting mock.
///
/// Pixels outside the product mask are replaced by a seeded value-noise
/// texture blended with the input canvas; pixels inside the mask are copied
/// verbatim (or perturbed with Gaussian noise of σ = `perturb_product`·255 to
/// simulate a generator that damages the product).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockGeneratorOptions {
    /// Noise level applied to product pixels, as a fraction of 255.
    pub perturb_product: f64,
    /// Probability that each rubric criterion is planted as failed.
    pub defect_rate: f64,
    /// Notes attached to every output (see [`DEFECT_NOTES`]).
    pub forced_notes: Vec<String>,
    /// Probability that a call fails with `service_unavailable`.
    pub fail_rate: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MockSceneGenerator {
    pub options: MockGeneratorOptions,
}

impl MockSceneGenerator {
    pub fn new(options: MockGeneratorOptions) -> Self {
        Self { options }
    }

    fn texture(&self, width: u32, height: u32, seed: u64, caption: &str) -> Vec<[f64; 3]> {
        let mut rng = rng_from(&[b"texture", &seed.to_le_bytes(), caption.as_bytes()]);
        let grain_amp: f64 = rng.random_range(0.05..0.45);
        let octaves = [(4u32, 1.0 - grain_amp), (width.max(height) / 6 + 1, grain_amp)];
        let mut out = vec![[0.0; 3]; width as usize * height as usize];
        for (cells, amp) in octaves {
            let n = cells as usize + 1;
            let lattice: Vec<[f64; 3]> = (0..n * n)
                .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
                .collect();
            for y in 0..height {
                let gy = y as f64 / height as f64 * cells as f64;
                let (y0, ty) = (gy.floor() as usize, smooth(gy.fract()));
                for x in 0..width {
                    let gx = x as f64 / width as f64 * cells as f64;
                    let (x0, tx) = (gx.floor() as usize, smooth(gx.fract()));
                    let at = |i: usize, j: usize| lattice[j.min(n - 1) * n + i.min(n - 1)];
                    let (a, b, c, d) = (at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1));
                    let px = &mut out[y as usize * width as usize + x as usize];
                    for ch in 0..3 {
                        let top = a[ch] + (b[ch] - a[ch]) * tx;
                        let bottom = c[ch] + (d[ch] - c[ch]) * tx;
                        px[ch] += amp * 255.0 * (top + (bottom - top) * ty);
                    }
                }
            }
        }
        out
    }

    fn notes(&self, seed: u64) -> Vec<String> {
        let mut notes: Vec<String> = DEFECT_NOTES
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                self.options.defect_rate > 0.0
                    && unit_uniform(&[b"defect", &seed.to_le_bytes(), &[*i as u8]])
                        < self.options.defect_rate
            })
            .map(|(_, n)| n.to_string())
            .collect();
        for n in &self.options.forced_notes {
            if !notes.contains(n) {
                notes.push(n.clone());
            }
        }
        notes
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

impl SceneGenerator for MockSceneGenerator {
    fn name(&self) -> &str {
        "mock-generator"
    }

    fn generate_scene(&self, request: &GenerationRequest) -> Result<GeneratedScene, BackendError> {
        let seed = request.seed;
        if self.options.fail_rate > 0.0
            && unit_uniform(&[b"fail", &seed.to_le_bytes()]) < self.options.fail_rate
        {
            return Err(BackendError::unavailable(format!(
                "mock generator failure for seed {seed}"
            )));
        }
        let canvas = &request.composed_canvas;
        let mask = &request.product_mask;
        let (w, h) = canvas.dimensions();
        let texture = self.texture(w, h, seed, &request.caption);
        let noise = (self.options.perturb_product > 0.0)
            .then(|| Normal::new(0.0, self.options.perturb_product * 255.0))
            .transpose()
            .map_err(|e| BackendError::malformed(format!("bad perturbation: {e}")))?;
        let mut noise_rng = rng_from(&[b"perturb", &seed.to_le_bytes()]);

        let mut out = canvas.clone().with_alpha();
        for y in 0..h {
            for x in 0..w {
                let src = canvas.pixel(x, y);
                let px = if mask.get(x, y) {
                    match &noise {
                        None => [src[0], src[1], src[2], 255],
                        Some(dist) => {
                            let mut p = [0u8, 0, 0, 255];
                            for c in 0..3 {
                                let v = src[c] as f64 + dist.sample(&mut noise_rng);
                                p[c] = v.round().clamp(0.0, 255.0) as u8;
                            }
                            p
                        }
                    }
                } else {
                    let t = texture[y as usize * w as usize + x as usize];
                    let mut p = [0u8, 0, 0, 255];
                    for c in 0..3 {
                        let v = 0.45 * src[c] as f64 + 0.55 * t[c];
                        p[c] = v.round().clamp(0.0, 255.0) as u8;
                    }
                    p
                };
                out.put_pixel(x, y, px);
            }
        }
        Ok(GeneratedScene {
            raster: out,
            notes: self.notes(seed),
        })
    }
}

// ---------------------------------------------------------------------------
// Aesthetic scoring

/// Mean absolute luma difference between horizontally and vertically adjacent
/// pixels.
pub fn mean_local_contrast(image: &Raster) -> f64 {
    mean_local_contrast_of(&image.luma(), image.width() as usize, image.height() as usize)
}

pub fn mean_local_contrast_of(luma: &[f64], width: usize, height: usize) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for y in 0..height {
        for x in 0..width {
            let v = luma[y * width + x];
            if x + 1 < width {
                total += (luma[y * width + x + 1] - v).abs();
                pairs += 1;
            }
            if y + 1 < height {
                total += (luma[(y + 1) * width + x] - v).abs();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Aesthetic mock: `10 · c / (c + half_point)` where `c` is the mean local
/// contrast. Zero contrast scores 0; the score is monotone in contrast and
/// bounded by 10.
#[derive(Debug, Clone)]
pub struct MockAestheticScorer {
    pub half_point: f64,
}

pub const MOCK_AESTHETIC_HALF_POINT: f64 = 0.75;

impl Default for MockAestheticScorer {
    fn default() -> Self {
        Self {
            half_point: MOCK_AESTHETIC_HALF_POINT,
        }
    }
}

impl MockAestheticScorer {
    pub fn score_contrast(&self, contrast: f64) -> f64 {
        if contrast <= 0.0 {
            0.0
        } else {
            10.0 * contrast / (contrast + self.half_point)
        }
    }
}

impl AestheticScorer for MockAestheticScorer {
    fn score(&self, image: &Raster) -> Result<f64, BackendError> {
        Ok(self.score_contrast(mean_local_contrast(image)))
    }
}
