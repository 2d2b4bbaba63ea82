//! Rubric scoring, gating, pattern relaxation and top-k selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::backend::{
    AestheticScorer, BackendError, Embedder, EmbeddingVector, SchemaId, StructuredLlm,
    TextCompletionRequest,
};
use crate::caption::SceneCaption;
use crate::error::{PipelineError, Result};
use crate::generation::CandidateImage;
use crate::prompts::{self, label};

/// Criterion verdicts in pattern order: caption alignment, product
/// uniqueness, physical realism, lighting consistency.
pub type Pattern = [u8; 4];

pub const CRITERIA: [&str; 4] = [
    "caption_alignment",
    "product_uniqueness",
    "physical_realism",
    "lighting_consistency",
];

/// Relaxation order: everything, then without caption alignment, then
/// without caption alignment and lighting.
pub const DEFAULT_PATTERNS: [Pattern; 3] = [[1, 1, 1, 1], [0, 1, 1, 1], [0, 1, 1, 0]];
pub const DEFAULT_CLIP_WEIGHT: f64 = 2.5;
pub const AESTHETIC_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct RubricScore {
    pub caption_alignment: u8,
    pub product_uniqueness: u8,
    pub physical_realism: u8,
    pub lighting_consistency: u8,
}

impl RubricScore {
    pub fn from_pattern(p: Pattern) -> Result<Self> {
        if p.iter().any(|&b| b > 1) {
            return Err(PipelineError::invalid(format!("rubric values must be 0 or 1, got {p:?}")));
        }
        Ok(Self {
            caption_alignment: p[0],
            product_uniqueness: p[1],
            physical_realism: p[2],
            lighting_consistency: p[3],
        })
    }

    pub fn pattern(&self) -> Pattern {
        [
            self.caption_alignment,
            self.product_uniqueness,
            self.physical_realism,
            self.lighting_consistency,
        ]
    }
}

/// Product of the four criteria.
pub fn gate(r: &RubricScore) -> u8 {
    r.pattern().iter().product()
}

/// Indices of every score matching the first pattern that matches anything.
pub fn select_by_patterns(scores: &[Pattern], patterns: &[Pattern]) -> Vec<usize> {
    for p in patterns {
        let hits: Vec<usize> = scores
            .iter()
            .enumerate()
            .filter(|(_, s)| *s == p)
            .map(|(i, _)| i)
            .collect();
        if !hits.is_empty() {
            return hits;
        }
    }
    Vec::new()
}

/// `w · max(0, cos)` between an image and a text embedding.
pub fn clip_score(image: &EmbeddingVector, text: &EmbeddingVector, w: f64) -> Result<f64> {
    let cos = image
        .cosine(text)
        .map_err(|e| PipelineError::invalid(e.to_string()))?;
    Ok(w * cos.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    StrictGate,
    Hierarchical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionPolicy {
    pub mode: SelectionMode,
    pub patterns: Vec<Pattern>,
    pub k: usize,
    /// On the 0–10 aesthetic scale.
    pub aesthetic_threshold: f64,
    pub alpha: f64,
    pub beta: f64,
    pub use_clip_filter: bool,
    /// Minimum CLIP score (0..=clip_weight) when the filter is on.
    pub clip_threshold: f64,
    pub clip_weight: f64,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self {
            mode: SelectionMode::Hierarchical,
            patterns: DEFAULT_PATTERNS.to_vec(),
            k: 4,
            aesthetic_threshold: 5.0,
            alpha: 0.5,
            beta: 0.5,
            use_clip_filter: false,
            clip_threshold: 0.5,
            clip_weight: DEFAULT_CLIP_WEIGHT,
        }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(format!("quality: {m}")));
        if self.mode == SelectionMode::Hierarchical && self.patterns.is_empty() {
            return bad("hierarchical mode needs at least one pattern");
        }
        if self.patterns.iter().flatten().any(|&b| b > 1) {
            return bad("patterns may only contain 0 and 1");
        }
        if self.k == 0 {
            return bad("k must be positive");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return bad("alpha and beta must be non-negative with a positive sum");
        }
        if !(self.clip_weight > 0.0 && self.clip_weight.is_finite()) {
            return bad("clip_weight must be positive");
        }
        Ok(())
    }

    /// `α · aesthetic/10 + β · clip/w`.
    pub fn combined(&self, aesthetic: f64, clip: f64) -> f64 {
        self.alpha * (aesthetic / AESTHETIC_MAX) + self.beta * (clip / self.clip_weight)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub candidate_id: String,
    pub rubric: RubricScore,
    pub gate: u8,
    pub matched_pattern: Option<Pattern>,
    pub aesthetic: f64,
    pub clip_score: f64,
    pub combined: f64,
    /// Backend failures that forced conservative scores.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

impl QualityReport {
    pub fn new(candidate_id: impl Into<String>, rubric: RubricScore, aesthetic: f64, clip_score: f64, policy: &SelectionPolicy) -> Self {
        Self {
            candidate_id: candidate_id.into(),
            gate: gate(&rubric),
            rubric,
            matched_pattern: None,
            aesthetic,
            clip_score,
            combined: policy.combined(aesthetic, clip_score),
            failures: Vec::new(),
        }
    }
}

fn rubric_request(candidate: &CandidateImage, caption: &SceneCaption) -> std::result::Result<TextCompletionRequest, BackendError> {
    let mut lines = vec![prompts::field(label::CAPTION, &caption.text)];
    if !candidate.notes.is_empty() {
        lines.push(prompts::field(label::GENERATOR_NOTES, candidate.notes.join(", ")));
    }
    lines.push(prompts::field(label::OUTPUT_FORMAT, SchemaId::Rubric.describe()));
    Ok(TextCompletionRequest::new(prompts::RUBRIC_SYSTEM, lines.join("\n"), SchemaId::Rubric)?
        .with_image(candidate.raster.clone()))
}

/// Rubric verdicts for one candidate. A backend failure yields all zeros and
/// the error, so the candidate cannot pass.
pub fn score_rubric(
    llm: &StructuredLlm,
    candidate: &CandidateImage,
    caption: &SceneCaption,
) -> (RubricScore, Option<BackendError>) {
    let reply = rubric_request(candidate, caption).and_then(|req| llm.complete(&req));
    match reply {
        Ok(v) => {
            let bit = |k: &str| v[k].as_u64().unwrap_or(0).min(1) as u8;
            let r = RubricScore {
                caption_alignment: bit(CRITERIA[0]),
                product_uniqueness: bit(CRITERIA[1]),
                physical_realism: bit(CRITERIA[2]),
                lighting_consistency: bit(CRITERIA[3]),
            };
            (r, None)
        }
        Err(e) => {
            warn!(candidate = %candidate.candidate_id, error = %e, "rubric scoring failed");
            (RubricScore::default(), Some(e))
        }
    }
}

/// Aesthetic score, or 0 and the error on backend failure.
pub fn aesthetic_score(scorer: &dyn AestheticScorer, candidate: &CandidateImage) -> (f64, Option<BackendError>) {
    match scorer.score(&candidate.raster) {
        Ok(s) if s.is_finite() => (s, None),
        Ok(s) => (0.0, Some(BackendError::malformed(format!("non-finite aesthetic score {s}")))),
        Err(e) => {
            warn!(candidate = %candidate.candidate_id, error = %e, "aesthetic scoring failed");
            (0.0, Some(e))
        }
    }
}

/// Scoring backends used by [`evaluate_candidates`].
pub struct Scorers<'a> {
    pub rubric: &'a StructuredLlm,
    pub aesthetic: &'a dyn AestheticScorer,
    pub embedder: &'a dyn Embedder,
}

/// Scores every candidate and marks which matched the selected pattern.
/// Reports come back in candidate order.
pub fn evaluate_candidates(
    candidates: &[CandidateImage],
    caption: &SceneCaption,
    scorers: &Scorers<'_>,
    policy: &SelectionPolicy,
) -> Vec<QualityReport> {
    let text = scorers.embedder.embed_text(&caption.text);
    let mut reports: Vec<QualityReport> = candidates
        .par_iter()
        .map(|c| {
            let mut failures = Vec::new();
            let (rubric, err) = score_rubric(scorers.rubric, c, caption);
            failures.extend(err.map(|e| format!("rubric: {e}")));
            let (aesthetic, err) = aesthetic_score(scorers.aesthetic, c);
            failures.extend(err.map(|e| format!("aesthetic: {e}")));
            let clip = match &text {
                Ok(t) => scorers
                    .embedder
                    .embed_image(&c.raster)
                    .map_err(PipelineError::from)
                    .and_then(|img| clip_score(&img, t, policy.clip_weight)),
                Err(e) => Err(PipelineError::from(e.clone())),
            };
            let clip = clip.unwrap_or_else(|e| {
                failures.push(format!("clip: {e}"));
                0.0
            });
            let mut report = QualityReport::new(c.candidate_id.clone(), rubric, aesthetic, clip, policy);
            report.failures = failures;
            report
        })
        .collect();

    if policy.mode == SelectionMode::Hierarchical {
        let patterns: Vec<Pattern> = reports.iter().map(|r| r.rubric.pattern()).collect();
        for i in select_by_patterns(&patterns, &policy.patterns) {
            reports[i].matched_pattern = Some(patterns[i]);
        }
    } else {
        for r in reports.iter_mut().filter(|r| r.gate == 1) {
            r.matched_pattern = Some(r.rubric.pattern());
        }
    }
    reports
}

/// Candidates that pass the rubric stage (gate or pattern relaxation) and
/// the score thresholds, ranked by the combined score; ties go to the
/// smaller candidate id. At most `k` ids.
pub fn rank_and_select(reports: &[QualityReport], policy: &SelectionPolicy) -> Vec<String> {
    let passed: Vec<&QualityReport> = match policy.mode {
        SelectionMode::StrictGate => reports.iter().filter(|r| gate(&r.rubric) == 1).collect(),
        SelectionMode::Hierarchical => {
            let patterns: Vec<Pattern> = reports.iter().map(|r| r.rubric.pattern()).collect();
            select_by_patterns(&patterns, &policy.patterns)
                .into_iter()
                .map(|i| &reports[i])
                .collect()
        }
    };
    let mut survivors: Vec<(f64, &str)> = passed
        .into_iter()
        .filter(|r| r.aesthetic >= policy.aesthetic_threshold)
        .filter(|r| !policy.use_clip_filter || r.clip_score >= policy.clip_threshold)
        .map(|r| (policy.combined(r.aesthetic, r.clip_score), r.candidate_id.as_str()))
        .collect();
    survivors.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    survivors
        .into_iter()
        .take(policy.k)
        .map(|(_, id)| id.to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::backend::mock::{MockAestheticScorer, MockEmbedder, MockLanguageModel};
    use crate::backend::LanguageModel;
    use crate::raster::Raster;

    fn all_patterns() -> Vec<Pattern> {
        (0..16u8)
            .map(|b| [(b >> 3) & 1, (b >> 2) & 1, (b >> 1) & 1, b & 1])
            .collect()
    }

    #[test]
    fn gate_is_one_only_for_all_ones() {
        for p in all_patterns() {
            let r = RubricScore::from_pattern(p).unwrap();
            assert_eq!(gate(&r) == 1, p == [1, 1, 1, 1]);
        }
    }

    #[test]
    fn pattern_selection_examples() {
        let pats = DEFAULT_PATTERNS;
        assert_eq!(select_by_patterns(&[[1, 1, 1, 1], [0, 1, 1, 1]], &pats), vec![0]);
        assert_eq!(select_by_patterns(&[[0, 1, 1, 0], [0, 1, 1, 0]], &pats), vec![0, 1]);
        assert!(select_by_patterns(&[[0, 0, 0, 0]], &pats).is_empty());
        assert!(select_by_patterns(&[], &pats).is_empty());
    }

    #[test]
    fn clip_score_examples() {
        let v = |x: Vec<f64>| EmbeddingVector::new(x, "t").unwrap();
        assert!((clip_score(&v(vec![1.0, 0.0]), &v(vec![1.0, 0.0]), 2.5).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(clip_score(&v(vec![1.0, 0.0]), &v(vec![-1.0, 0.0]), 2.5).unwrap(), 0.0);
        let c = 0.3f64;
        let s = clip_score(&v(vec![1.0, 0.0]), &v(vec![c, (1.0 - c * c).sqrt()]), 2.5).unwrap();
        assert!((s - 0.75).abs() < 1e-12);
        assert!(clip_score(&v(vec![1.0]), &v(vec![1.0, 0.0]), 2.5).is_err());
    }

    fn report(id: &str, pattern: Pattern, aesthetic: f64, clip: f64) -> QualityReport {
        QualityReport::new(id, RubricScore::from_pattern(pattern).unwrap(), aesthetic, clip, &SelectionPolicy::default())
    }

    #[test]
    fn combined_score_orders_survivors() {
        // Normalized (1.0, 0.2) vs (0.5, 0.9).
        let reports = [report("a", [1; 4], 10.0, 0.5), report("b", [1; 4], 5.0, 2.25)];
        assert_eq!(rank_and_select(&reports, &SelectionPolicy::default()), ["b", "a"]);
        let aesthetic_only = SelectionPolicy { beta: 0.0, ..SelectionPolicy::default() };
        assert_eq!(rank_and_select(&reports, &aesthetic_only), ["a", "b"]);
    }

    #[test]
    fn threshold_and_clip_filter_apply() {
        let reports = [report("a", [1; 4], 4.9, 2.0), report("b", [1; 4], 6.0, 0.1)];
        assert_eq!(rank_and_select(&reports, &SelectionPolicy::default()), ["b"]);
        let clip = SelectionPolicy { use_clip_filter: true, ..SelectionPolicy::default() };
        assert!(rank_and_select(&reports, &clip).is_empty());
    }

    #[test]
    fn strict_mode_ignores_relaxed_patterns() {
        let reports = [report("a", [0, 1, 1, 1], 9.0, 1.0)];
        let strict = SelectionPolicy { mode: SelectionMode::StrictGate, ..SelectionPolicy::default() };
        assert!(rank_and_select(&reports, &strict).is_empty());
        assert_eq!(rank_and_select(&reports, &SelectionPolicy::default()), ["a"]);
    }

    #[test]
    fn policy_validation() {
        assert!(SelectionPolicy::default().validate().is_ok());
        assert!(SelectionPolicy { alpha: 0.0, beta: 0.0, ..Default::default() }.validate().is_err());
        assert!(SelectionPolicy { k: 0, ..Default::default() }.validate().is_err());
        assert!(SelectionPolicy { patterns: vec![], ..Default::default() }.validate().is_err());
    }

    fn candidate(id: &str, notes: &[&str], raster: Raster) -> CandidateImage {
        CandidateImage {
            candidate_id: id.into(),
            variant_id: "v".into(),
            raster,
            seed: 0,
            attempt: 1,
            notes: notes.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn caption() -> SceneCaption {
        SceneCaption {
            text: "a mug".into(),
            derived_from_background: false,
            brief_ref: "b".into(),
            fallback: false,
            warnings: vec![],
        }
    }

    struct Down;

    impl LanguageModel for Down {
        fn name(&self) -> &str {
            "down"
        }

        fn complete_raw(&self, _: &TextCompletionRequest) -> std::result::Result<String, BackendError> {
            Err(BackendError::timeout("slow"))
        }
    }

    #[test]
    fn rubric_follows_generator_notes() {
        let llm = StructuredLlm::new(Arc::new(MockLanguageModel::default()));
        let img = Raster::filled(4, 4, [1, 2, 3, 255]);
        let (dup, _) = score_rubric(&llm, &candidate("a", &["duplicate"], img.clone()), &caption());
        assert_eq!(dup.pattern(), [1, 0, 1, 1]);
        let (clean, _) = score_rubric(&llm, &candidate("b", &[], img.clone()), &caption());
        assert_eq!(clean.pattern(), [1, 1, 1, 1]);
        let down = StructuredLlm::with_retry_budget(Arc::new(Down), 1);
        let (zero, err) = score_rubric(&down, &candidate("c", &[], img), &caption());
        assert_eq!(zero.pattern(), [0; 4]);
        assert!(err.is_some());
    }

    #[test]
    fn uniform_image_scores_zero_aesthetic() {
        let (s, err) = aesthetic_score(&MockAestheticScorer::default(), &candidate("a", &[], Raster::filled(8, 8, [128, 128, 128, 255])));
        assert_eq!(s, 0.0);
        assert!(err.is_none());
    }

    #[test]
    fn evaluate_marks_matched_pattern() {
        let llm = StructuredLlm::new(Arc::new(MockLanguageModel::default()));
        let scorer = MockAestheticScorer::default();
        let embedder = MockEmbedder::default();
        let scorers = Scorers { rubric: &llm, aesthetic: &scorer, embedder: &embedder };
        let img = Raster::filled(4, 4, [1, 2, 3, 255]);
        let cands = [candidate("a", &["misaligned"], img.clone()), candidate("b", &["duplicate"], img)];
        let reports = evaluate_candidates(&cands, &caption(), &scorers, &SelectionPolicy::default());
        assert_eq!(reports[0].matched_pattern, Some([0, 1, 1, 1]));
        assert_eq!(reports[1].matched_pattern, None);
        assert!(reports.iter().all(|r| (0.0..=2.5).contains(&r.clip_score)));
    }

    proptest! {
        #[test]
        fn mock_aesthetic_is_monotone_in_contrast(a in 0.0f64..200.0, b in 0.0f64..200.0) {
            let s = MockAestheticScorer::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.score_contrast(lo) <= s.score_contrast(hi));
            prop_assert!((0.0..=10.0).contains(&s.score_contrast(hi)));
        }
    }
}
