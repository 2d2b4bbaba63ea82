//! Product fidelity, significance tests and preference tallies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::Embedder;
use crate::composition::CompositionVariant;
use crate::error::{PipelineError, Result};
use crate::raster::{Mask, Raster, Rect, WHITE};

pub mod ms_ssim;
pub mod stats;

pub use ms_ssim::ms_ssim;
pub use stats::{mean_std, paired_t_test, PairedTestResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRecord {
    pub pair_id: String,
    pub ms_ssim: f64,
    pub embed_cosine: f64,
}

/// Pixels of `image` inside `bbox` where `mask` is set; everything else white.
pub fn extract_object(image: &Raster, mask: &Mask, bbox: Rect) -> Result<Raster> {
    if bbox.is_empty() || !bbox.fits_within(image.width(), image.height()) {
        return Err(PipelineError::invalid(format!("degenerate object box {bbox:?}")));
    }
    if mask.dimensions() != image.dimensions() {
        return Err(PipelineError::invalid("object mask does not match the image"));
    }
    let mut out = Raster::filled(bbox.width, bbox.height, WHITE);
    let mut any = false;
    for y in 0..bbox.height {
        for x in 0..bbox.width {
            if mask.get(bbox.x + x, bbox.y + y) {
                let p = image.pixel(bbox.x + x, bbox.y + y);
                out.put_pixel(x, y, [p[0], p[1], p[2], 255]);
                any = true;
            }
        }
    }
    if !any {
        return Err(PipelineError::invalid("object mask is empty inside its box"));
    }
    Ok(out)
}

/// Size both crops are brought to before MS-SSIM: the crop size, enlarged
/// uniformly when its short side is below the MS-SSIM minimum.
fn comparison_size(w: u32, h: u32) -> (u32, u32) {
    let need = ms_ssim::min_side(ms_ssim::WEIGHTS.len()) as f64;
    let f = (need / w.min(h) as f64).max(1.0);
    ((w as f64 * f).ceil() as u32, (h as f64 * f).ceil() as u32)
}

/// Compares the object in `generated` with the reference object, both cut
/// out at `bbox` through `mask`. The reference is the product as it was
/// placed into the generator input.
pub fn object_fidelity(
    pair_id: &str,
    generated: &Raster,
    reference: &Raster,
    mask: &Mask,
    bbox: Rect,
    embedder: &dyn Embedder,
) -> Result<FidelityRecord> {
    if generated.dimensions() != reference.dimensions() {
        return Err(PipelineError::invalid("generated and reference images differ in size"));
    }
    let got = extract_object(generated, mask, bbox)?;
    let want = extract_object(reference, mask, bbox)?;
    let (w, h) = comparison_size(bbox.width, bbox.height);
    let (got, want) = (got.resize_bilinear(w, h), want.resize_bilinear(w, h));
    let ms = ms_ssim(&got, &want)?;
    let cos = embedder
        .embed_image(&got)?
        .cosine(&embedder.embed_image(&want)?)
        .map_err(|e| PipelineError::invalid(e.to_string()))?;
    Ok(FidelityRecord {
        pair_id: pair_id.to_string(),
        ms_ssim: ms,
        embed_cosine: cos,
    })
}

/// [`object_fidelity`] against a composition variant.
pub fn product_fidelity(
    pair_id: &str,
    generated: &Raster,
    variant: &CompositionVariant,
    embedder: &dyn Embedder,
) -> Result<FidelityRecord> {
    object_fidelity(pair_id, generated, &variant.composed, &variant.mask, variant.placed_bbox, embedder)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    Pipeline,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub pair_id: String,
    pub winner: Winner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTally {
    pub model_tag: String,
    pub pipeline_wins: usize,
    pub baseline_wins: usize,
    /// Prompts where quality control kept nothing; each counts for the
    /// baseline.
    pub qc_empty_cases: usize,
    pub preference_rate: f64,
}

/// Per-pair majority vote, with every empty quality-control outcome counted
/// as an additional baseline win.
pub fn preference_rate(model_tag: &str, votes: &[Vote], qc_empty: usize) -> Result<PreferenceTally> {
    let mut per_pair: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for v in votes {
        let e = per_pair.entry(v.pair_id.as_str()).or_default();
        match v.winner {
            Winner::Pipeline => e.0 += 1,
            Winner::Baseline => e.1 += 1,
        }
    }
    let (mut pipeline_wins, mut baseline_wins) = (0, 0);
    for (pair, (p, b)) in &per_pair {
        if (p + b) % 2 == 0 {
            return Err(PipelineError::invalid(format!(
                "pair {pair} has an even number of votes ({})",
                p + b
            )));
        }
        if p > b {
            pipeline_wins += 1;
        } else {
            baseline_wins += 1;
        }
    }
    let total = pipeline_wins + baseline_wins + qc_empty;
    Ok(PreferenceTally {
        model_tag: model_tag.to_string(),
        pipeline_wins,
        baseline_wins,
        qc_empty_cases: qc_empty,
        preference_rate: if total == 0 { 0.0 } else { pipeline_wins as f64 / total as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub ms_ssim: MeanStd,
    pub embed_cosine: MeanStd,
}

impl ConditionSummary {
    fn of(records: &[FidelityRecord]) -> Self {
        let ms: Vec<f64> = records.iter().map(|r| r.ms_ssim).collect();
        let cos: Vec<f64> = records.iter().map(|r| r.embed_cosine).collect();
        Self {
            ms_ssim: MeanStd::of(&ms),
            embed_cosine: MeanStd::of(&cos),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub pairs: usize,
    pub baseline: ConditionSummary,
    pub pipeline: ConditionSummary,
    /// Present when there are at least two pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_test_ms_ssim: Option<PairedTestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_test_embed_cosine: Option<PairedTestResult>,
}

/// Mean ± std per metric and condition, with paired t-tests of pipeline
/// against baseline. Records are paired by position.
pub fn summarize(baseline: &[FidelityRecord], pipeline: &[FidelityRecord]) -> Result<EvaluationSummary> {
    if baseline.len() != pipeline.len() {
        return Err(PipelineError::invalid("baseline and pipeline record counts differ"));
    }
    let col = |rs: &[FidelityRecord], f: fn(&FidelityRecord) -> f64| rs.iter().map(f).collect::<Vec<_>>();
    let test = |f: fn(&FidelityRecord) -> f64| -> Result<Option<PairedTestResult>> {
        if baseline.len() < 2 {
            return Ok(None);
        }
        paired_t_test(&col(baseline, f), &col(pipeline, f)).map(Some)
    };
    Ok(EvaluationSummary {
        pairs: baseline.len(),
        baseline: ConditionSummary::of(baseline),
        pipeline: ConditionSummary::of(pipeline),
        t_test_ms_ssim: test(|r| r.ms_ssim)?,
        t_test_embed_cosine: test(|r| r.embed_cosine)?,
    })
}
