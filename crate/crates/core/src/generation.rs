//! Dispatches composition variants to the scene generation backend.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::backend::{BackendError, GenerationRequest, SceneGenerator};
use crate::caption::SceneCaption;
use crate::composition::CompositionVariant;
use crate::error::{PipelineError, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateImage {
    pub candidate_id: String,
    pub variant_id: String,
    pub raster: Raster,
    pub seed: u64,
    /// 1 for the first pass, 2 for the regeneration pass.
    pub attempt: u32,
    /// Backend-supplied notes, forwarded to the rubric.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub variant_id: String,
    pub seed: u64,
    pub attempt: u32,
    pub error: BackendError,
}

#[derive(Debug, Clone, Default)]
pub struct GenerationBatch {
    pub candidates: Vec<CandidateImage>,
    pub failures: Vec<GenerationFailure>,
}

/// Per-candidate seed: `run_seed` xor a digest of the variant, pass and seed
/// index.
pub fn derive_seed(run_seed: u64, variant_id: &str, attempt: u32, seed_index: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(variant_id.as_bytes());
    h.update([0]);
    h.update(attempt.to_le_bytes());
    h.update(seed_index.to_le_bytes());
    let digest = h.finalize();
    run_seed ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn candidate_id(attempt: u32, variant_id: &str, seed_index: u32) -> String {
    format!("a{attempt}-{variant_id}-s{seed_index}")
}

#[derive(Debug, Clone, Copy)]
pub struct GenerationSettings {
    pub seeds_per_variant: u32,
    pub run_seed: u64,
    pub attempt: u32,
    /// Upper bound on concurrent backend calls.
    pub max_in_flight: usize,
}

/// Generates `seeds_per_variant` candidates per variant. Individual failures
/// are recorded and skipped; the output is ordered by variant, then seed.
/// Fails only when every candidate failed.
pub fn generate_all(
    generator: &dyn SceneGenerator,
    variants: &[CompositionVariant],
    caption: &SceneCaption,
    settings: GenerationSettings,
) -> Result<GenerationBatch> {
    if variants.is_empty() {
        return Err(PipelineError::invalid("no composition variants to generate"));
    }
    let seeds = settings.seeds_per_variant.max(1);
    let jobs: Vec<(&CompositionVariant, u32)> = variants
        .iter()
        .flat_map(|v| (0..seeds).map(move |i| (v, i)))
        .collect();

    let run = |(variant, index): (&CompositionVariant, u32)| {
        let seed = derive_seed(settings.run_seed, &variant.variant_id, settings.attempt, index);
        let result = GenerationRequest::new(
            variant.composed.clone(),
            variant.mask.clone(),
            caption.text.clone(),
            seed,
        )
        .and_then(|req| generator.generate_scene(&req))
        .and_then(|scene| {
            if scene.raster.dimensions() == variant.composed.dimensions() {
                Ok(scene)
            } else {
                Err(BackendError::malformed(format!(
                    "generated image is {:?}, canvas is {:?}",
                    scene.raster.dimensions(),
                    variant.composed.dimensions()
                )))
            }
        });
        match result {
            Ok(scene) => Ok(CandidateImage {
                candidate_id: candidate_id(settings.attempt, &variant.variant_id, index),
                variant_id: variant.variant_id.clone(),
                raster: scene.raster,
                seed,
                attempt: settings.attempt,
                notes: scene.notes,
            }),
            Err(error) => {
                warn!(variant = %variant.variant_id, seed, %error, "candidate generation failed");
                Err(GenerationFailure {
                    variant_id: variant.variant_id.clone(),
                    seed,
                    attempt: settings.attempt,
                    error,
                })
            }
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.max_in_flight.max(1))
        .build()
        .map_err(|e| PipelineError::Config(format!("cannot start generation workers: {e}")))?;
    let results: Vec<_> = pool.install(|| jobs.into_par_iter().map(run).collect());

    let mut batch = GenerationBatch::default();
    for r in results {
        match r {
            Ok(c) => batch.candidates.push(c),
            Err(f) => batch.failures.push(f),
        }
    }
    if batch.candidates.is_empty() {
        let first = &batch.failures[0].error;
        return Err(PipelineError::Backend(BackendError::new(
            first.kind(),
            format!("all {} candidates failed; first error: {}", batch.failures.len(), first.detail()),
            first.retryable(),
        )));
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;
    use std::sync::Mutex;

    use super::*;
    use crate::backend::mock::MockSceneGenerator;
    use crate::backend::GeneratedScene;
    use crate::composition::{enumerate_variants, Canvas, PlanConfig, ScaleFactors};
    use crate::backend::mock::MockEmbedder;
    use crate::store::{asset_embedding, Asset, AssetKind};

    fn variants() -> Vec<CompositionVariant> {
        let raster = Raster::filled(10, 10, [200, 30, 30, 255]);
        let product = Asset {
            asset_id: "p".into(),
            kind: AssetKind::Product,
            embedding: asset_embedding(&MockEmbedder::default(), &raster, "mug").unwrap(),
            raster,
            label: "mug".into(),
            category: "mug".into(),
        };
        let canvas = Canvas::empty(48, 48).unwrap();
        enumerate_variants(&canvas, &product, ScaleFactors::new(0.3, 0.3).unwrap(), &PlanConfig::default())
            .unwrap()
            .variants
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

    fn settings(seeds: u32) -> GenerationSettings {
        GenerationSettings {
            seeds_per_variant: seeds,
            run_seed: 7,
            attempt: 1,
            max_in_flight: 4,
        }
    }

    /// Fails for the listed variant ids.
    struct Scripted {
        fail: Vec<&'static str>,
        seen: Mutex<Vec<u64>>,
    }

    impl SceneGenerator for Scripted {
        fn name(&self) -> &str {
            "scripted"
        }

        fn generate_scene(&self, request: &GenerationRequest) -> std::result::Result<GeneratedScene, BackendError> {
            self.seen.lock().unwrap().push(request.seed);
            let variant = variants()
                .into_iter()
                .find(|v| derive_seed(7, &v.variant_id, 1, 0) == request.seed)
                .map(|v| v.variant_id);
            if variant.is_some_and(|v| self.fail.contains(&v.as_str())) {
                return Err(BackendError::unavailable("scripted"));
            }
            Ok(GeneratedScene {
                raster: request.composed_canvas.clone(),
                notes: vec![],
            })
        }
    }

    #[test]
    fn mock_batch_is_deterministic() {
        let g = MockSceneGenerator::default();
        let a = generate_all(&g, &variants(), &caption(), settings(1)).unwrap();
        let b = generate_all(&g, &variants(), &caption(), settings(1)).unwrap();
        assert_eq!(a.candidates.len(), 9);
        assert_eq!(a.candidates, b.candidates);
        let order: Vec<_> = a.candidates.iter().map(|c| c.variant_id.clone()).collect();
        let expected: Vec<_> = variants().into_iter().map(|v| v.variant_id).collect();
        assert_eq!(order, expected);
    }

    #[test]
    fn failures_are_recorded_and_skipped() {
        let g = Scripted {
            fail: vec!["left-r15", "right-r0"],
            seen: Mutex::new(vec![]),
        };
        let batch = generate_all(&g, &variants(), &caption(), settings(1)).unwrap();
        assert_eq!(batch.candidates.len(), 7);
        assert_eq!(batch.failures.len(), 2);
        assert_eq!(batch.failures[0].variant_id, "left-r15");
    }

    #[test]
    fn all_failures_are_a_batch_error() {
        let g = Scripted {
            fail: vec!["left-r0", "left-r15", "left-r345", "center-r0", "center-r15", "center-r345", "right-r0", "right-r15", "right-r345"],
            seen: Mutex::new(vec![]),
        };
        assert!(matches!(
            generate_all(&g, &variants(), &caption(), settings(1)),
            Err(PipelineError::Backend(_))
        ));
    }

    #[test]
    fn two_seeds_give_distinct_candidates() {
        let batch = generate_all(&MockSceneGenerator::default(), &variants(), &caption(), settings(2)).unwrap();
        assert_eq!(batch.candidates.len(), 18);
        let keys: HashSet<_> = batch.candidates.iter().map(|c| (c.variant_id.clone(), c.seed)).collect();
        assert_eq!(keys.len(), 18);
        let ids: HashSet<_> = batch.candidates.iter().map(|c| c.candidate_id.clone()).collect();
        assert_eq!(ids.len(), 18);
    }

    #[test]
    fn seeds_depend_on_attempt() {
        assert_ne!(derive_seed(1, "left-r0", 1, 0), derive_seed(1, "left-r0", 2, 0));
        assert_ne!(derive_seed(1, "left-r0", 1, 0), derive_seed(2, "left-r0", 1, 0));
        assert_eq!(derive_seed(1, "left-r0", 1, 0), derive_seed(1, "left-r0", 1, 0));
    }
}
