//! End-to-end run: decompose → retrieve → caption → plan → generate →
//! quality control → select, persisted as a run manifest.

use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use tracing::{info, info_span, warn};

use crate::backend::Backends;
use crate::caption::generate_caption;
use crate::composition::{advise_scale, enumerate_variants, variant_id, Canvas};
use crate::config::PipelineConfig;
use crate::decompose::{decompose, MarketingBrief};
use crate::error::{PipelineError, Result};
use crate::evaluation::{object_fidelity, FidelityRecord};
use crate::generation::{generate_all, GenerationSettings};
use crate::manifest::{
    CandidateRecord, CanvasRecord, FailureRecord, RetrievalSection, RunDraft, RunManifest,
    RunStatus, RunStore, ScaleRecord, StageTiming, VariantRecord, MANIFEST_VERSION,
};
use crate::quality::{evaluate_candidates, rank_and_select, Scorers};
use crate::raster::content_hash;
use crate::store::{AssetStore, RetrievalRecord};

/// Generation passes: the first plus one regeneration with fresh seeds.
pub const MAX_ATTEMPTS: u32 = 2;
/// Products kept in the manifest's retrieval record.
const PRODUCT_CANDIDATES: usize = 5;

pub struct Pipeline {
    config: PipelineConfig,
    backends: Backends,
    assets: Arc<AssetStore>,
    runs: Arc<RunStore>,
}

/// Run id derived from the prompt and configuration, ignoring local paths.
pub fn base_run_id(prompt: &str, config: &PipelineConfig) -> String {
    let config_json = serde_json::to_string(&config.portable()).expect("config serializes");
    let digest = content_hash(format!("{prompt}\n{config_json}").as_bytes());
    format!("run-{}", &digest[..12])
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Builder state shared by the stages of one run.
struct RunState {
    manifest: RunManifest,
    draft: RunDraft,
}

impl RunState {
    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let _span = info_span!("stage", stage).entered();
        let start = Instant::now();
        let out = f(self);
        self.manifest.stage_timings.push(StageTiming {
            stage: stage.to_string(),
            millis: start.elapsed().as_millis() as u64,
        });
        out
    }

    fn fail(&mut self, stage: &str, detail: impl Into<String>) {
        let detail = detail.into();
        warn!(stage, %detail, "stage failed");
        self.manifest.failures.push(FailureRecord { stage: stage.into(), detail });
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig, backends: Backends, assets: Arc<AssetStore>, runs: Arc<RunStore>) -> Result<Self> {
        config.validate()?;
        if assets.model_tag() != backends.embedder.model_tag() || assets.dimension() != backends.embedder.dimension() {
            return Err(PipelineError::Config(format!(
                "asset store holds {}/{} embeddings but the embedder is {}/{}",
                assets.model_tag(),
                assets.dimension(),
                backends.embedder.model_tag(),
                backends.embedder.dimension()
            )));
        }
        Ok(Self { config, backends, assets, runs })
    }

    /// Opens the configured asset store and run directory and builds the
    /// configured backends.
    pub fn from_config(config: PipelineConfig) -> Result<Self> {
        let backends = config.build_backends()?;
        let assets = AssetStore::open(&config.store.path, backends.embedder.model_tag(), backends.embedder.dimension())?;
        let runs = RunStore::open(&config.output.runs_dir)?;
        Self::new(config, backends, Arc::new(assets), Arc::new(runs))
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn assets(&self) -> &Arc<AssetStore> {
        &self.assets
    }

    pub fn runs(&self) -> &Arc<RunStore> {
        &self.runs
    }

    pub fn decompose(&self, prompt: &str) -> Result<MarketingBrief> {
        decompose(&self.backends.decomposer, prompt)
    }

    /// Executes every stage and persists the manifest. Stage failures end
    /// the run with `failed` status rather than an error; only invalid input
    /// and persistence problems are returned as errors.
    pub fn run(&self, prompt: &str) -> Result<RunManifest> {
        if prompt.trim().is_empty() {
            return Err(PipelineError::invalid("prompt is empty"));
        }
        let draft = self.runs.begin(&base_run_id(prompt, &self.config))?;
        let manifest = RunManifest {
            version: MANIFEST_VERSION,
            run_id: draft.run_id().to_string(),
            prompt: prompt.to_string(),
            status: RunStatus::Failed,
            created_at: now_secs(),
            config_snapshot: self.config.clone(),
            brief: None,
            retrieval: RetrievalSection::default(),
            caption: None,
            canvas: None,
            scale: None,
            variants: Vec::new(),
            attempts: 0,
            candidates: Vec::new(),
            quality_reports: Vec::new(),
            selected: Vec::new(),
            human_selection: None,
            stage_timings: Vec::new(),
            failures: Vec::new(),
            warnings: Vec::new(),
        };
        let mut state = RunState { manifest, draft };
        let _span = info_span!("run", run_id = %state.manifest.run_id).entered();
        if let Err(e) = self.execute(prompt, &mut state) {
            match e {
                PipelineError::Io { .. } | PipelineError::Manifest(_) => return Err(e),
                other => state.fail("pipeline", other.to_string()),
            }
        }
        let RunState { manifest, draft } = state;
        self.runs.commit(draft, &manifest)?;
        info!(status = ?manifest.status, selected = manifest.selected.len(), "run finished");
        Ok(manifest)
    }

    fn execute(&self, prompt: &str, s: &mut RunState) -> Result<()> {
        let cfg = &self.config;
        let b = &self.backends;
        let embedder = b.embedder.as_ref();

        let brief = match s.timed("decompose", |_| decompose(&b.decomposer, prompt)) {
            Ok(brief) => brief,
            Err(e) => {
                s.fail("decompose", e.to_string());
                return Ok(());
            }
        };
        s.manifest.warnings.extend(brief.warnings.iter().cloned());
        s.manifest.brief = Some(brief.clone());

        let products = s.timed("retrieve_products", |_| {
            self.assets
                .retrieve_products(&brief, PRODUCT_CANDIDATES, cfg.retrieval.product_threshold, embedder)
        });
        let products = match products {
            Ok(p) => p,
            Err(e) => {
                s.fail("retrieve_products", e.to_string());
                return Ok(());
            }
        };
        s.manifest.retrieval.products = products.iter().map(RetrievalRecord::from).collect();
        let Some(product) = products.first().map(|r| r.asset.clone()) else {
            s.fail(
                "retrieve_products",
                format!(
                    "no product matches {:?} with similarity ≥ {}",
                    brief.primary_product, cfg.retrieval.product_threshold
                ),
            );
            return Ok(());
        };
        s.manifest.retrieval.chosen_product = Some(product.asset_id.clone());

        let backgrounds = s.timed("retrieve_backgrounds", |_| {
            self.assets.retrieve_backgrounds(&brief, cfg.retrieval.background_k, embedder, &b.validator)
        });
        let background = match backgrounds {
            Ok(found) => {
                for (id, e) in &found.failures {
                    s.manifest.warnings.push(format!("validator failed for background {id}: {e}"));
                }
                s.manifest.retrieval.backgrounds = found.candidates.iter().map(RetrievalRecord::from).collect();
                found.accepted().next().map(|r| r.asset.clone())
            }
            Err(e) => {
                s.manifest.warnings.push(format!("background retrieval failed, using empty canvas: {e}"));
                None
            }
        };
        s.manifest.retrieval.chosen_background = background.as_ref().map(|a| a.asset_id.clone());

        let caption = s.timed("caption", |_| {
            generate_caption(&b.captioner, &brief, background.as_deref(), cfg.caption.max_words)
        });
        s.manifest.warnings.extend(caption.warnings.iter().cloned());
        s.manifest.caption = Some(caption.clone());

        let (w, h) = (cfg.plan.canvas_width, cfg.plan.canvas_height);
        let canvas = match &background {
            Some(bg) => Canvas::from_background(bg, w, h)?,
            None => Canvas::empty(w, h)?,
        };
        s.manifest.canvas = Some(CanvasRecord {
            width: w,
            height: h,
            background_source: canvas.background_source.clone(),
            image: s.draft.put_image(&canvas.raster)?,
        });

        let plan = s.timed("plan", |_| {
            let advice = advise_scale(&b.advisor, &canvas, &product, &caption, cfg.plan.scale_bounds);
            enumerate_variants(&canvas, &product, advice.scale, &cfg.plan).map(|plan| (advice, plan))
        });
        let (advice, plan) = match plan {
            Ok(p) => p,
            Err(e) => {
                s.fail("plan", e.to_string());
                return Ok(());
            }
        };
        s.manifest.warnings.extend(advice.warnings.iter().cloned());
        s.manifest.scale = Some(ScaleRecord {
            advice,
            effective: plan.effective_scale,
            reductions: plan.scale_reductions,
        });
        for v in &plan.variants {
            s.manifest.variants.push(VariantRecord {
                variant_id: v.variant_id.clone(),
                position_slot: v.position_slot,
                rotation_deg: v.rotation_deg,
                scale: v.scale,
                placed_bbox: v.placed_bbox,
                composed_image: s.draft.put_image(&v.composed)?,
                mask_image: s.draft.put_mask(&v.mask)?,
            });
        }

        let scorers = Scorers {
            rubric: &b.rubric,
            aesthetic: b.aesthetic.as_ref(),
            embedder,
        };
        for attempt in 1..=MAX_ATTEMPTS {
            s.manifest.attempts = attempt;
            let settings = GenerationSettings {
                seeds_per_variant: cfg.generate.seeds_per_variant,
                run_seed: cfg.run_seed,
                attempt,
                max_in_flight: cfg.generate.max_in_flight,
            };
            let batch = s.timed(&format!("generate.{attempt}"), |_| {
                generate_all(b.generator.as_ref(), &plan.variants, &caption, settings)
            });
            let batch = match batch {
                Ok(batch) => batch,
                Err(e) => {
                    s.fail(&format!("generate.{attempt}"), e.to_string());
                    continue;
                }
            };
            for f in &batch.failures {
                s.fail(
                    &format!("generate.{attempt}"),
                    format!("variant {} seed {}: {}", f.variant_id, f.seed, f.error),
                );
            }
            for c in &batch.candidates {
                s.manifest.candidates.push(CandidateRecord {
                    candidate_id: c.candidate_id.clone(),
                    variant_id: c.variant_id.clone(),
                    seed: c.seed,
                    attempt: c.attempt,
                    image: s.draft.put_image(&c.raster)?,
                    notes: c.notes.clone(),
                });
            }
            let reports = s.timed(&format!("quality.{attempt}"), |_| {
                evaluate_candidates(&batch.candidates, &caption, &scorers, &cfg.quality)
            });
            let selected = rank_and_select(&reports, &cfg.quality);
            s.manifest.quality_reports.extend(reports);
            if !selected.is_empty() {
                s.manifest.selected = selected;
                s.manifest.status = RunStatus::Completed;
                return Ok(());
            }
            s.manifest.status = RunStatus::CompletedEmpty;
            if attempt < MAX_ATTEMPTS {
                s.manifest
                    .warnings
                    .push(format!("no candidate passed quality control in pass {attempt}; regenerating"));
            }
        }
        if s.manifest.status == RunStatus::CompletedEmpty {
            s.manifest.warnings.push("no candidate passed quality control".into());
        } else {
            s.manifest.status = RunStatus::Failed;
        }
        Ok(())
    }
}

/// Fidelity of one run: the unfiltered baseline variant from the first pass
/// and the pipeline's top choice. A run without a selection scores 0 on both
/// metrics for the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEvaluation {
    pub baseline: FidelityRecord,
    pub pipeline: FidelityRecord,
}

pub fn evaluate_run(
    runs: &RunStore,
    manifest: &RunManifest,
    embedder: &dyn crate::backend::Embedder,
) -> Result<RunEvaluation> {
    let eval = &manifest.config_snapshot.evaluation;
    let baseline_variant = variant_id(eval.baseline_slot, eval.baseline_rotation_deg);
    let fidelity = |candidate_id: &str| -> Result<FidelityRecord> {
        let c = manifest
            .candidate(candidate_id)
            .ok_or_else(|| PipelineError::Manifest(format!("unknown candidate {candidate_id}")))?;
        let v = manifest
            .variant(&c.variant_id)
            .ok_or_else(|| PipelineError::Manifest(format!("unknown variant {}", c.variant_id)))?;
        let generated = runs.read_image(&manifest.run_id, &c.image)?;
        let reference = runs.read_image(&manifest.run_id, &v.composed_image)?;
        let mask = runs.read_mask(&manifest.run_id, &v.mask_image)?;
        object_fidelity(&manifest.run_id, &generated, &reference, &mask, v.placed_bbox, embedder)
    };
    let baseline_id = manifest
        .candidates
        .iter()
        .find(|c| c.variant_id == baseline_variant && c.attempt == 1)
        .map(|c| c.candidate_id.clone())
        .ok_or_else(|| {
            PipelineError::Manifest(format!(
                "{}: no first-pass candidate for baseline variant {baseline_variant}",
                manifest.run_id
            ))
        })?;
    let baseline = fidelity(&baseline_id)?;
    let pipeline = match manifest.selected.first() {
        Some(id) => fidelity(id)?,
        None => FidelityRecord {
            pair_id: manifest.run_id.clone(),
            ms_ssim: 0.0,
            embed_cosine: 0.0,
        },
    };
    Ok(RunEvaluation { baseline, pipeline })
}

/// [`evaluate_run`] over many runs in parallel, in input order.
pub fn evaluate_runs(
    runs: &RunStore,
    manifests: &[RunManifest],
    embedder: &dyn crate::backend::Embedder,
) -> Result<Vec<RunEvaluation>> {
    use rayon::prelude::*;
    manifests.par_iter().map(|m| evaluate_run(runs, m, embedder)).collect()
}
