//! Run manifests and their on-disk layout.
//!
//! Each run lives in `<runs_dir>/<run_id>/` with a `manifest.json` and an
//! `images/` directory of PNGs named by the SHA-256 of their bytes. Runs are
//! assembled in a hidden temporary directory and renamed into place when
//! complete, so readers never see a partial run.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::caption::SceneCaption;
use crate::composition::{BackgroundSource, ScaleAdvice, ScaleFactors, Slot};
use crate::config::PipelineConfig;
use crate::decompose::MarketingBrief;
use crate::error::{PipelineError, Result};
use crate::quality::QualityReport;
use crate::raster::{content_hash, Mask, Raster, Rect};
use crate::store::RetrievalRecord;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// At least one candidate was selected.
    Completed,
    /// Quality control kept nothing, after the regeneration pass.
    CompletedEmpty,
    /// A stage could not continue; see `failures`.
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSection {
    pub products: Vec<RetrievalRecord>,
    pub backgrounds: Vec<RetrievalRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_product: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_background: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanvasRecord {
    pub width: u32,
    pub height: u32,
    pub background_source: BackgroundSource,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub advice: ScaleAdvice,
    pub effective: ScaleFactors,
    pub reductions: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub variant_id: String,
    pub position_slot: Slot,
    pub rotation_deg: u32,
    pub scale: ScaleFactors,
    pub placed_bbox: Rect,
    /// Composition handed to the generator.
    pub composed_image: String,
    pub mask_image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub candidate_id: String,
    pub variant_id: String,
    pub seed: u64,
    pub attempt: u32,
    pub image: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub run_id: String,
    pub prompt: String,
    pub status: RunStatus,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub config_snapshot: PipelineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brief: Option<MarketingBrief>,
    pub retrieval: RetrievalSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<SceneCaption>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canvas: Option<CanvasRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<ScaleRecord>,
    pub variants: Vec<VariantRecord>,
    /// Generation passes run (1, or 2 after a regeneration).
    pub attempts: u32,
    pub candidates: Vec<CandidateRecord>,
    pub quality_reports: Vec<QualityReport>,
    /// Pipeline top-k, best first, from the final pass.
    pub selected: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_selection: Option<Vec<String>>,
    pub stage_timings: Vec<StageTiming>,
    pub failures: Vec<FailureRecord>,
    pub warnings: Vec<String>,
}

/// Short listing entry for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub prompt: String,
    pub status: RunStatus,
    pub created_at: u64,
    pub candidates: usize,
    pub selected: usize,
    pub human_selected: Option<usize>,
}

impl RunManifest {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            run_id: self.run_id.clone(),
            prompt: self.prompt.clone(),
            status: self.status,
            created_at: self.created_at,
            candidates: self.candidates.len(),
            selected: self.selected.len(),
            human_selected: self.human_selection.as_ref().map(Vec::len),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON with wall-clock fields zeroed, for reproducibility checks.
    pub fn canonical_json(&self) -> Result<String> {
        let mut m = self.clone();
        m.created_at = 0;
        m.config_snapshot = m.config_snapshot.portable();
        m.stage_timings.iter_mut().for_each(|t| t.millis = 0);
        m.to_json()
    }

    pub fn candidate(&self, id: &str) -> Option<&CandidateRecord> {
        self.candidates.iter().find(|c| c.candidate_id == id)
    }

    pub fn variant(&self, id: &str) -> Option<&VariantRecord> {
        self.variants.iter().find(|v| v.variant_id == id)
    }

    pub fn report(&self, id: &str) -> Option<&QualityReport> {
        self.quality_reports.iter().find(|r| r.candidate_id == id)
    }

    /// Image hashes referenced by the manifest.
    pub fn image_refs(&self) -> Vec<&str> {
        let mut refs: Vec<&str> = self.canvas.iter().map(|c| c.image.as_str()).collect();
        for v in &self.variants {
            refs.push(&v.composed_image);
            refs.push(&v.mask_image);
        }
        refs.extend(self.candidates.iter().map(|c| c.image.as_str()));
        refs
    }

    /// Checks that every id the manifest mentions resolves within it.
    pub fn check_integrity(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Manifest(format!("{}: {m}", self.run_id)));
        let variants: HashSet<&str> = self.variants.iter().map(|v| v.variant_id.as_str()).collect();
        if variants.len() != self.variants.len() {
            return bad("duplicate variant ids".into());
        }
        let mut candidates = HashSet::new();
        for c in &self.candidates {
            if !variants.contains(c.variant_id.as_str()) {
                return bad(format!("candidate {} names unknown variant {}", c.candidate_id, c.variant_id));
            }
            if !candidates.insert(c.candidate_id.as_str()) {
                return bad(format!("duplicate candidate id {}", c.candidate_id));
            }
        }
        let mut reported = HashSet::new();
        for r in &self.quality_reports {
            if !candidates.contains(r.candidate_id.as_str()) || !reported.insert(r.candidate_id.as_str()) {
                return bad(format!("quality report for unknown or repeated candidate {}", r.candidate_id));
            }
        }
        if let Some(id) = self.selected.iter().find(|id| !reported.contains(id.as_str())) {
            return bad(format!("selected candidate {id} has no quality report"));
        }
        if let Some(human) = &self.human_selection {
            if let Some(id) = human.iter().find(|id| !self.selected.contains(id)) {
                return bad(format!("human selection {id} is not among the selected candidates"));
            }
        }
        let ids: Vec<&str> = self.retrieval.products.iter().map(|r| r.asset_id.as_str()).collect();
        if let Some(p) = &self.retrieval.chosen_product {
            if !ids.contains(&p.as_str()) {
                return bad(format!("chosen product {p} is not among retrieved products"));
            }
        }
        if let Some(b) = &self.retrieval.chosen_background {
            if !self.retrieval.backgrounds.iter().any(|r| &r.asset_id == b) {
                return bad(format!("chosen background {b} is not among retrieved backgrounds"));
            }
        }
        if self.status == RunStatus::Completed && self.selected.is_empty() {
            return bad("completed run without selection".into());
        }
        Ok(())
    }
}

/// Content-addressed image name without extension.
pub fn image_key(png: &[u8]) -> String {
    content_hash(png)
}

fn valid_key(key: &str) -> bool {
    key.len() == 64 && key.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

/// Directory of persisted runs.
#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    write_lock: Mutex<()>,
}

/// A run being assembled in its temporary directory.
#[derive(Debug)]
pub struct RunDraft {
    run_id: String,
    dir: PathBuf,
}

impl RunDraft {
    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    fn put_png(&self, png: Vec<u8>) -> Result<String> {
        let key = image_key(&png);
        let path = self.dir.join(IMAGES_DIR).join(format!("{key}.png"));
        if !path.exists() {
            fs::write(&path, png).map_err(|e| PipelineError::io(&path, e))?;
        }
        Ok(key)
    }

    pub fn put_image(&self, raster: &Raster) -> Result<String> {
        self.put_png(raster.encode_png()?)
    }

    pub fn put_mask(&self, mask: &Mask) -> Result<String> {
        self.put_png(mask.encode_png()?)
    }
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| PipelineError::io(&root, e))?;
        Ok(Self { root, write_lock: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn run_dir(&self, run_id: &str) -> Result<PathBuf> {
        if !valid_run_id(run_id) {
            return Err(PipelineError::NotFound(format!("run {run_id:?}")));
        }
        Ok(self.root.join(run_id))
    }

    /// Reserves a run id derived from `base`, adding `-2`, `-3`, … when a
    /// run with that id already exists.
    pub fn begin(&self, base: &str) -> Result<RunDraft> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut n = 1;
        loop {
            let run_id = if n == 1 { base.to_string() } else { format!("{base}-{n}") };
            let tmp = self.root.join(format!(".{run_id}.tmp"));
            if !self.root.join(&run_id).exists() && !tmp.exists() {
                fs::create_dir_all(tmp.join(IMAGES_DIR)).map_err(|e| PipelineError::io(&tmp, e))?;
                return Ok(RunDraft { run_id, dir: tmp });
            }
            n += 1;
        }
    }

    /// Writes the manifest and moves the draft into place.
    pub fn commit(&self, draft: RunDraft, manifest: &RunManifest) -> Result<PathBuf> {
        if manifest.run_id != draft.run_id {
            return Err(PipelineError::Manifest("manifest run id does not match its draft".into()));
        }
        manifest.check_integrity()?;
        let path = draft.dir.join(MANIFEST_FILE);
        fs::write(&path, manifest.to_json()?).map_err(|e| PipelineError::io(&path, e))?;
        let dest = self.root.join(&draft.run_id);
        fs::rename(&draft.dir, &dest).map_err(|e| PipelineError::io(&dest, e))?;
        Ok(dest)
    }

    pub fn load(&self, run_id: &str) -> Result<RunManifest> {
        let path = self.run_dir(run_id)?.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => PipelineError::NotFound(format!("run {run_id}")),
            _ => PipelineError::io(&path, e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Summaries of all committed runs, newest first, then by id.
    pub fn list(&self) -> Result<Vec<RunSummary>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(|e| PipelineError::io(&self.root, e))? {
            let entry = entry.map_err(|e| PipelineError::io(&self.root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !valid_run_id(&name) || !entry.path().join(MANIFEST_FILE).is_file() {
                continue;
            }
            out.push(self.load(&name)?.summary());
        }
        out.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| a.run_id.cmp(&b.run_id)));
        Ok(out)
    }

    /// Path of an image belonging to `run_id`.
    pub fn image_path(&self, run_id: &str, key: &str) -> Result<PathBuf> {
        if !valid_key(key) {
            return Err(PipelineError::NotFound(format!("image {key:?}")));
        }
        let path = self.run_dir(run_id)?.join(IMAGES_DIR).join(format!("{key}.png"));
        if !path.is_file() {
            return Err(PipelineError::NotFound(format!("image {key}")));
        }
        Ok(path)
    }

    /// Finds an image by hash in any run.
    pub fn find_image(&self, key: &str) -> Result<PathBuf> {
        if !valid_key(key) {
            return Err(PipelineError::NotFound(format!("image {key:?}")));
        }
        for run in self.list()? {
            if let Ok(p) = self.image_path(&run.run_id, key) {
                return Ok(p);
            }
        }
        Err(PipelineError::NotFound(format!("image {key}")))
    }

    pub fn read_image(&self, run_id: &str, key: &str) -> Result<Raster> {
        let path = self.image_path(run_id, key)?;
        Raster::decode(&fs::read(&path).map_err(|e| PipelineError::io(&path, e))?)
    }

    pub fn read_mask(&self, run_id: &str, key: &str) -> Result<Mask> {
        let path = self.image_path(run_id, key)?;
        Mask::decode(&fs::read(&path).map_err(|e| PipelineError::io(&path, e))?)
    }

    /// Records the reviewer's final choice. Ids must come from the
    /// pipeline's selection; repeating the same request changes nothing.
    pub fn record_human_selection(&self, run_id: &str, candidate_ids: &[String]) -> Result<RunManifest> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut manifest = self.load(run_id)?;
        if candidate_ids.is_empty() {
            return Err(PipelineError::invalid("selection must name at least one candidate"));
        }
        let mut chosen: Vec<String> = Vec::new();
        for id in candidate_ids {
            if manifest.candidate(id).is_none() {
                return Err(PipelineError::invalid(format!("unknown candidate {id}")));
            }
            if !manifest.selected.contains(id) {
                return Err(PipelineError::invalid(format!(
                    "candidate {id} did not pass quality control"
                )));
            }
            if !chosen.contains(id) {
                chosen.push(id.clone());
            }
        }
        if manifest.human_selection.as_ref() == Some(&chosen) {
            return Ok(manifest);
        }
        manifest.human_selection = Some(chosen);
        manifest.check_integrity()?;
        let path = self.run_dir(run_id)?.join(MANIFEST_FILE);
        write_atomic(&path, manifest.to_json()?.as_bytes())?;
        Ok(manifest)
    }

    /// Integrity of the manifest plus presence of every referenced image.
    pub fn verify(&self, run_id: &str) -> Result<RunManifest> {
        let manifest = self.load(run_id)?;
        manifest.check_integrity()?;
        for key in manifest.image_refs() {
            self.image_path(run_id, key)
                .map_err(|_| PipelineError::Manifest(format!("{run_id}: missing image {key}")))?;
        }
        Ok(manifest)
    }
}
