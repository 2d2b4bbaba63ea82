//! Product and background asset catalog with exact cosine retrieval.
//!
//! The store is an append-only file of length-prefixed binary records with an
//! in-memory index rebuilt on open:
//!
//! ```text
//! header  := "CPST1" u16:tag_len tag u32:dimension
//! record  := u32:payload_len payload
//! payload := u16:id_len id  u8:kind  u32:label_len label  u32:category_len category
//!            u32:image_len png_bytes  u32:dimension f32[dimension]
//! ```
//!
//! All integers and floats are little-endian. `kind` is 0 for products and 1
//! for backgrounds. Embeddings are stored as 32-bit floats.

use std::collections::{HashSet, VecDeque};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::backend::{
    cosine, BackendError, Embedder, EmbeddingVector, SchemaId, StructuredLlm,
    TextCompletionRequest,
};
use crate::decompose::MarketingBrief;
use crate::error::{PipelineError, Result};
use crate::prompts::{self, label};
use crate::raster::{content_hash, Raster};

pub const STORE_MAGIC: &[u8; 5] = b"CPST1";
/// Product similarity threshold τ_p.
pub const DEFAULT_PRODUCT_THRESHOLD: f64 = 0.39;
pub const DEFAULT_BACKGROUND_K: usize = 5;

/// Channel value at or above which a border-connected pixel counts as the
/// white studio background of an opaque product photo.
const WHITE_KEY_THRESHOLD: u8 = 245;
const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetKind {
    Product,
    Background,
}

impl AssetKind {
    fn code(self) -> u8 {
        match self {
            Self::Product => 0,
            Self::Background => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Product),
            1 => Some(Self::Background),
            _ => None,
        }
    }
}

impl std::str::FromStr for AssetKind {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "product" => Ok(Self::Product),
            "background" => Ok(Self::Background),
            other => Err(PipelineError::invalid(format!("unknown asset kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Asset {
    pub asset_id: String,
    pub kind: AssetKind,
    pub raster: Raster,
    pub embedding: EmbeddingVector,
    pub label: String,
    pub category: String,
}

#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub asset: Arc<Asset>,
    pub similarity: f64,
    /// Present for backgrounds only.
    pub validator_verdict: Option<u8>,
}

/// Serializable summary of a [`RetrievalResult`] (no pixels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub asset_id: String,
    pub kind: AssetKind,
    pub label: String,
    pub category: String,
    pub similarity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validator_verdict: Option<u8>,
}

impl From<&RetrievalResult> for RetrievalRecord {
    fn from(r: &RetrievalResult) -> Self {
        Self {
            asset_id: r.asset.asset_id.clone(),
            kind: r.asset.kind,
            label: r.asset.label.clone(),
            category: r.asset.category.clone(),
            similarity: r.similarity,
            validator_verdict: r.validator_verdict,
        }
    }
}

/// Optional `<image stem>.json` next to an ingested image.
#[derive(Debug, Default, Deserialize)]
struct Sidecar {
    label: Option<String>,
    category: Option<String>,
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub ingested: usize,
    pub already_present: usize,
    pub warnings: Vec<String>,
}

/// Outcome of validator-gated background retrieval.
#[derive(Debug, Clone, Default)]
pub struct BackgroundRetrieval {
    /// Top-k candidates in similarity order, each with its verdict.
    pub candidates: Vec<RetrievalResult>,
    /// Validator calls that failed; those candidates were given verdict 0.
    pub failures: Vec<(String, BackendError)>,
}

impl BackgroundRetrieval {
    /// Candidates the validator accepted, in similarity order.
    pub fn accepted(&self) -> impl Iterator<Item = &RetrievalResult> {
        self.candidates
            .iter()
            .filter(|r| r.validator_verdict == Some(1))
    }
}

struct Entry {
    asset: Arc<Asset>,
    png: Vec<u8>,
}

struct Inner {
    entries: Vec<Entry>,
    ids: HashSet<String>,
}

pub struct AssetStore {
    path: PathBuf,
    model_tag: String,
    dimension: usize,
    inner: RwLock<Inner>,
}

impl std::fmt::Debug for AssetStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AssetStore")
            .field("path", &self.path)
            .field("model_tag", &self.model_tag)
            .field("len", &self.len())
            .finish()
    }
}

fn store_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Store(msg.into())
}

impl AssetStore {
    /// Opens the store at `path`, creating it when missing. The embedding
    /// model tag and dimension must match those the file was created with.
    pub fn open(path: impl AsRef<Path>, model_tag: &str, dimension: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if !path.exists() {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
            }
            fs::write(&path, encode_header(model_tag, dimension))
                .map_err(|e| PipelineError::io(&path, e))?;
        }
        let bytes = fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
        let (tag, dim, entries) = decode_store(&bytes)?;
        if tag != model_tag || dim != dimension {
            return Err(store_err(format!(
                "store {} holds {tag}/{dim} embeddings, backend provides {model_tag}/{dimension}",
                path.display()
            )));
        }
        let ids = entries.iter().map(|e| e.asset.asset_id.clone()).collect();
        Ok(Self {
            path,
            model_tag: tag,
            dimension: dim,
            inner: RwLock::new(Inner { entries, ids }),
        })
    }

    /// Opens an existing store, taking tag and dimension from its header.
    pub fn open_existing(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
        let (tag, dim, _) = decode_store(&bytes)?;
        Self::open(path, &tag, dim)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn len(&self) -> usize {
        self.read().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, asset_id: &str) -> bool {
        self.read().ids.contains(asset_id)
    }

    pub fn get(&self, asset_id: &str) -> Option<Arc<Asset>> {
        self.read()
            .entries
            .iter()
            .find(|e| e.asset.asset_id == asset_id)
            .map(|e| e.asset.clone())
    }

    pub fn assets(&self, kind: AssetKind) -> Vec<Arc<Asset>> {
        self.read()
            .entries
            .iter()
            .filter(|e| e.asset.kind == kind)
            .map(|e| e.asset.clone())
            .collect()
    }

    /// Appends assets not yet present. Embeddings are stored at `f32`
    /// precision; the in-memory copy is quantized the same way so reopened
    /// stores behave identically. Returns how many were new.
    pub fn insert_all(&self, assets: Vec<Asset>) -> Result<usize> {
        let mut inner = self.inner.write().unwrap_or_else(|e| e.into_inner());
        let mut file = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| PipelineError::io(&self.path, e))?;
        let mut added = 0;
        for mut asset in assets {
            if inner.ids.contains(&asset.asset_id) {
                continue;
            }
            if asset.embedding.model_tag() != self.model_tag
                || asset.embedding.dimension() != self.dimension
            {
                return Err(store_err(format!(
                    "asset {} has a {}/{} embedding, store expects {}/{}",
                    asset.asset_id,
                    asset.embedding.model_tag(),
                    asset.embedding.dimension(),
                    self.model_tag,
                    self.dimension
                )));
            }
            asset.embedding = asset.embedding.quantized();
            let png = asset.raster.encode_png()?;
            let record = encode_record(&asset, &png)?;
            file.write_all(&record)
                .map_err(|e| PipelineError::io(&self.path, e))?;
            inner.ids.insert(asset.asset_id.clone());
            inner.entries.push(Entry {
                asset: Arc::new(asset),
                png,
            });
            added += 1;
        }
        file.sync_data().map_err(|e| PipelineError::io(&self.path, e))?;
        Ok(added)
    }

    pub fn insert(&self, asset: Asset) -> Result<bool> {
        Ok(self.insert_all(vec![asset])? == 1)
    }

    /// Full serialization of the current contents.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let inner = self.read();
        let mut out = encode_header(&self.model_tag, self.dimension);
        for e in &inner.entries {
            out.extend(encode_record(&e.asset, &e.png)?);
        }
        Ok(out)
    }

    /// Ingests every image file in `dir` (non-recursive, name order).
    ///
    /// Asset ids are content hashes of the source file, so re-ingesting a
    /// file is a no-op. Files that cannot be decoded produce a warning and
    /// are skipped.
    pub fn ingest(&self, dir: &Path, kind: AssetKind, embedder: &dyn Embedder) -> Result<IngestReport> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| PipelineError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();

        let mut report = IngestReport::default();
        let mut batch = Vec::new();
        let mut seen = HashSet::new();
        for file in files {
            let bytes = fs::read(&file).map_err(|e| PipelineError::io(&file, e))?;
            let asset_id = content_hash(&bytes)[..16].to_string();
            if self.contains(&asset_id) || !seen.insert(asset_id.clone()) {
                report.already_present += 1;
                continue;
            }
            let raster = match Raster::decode(&bytes) {
                Ok(r) => r,
                Err(e) => {
                    let msg = format!("skipping {}: {e}", file.display());
                    warn!("{msg}");
                    report.warnings.push(msg);
                    continue;
                }
            };
            let raster = match kind {
                AssetKind::Product if !raster.has_alpha() => key_out_white_background(&raster),
                _ => raster,
            };
            let sidecar = read_sidecar(&file, &mut report.warnings);
            let label = sidecar.label.unwrap_or_else(|| label_from_file_name(&file));
            let category = sidecar.category.unwrap_or_default();
            let embedding = asset_embedding(embedder, &raster, &label)?;
            batch.push(Asset {
                asset_id,
                kind,
                raster,
                embedding,
                label,
                category,
            });
        }
        report.ingested = self.insert_all(batch)?;
        info!(dir = %dir.display(), ?kind, ingested = report.ingested, "ingest finished");
        Ok(report)
    }

    /// Exact scan: assets of `kind` with cosine ≥ `threshold`, sorted by
    /// similarity descending then asset id ascending, at most `limit`.
    pub fn search(
        &self,
        query: &EmbeddingVector,
        kind: AssetKind,
        threshold: f64,
        limit: usize,
    ) -> Result<Vec<RetrievalResult>> {
        if query.model_tag() != self.model_tag || query.dimension() != self.dimension {
            return Err(store_err(format!(
                "query embedding {}/{} does not match store {}/{}",
                query.model_tag(),
                query.dimension(),
                self.model_tag,
                self.dimension
            )));
        }
        let inner = self.read();
        let mut hits: Vec<RetrievalResult> = inner
            .entries
            .iter()
            .filter(|e| e.asset.kind == kind)
            .map(|e| RetrievalResult {
                asset: e.asset.clone(),
                similarity: cosine(query.values(), e.asset.embedding.values()),
                validator_verdict: None,
            })
            .filter(|r| r.similarity >= threshold)
            .collect();
        hits.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.asset.asset_id.cmp(&b.asset.asset_id))
        });
        hits.truncate(limit);
        Ok(hits)
    }

    /// Products similar to the brief's primary product, filtered by
    /// `threshold` (inclusive).
    pub fn retrieve_products(
        &self,
        brief: &MarketingBrief,
        limit: usize,
        threshold: f64,
        embedder: &dyn Embedder,
    ) -> Result<Vec<RetrievalResult>> {
        let query = embedder.embed_text(&brief.primary_product)?;
        self.search(&query, AssetKind::Product, threshold, limit.max(1))
    }

    /// Top-`k` backgrounds by similarity, each judged by the validator.
    /// A brief without background elements or theme retrieves nothing.
    pub fn retrieve_backgrounds(
        &self,
        brief: &MarketingBrief,
        k: usize,
        embedder: &dyn Embedder,
        validator: &StructuredLlm,
    ) -> Result<BackgroundRetrieval> {
        let query_text = brief.background_query();
        if query_text.is_empty() {
            return Ok(BackgroundRetrieval::default());
        }
        let query = embedder.embed_text(&query_text)?;
        let mut out = BackgroundRetrieval::default();
        for mut candidate in self.search(&query, AssetKind::Background, f64::NEG_INFINITY, k)? {
            let verdict = validate_background(validator, brief, &candidate.asset);
            candidate.validator_verdict = Some(match verdict {
                Ok(v) => v,
                Err(e) => {
                    warn!(asset = %candidate.asset.asset_id, error = %e, "background validation failed");
                    out.failures.push((candidate.asset.asset_id.clone(), e));
                    0
                }
            });
            out.candidates.push(candidate);
        }
        Ok(out)
    }
}

fn validate_background(
    validator: &StructuredLlm,
    brief: &MarketingBrief,
    candidate: &Asset,
) -> std::result::Result<u8, BackendError> {
    let user = [
        prompts::field(label::PROMPT, brief.source_prompt.split_whitespace().collect::<Vec<_>>().join(" ")),
        prompts::field(label::PRIMARY_PRODUCT, &brief.primary_product),
        prompts::field(label::BACKGROUND_ELEMENTS, &brief.background_elements),
        prompts::field(label::THEME, &brief.theme),
        prompts::field(label::CANDIDATE_BACKGROUND, &candidate.label),
        prompts::field(label::CANDIDATE_CATEGORY, &candidate.category),
        prompts::field(label::OUTPUT_FORMAT, SchemaId::BackgroundVerdict.describe()),
    ]
    .join("\n");
    let request = TextCompletionRequest::new(prompts::VALIDATOR_SYSTEM, user, SchemaId::BackgroundVerdict)?
        .with_image(candidate.raster.clone());
    let value = validator.complete(&request)?;
    Ok(value["verdict"].as_u64().unwrap_or(0) as u8)
}

/// Embedding stored for an asset: the image embedding, fused with the label's
/// text embedding when a label is present, renormalised.
pub fn asset_embedding(embedder: &dyn Embedder, raster: &Raster, label: &str) -> Result<EmbeddingVector> {
    let image = embedder.embed_image(raster)?;
    if label.trim().is_empty() {
        return Ok(image);
    }
    let text = embedder.embed_text(label)?;
    let fused: Vec<f64> = image
        .values()
        .iter()
        .zip(text.values())
        .map(|(a, b)| a / image.norm() + b / text.norm())
        .collect();
    let norm = fused.iter().map(|v| v * v).sum::<f64>().sqrt();
    let values = if norm > 0.0 {
        fused.into_iter().map(|v| v / norm).collect()
    } else {
        image.values().to_vec()
    };
    Ok(EmbeddingVector::new(values, image.model_tag())?)
}

fn label_from_file_name(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn read_sidecar(image: &Path, warnings: &mut Vec<String>) -> Sidecar {
    let path = image.with_extension("json");
    let Ok(text) = fs::read_to_string(&path) else {
        return Sidecar::default();
    };
    serde_json::from_str(&text).unwrap_or_else(|e| {
        let msg = format!("ignoring malformed sidecar {}: {e}", path.display());
        warn!("{msg}");
        warnings.push(msg);
        Sidecar::default()
    })
}

/// Makes the near-white region connected to the image border transparent.
/// Near-white pixels enclosed by the product stay opaque.
pub fn key_out_white_background(raster: &Raster) -> Raster {
    let (w, h) = raster.dimensions();
    let mut out = raster.clone().with_alpha();
    let is_white = |p: [u8; 4]| p[..3].iter().all(|&c| c >= WHITE_KEY_THRESHOLD);
    let mut visited = vec![false; w as usize * h as usize];
    let mut queue = VecDeque::new();
    let push = |x: u32, y: u32, visited: &mut Vec<bool>, queue: &mut VecDeque<(u32, u32)>| {
        let i = y as usize * w as usize + x as usize;
        if !visited[i] && is_white(raster.pixel(x, y)) {
            visited[i] = true;
            queue.push_back((x, y));
        }
    };
    for x in 0..w {
        push(x, 0, &mut visited, &mut queue);
        push(x, h - 1, &mut visited, &mut queue);
    }
    for y in 0..h {
        push(0, y, &mut visited, &mut queue);
        push(w - 1, y, &mut visited, &mut queue);
    }
    while let Some((x, y)) = queue.pop_front() {
        out.put_pixel(x, y, [255, 255, 255, 0]);
        if x > 0 {
            push(x - 1, y, &mut visited, &mut queue);
        }
        if x + 1 < w {
            push(x + 1, y, &mut visited, &mut queue);
        }
        if y > 0 {
            push(x, y - 1, &mut visited, &mut queue);
        }
        if y + 1 < h {
            push(x, y + 1, &mut visited, &mut queue);
        }
    }
    out
}

fn encode_header(model_tag: &str, dimension: usize) -> Vec<u8> {
    let mut out = STORE_MAGIC.to_vec();
    out.extend((model_tag.len() as u16).to_le_bytes());
    out.extend(model_tag.as_bytes());
    out.extend((dimension as u32).to_le_bytes());
    out
}

fn put_bytes_u32(out: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| store_err("field exceeds 4 GiB"))?;
    out.extend(len.to_le_bytes());
    out.extend(bytes);
    Ok(())
}

fn encode_record(asset: &Asset, png: &[u8]) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(png.len() + 64 + asset.embedding.dimension() * 4);
    let id_len = u16::try_from(asset.asset_id.len()).map_err(|_| store_err("asset id too long"))?;
    payload.extend(id_len.to_le_bytes());
    payload.extend(asset.asset_id.as_bytes());
    payload.push(asset.kind.code());
    put_bytes_u32(&mut payload, asset.label.as_bytes())?;
    put_bytes_u32(&mut payload, asset.category.as_bytes())?;
    put_bytes_u32(&mut payload, png)?;
    payload.extend((asset.embedding.dimension() as u32).to_le_bytes());
    for v in asset.embedding.values() {
        payload.extend((*v as f32).to_le_bytes());
    }
    let mut out = Vec::with_capacity(payload.len() + 4);
    put_bytes_u32(&mut out, &payload)?;
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| store_err(format!("truncated store at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| store_err("invalid utf-8 in store"))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode_store(bytes: &[u8]) -> Result<(String, usize, Vec<Entry>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(STORE_MAGIC.len())? != STORE_MAGIC {
        return Err(store_err("not an asset store (bad magic)"));
    }
    let tag_len = r.u16()? as usize;
    let tag = r.string(tag_len)?;
    let dimension = r.u32()? as usize;
    let mut entries = Vec::new();
    while !r.done() {
        let len = r.u32()? as usize;
        let mut rec = Reader {
            bytes: r.take(len)?,
            pos: 0,
        };
        let id_len = rec.u16()? as usize;
        let asset_id = rec.string(id_len)?;
        let kind = AssetKind::from_code(rec.u8()?).ok_or_else(|| store_err("unknown asset kind code"))?;
        let label_len = rec.u32()? as usize;
        let label = rec.string(label_len)?;
        let category_len = rec.u32()? as usize;
        let category = rec.string(category_len)?;
        let png_len = rec.u32()? as usize;
        let png = rec.take(png_len)?.to_vec();
        let dim = rec.u32()? as usize;
        if dim != dimension {
            return Err(store_err(format!("record {asset_id} has dimension {dim}, header says {dimension}")));
        }
        let values = rec
            .take(dim * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if !rec.done() {
            return Err(store_err(format!("trailing bytes in record {asset_id}")));
        }
        let mut raster = Raster::decode(&png)?;
        if kind == AssetKind::Product {
            raster = raster.with_alpha();
        }
        let embedding = EmbeddingVector::new(values, tag.clone())?;
        entries.push(Entry {
            asset: Arc::new(Asset {
                asset_id,
                kind,
                raster,
                embedding,
                label,
                category,
            }),
            png,
        });
    }
    Ok((tag, dimension, entries))
}
