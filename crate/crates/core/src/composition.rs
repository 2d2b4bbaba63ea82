//! Product scale advice and placement/rotation variants on the canvas.

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::backend::{SchemaId, StructuredLlm, TextCompletionRequest};
use crate::caption::SceneCaption;
use crate::error::{PipelineError, Result};
use crate::prompts::{self, label};
use crate::raster::{Mask, Raster, Rect, WHITE};
use crate::store::Asset;

pub const DEFAULT_CANVAS_SIZE: u32 = 1024;
pub const DEFAULT_ROTATIONS: [u32; 3] = [0, 15, 345];
pub const DEFAULT_SCALE_BOUNDS: (f64, f64) = (0.1, 0.8);
pub const DEFAULT_VERTICAL_ANCHOR: f64 = 0.85;
pub const FALLBACK_SCALE: f64 = 0.33;
const REDUCTION_FACTOR: f64 = 0.95;
const MAX_REDUCTIONS: u32 = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundSource {
    Empty,
    Asset { asset_id: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub raster: Raster,
    pub background_source: BackgroundSource,
    /// Human-readable description sent to the advisor.
    pub description: String,
}

impl Canvas {
    /// Plain white canvas.
    pub fn empty(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(PipelineError::invalid("canvas must be non-empty"));
        }
        Ok(Self {
            raster: Raster::filled(width, height, WHITE),
            background_source: BackgroundSource::Empty,
            description: "empty".into(),
        })
    }

    /// Background asset resized to the canvas and flattened onto white.
    pub fn from_background(background: &Asset, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(PipelineError::invalid("canvas must be non-empty"));
        }
        let resized = background.raster.resize_bilinear(width, height);
        let raster = if resized.has_alpha() {
            resized.flatten_onto([255, 255, 255])
        } else {
            resized
        };
        Ok(Self {
            raster,
            background_source: BackgroundSource::Asset {
                asset_id: background.asset_id.clone(),
            },
            description: background.label.clone(),
        })
    }

    pub fn width(&self) -> u32 {
        self.raster.width()
    }

    pub fn height(&self) -> u32 {
        self.raster.height()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactors {
    pub s_w: f64,
    pub s_h: f64,
}

impl ScaleFactors {
    pub fn new(s_w: f64, s_h: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0 && v <= 1.0;
        if !ok(s_w) || !ok(s_h) {
            return Err(PipelineError::invalid(format!(
                "scale factors must lie in (0, 1], got ({s_w}, {s_h})"
            )));
        }
        Ok(Self { s_w, s_h })
    }

    fn times(self, f: f64) -> Self {
        Self {
            s_w: self.s_w * f,
            s_h: self.s_h * f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleAdvice {
    pub scale: ScaleFactors,
    /// Backend failed; the default scale was used.
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Left,
    Center,
    Right,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Left, Slot::Center, Slot::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Left => "left",
            Self::Center => "center",
            Self::Right => "right",
        }
    }

    /// Horizontal centre as a fraction of canvas width (midpoint of a third).
    pub fn center_fraction(self) -> f64 {
        match self {
            Self::Left => 1.0 / 6.0,
            Self::Center => 0.5,
            Self::Right => 5.0 / 6.0,
        }
    }
}

impl std::fmt::Display for Slot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub canvas_width: u32,
    pub canvas_height: u32,
    pub slots: Vec<Slot>,
    /// Counterclockwise degrees in `0..360`.
    pub rotations_deg: Vec<u32>,
    pub scale_bounds: (f64, f64),
    /// Product bottom edge as a fraction of canvas height.
    pub vertical_anchor: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            canvas_width: DEFAULT_CANVAS_SIZE,
            canvas_height: DEFAULT_CANVAS_SIZE,
            slots: Slot::ALL.to_vec(),
            rotations_deg: DEFAULT_ROTATIONS.to_vec(),
            scale_bounds: DEFAULT_SCALE_BOUNDS,
            vertical_anchor: DEFAULT_VERTICAL_ANCHOR,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_bounds;
        if self.canvas_width == 0 || self.canvas_height == 0 {
            return Err(PipelineError::Config("plan canvas size must be positive".into()));
        }
        if self.slots.is_empty() || self.rotations_deg.is_empty() {
            return Err(PipelineError::Config("plan needs at least one slot and one rotation".into()));
        }
        if let Some(r) = self.rotations_deg.iter().find(|r| **r >= 360) {
            return Err(PipelineError::Config(format!("rotation {r} must be below 360 degrees")));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(PipelineError::Config(format!("invalid scale bounds ({lo}, {hi})")));
        }
        if !(0.0..=1.0).contains(&self.vertical_anchor) {
            return Err(PipelineError::Config("vertical anchor must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionVariant {
    pub variant_id: String,
    pub position_slot: Slot,
    pub rotation_deg: u32,
    pub scale: ScaleFactors,
    pub placed_bbox: Rect,
    pub composed: Raster,
    pub mask: Mask,
}

pub fn variant_id(slot: Slot, rotation_deg: u32) -> String {
    format!("{slot}-r{rotation_deg}")
}

/// Variants plus how the scale had to be reduced to fit.
#[derive(Debug, Clone)]
pub struct VariantPlan {
    pub variants: Vec<CompositionVariant>,
    pub requested_scale: ScaleFactors,
    pub effective_scale: ScaleFactors,
    pub scale_reductions: u32,
}

fn advisor_request(canvas: &Canvas, product: &Asset, caption: &SceneCaption) -> Result<TextCompletionRequest> {
    let user = [
        prompts::field(label::CANVAS_SIZE, format!("{}x{}", canvas.width(), canvas.height())),
        prompts::field(label::CANVAS_BACKGROUND, &canvas.description),
        prompts::field(label::PRODUCT, &product.label),
        prompts::field(label::PRODUCT_CATEGORY, &product.category),
        prompts::field(
            label::PRODUCT_SIZE,
            format!("{}x{}", product.raster.width(), product.raster.height()),
        ),
        prompts::field(label::CAPTION, &caption.text),
        prompts::field(label::OUTPUT_FORMAT, SchemaId::ScaleAdvice.describe()),
    ]
    .join("\n");
    Ok(TextCompletionRequest::new(prompts::ADVISOR_SYSTEM, user, SchemaId::ScaleAdvice)?
        .with_image(canvas.raster.clone())
        .with_image(product.raster.clone()))
}

/// Asks the advisor for the product's size relative to the canvas and clamps
/// the answer into `bounds`. Backend failure yields the default scale.
pub fn advise_scale(
    llm: &StructuredLlm,
    canvas: &Canvas,
    product: &Asset,
    caption: &SceneCaption,
    bounds: (f64, f64),
) -> ScaleAdvice {
    let (lo, hi) = bounds;
    let reply = advisor_request(canvas, product, caption)
        .and_then(|req| Ok(llm.complete(&req)?));
    let value = match reply {
        Ok(v) => v,
        Err(e) => {
            warn!(error = %e, "scale advisor failed, using default scale");
            let d = FALLBACK_SCALE.clamp(lo, hi);
            return ScaleAdvice {
                scale: ScaleFactors { s_w: d, s_h: d },
                fallback: true,
                warnings: vec![format!("default scale used: {e}")],
            };
        }
    };
    let mut warnings = Vec::new();
    let mut clamp = |name: &str, v: f64| {
        let c = if v.is_finite() { v.clamp(lo, hi) } else { lo };
        if c != v {
            warn!(factor = name, value = v, clamped = c, "advisor scale out of bounds");
            warnings.push(format!("{name} = {v} clamped to {c}"));
        }
        c
    };
    let s_w = clamp("s_w", value["s_w"].as_f64().unwrap_or(f64::NAN));
    let s_h = clamp("s_h", value["s_h"].as_f64().unwrap_or(f64::NAN));
    ScaleAdvice {
        scale: ScaleFactors { s_w, s_h },
        fallback: false,
        warnings,
    }
}

/// Product size in pixels after scaling: `floor(s · canvas)`, at least 1.
pub fn scaled_size(scale: ScaleFactors, canvas_w: u32, canvas_h: u32) -> (u32, u32) {
    let w = (scale.s_w * canvas_w as f64).floor().max(1.0) as u32;
    let h = (scale.s_h * canvas_h as f64).floor().max(1.0) as u32;
    (w, h)
}

/// Bounding box of a `width × height` rectangle rotated by `deg`.
pub fn rotated_size(width: u32, height: u32, deg: u32) -> (u32, u32) {
    if deg % 360 == 0 {
        return (width, height);
    }
    let t = (deg as f64).to_radians();
    let (c, s) = (t.cos().abs(), t.sin().abs());
    let (w, h) = (width as f64, height as f64);
    // The epsilon keeps exact right angles from rounding up a pixel.
    let ext = |v: f64| ((v - 1e-9).ceil().max(1.0)) as u32;
    (ext(w * c + h * s), ext(w * s + h * c))
}

/// Rotates `product` counterclockwise by `deg` about its centre into its
/// bounding box. Colour is sampled bilinearly; the footprint mask by nearest
/// neighbour, and the returned alpha is positive exactly where the mask is set.
pub fn rotate_product(product: &Raster, deg: u32) -> (Raster, Mask) {
    let (w, h) = product.dimensions();
    if deg % 360 == 0 {
        let mut mask = Mask::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                mask.set(x, y, product.pixel(x, y)[3] > 0);
            }
        }
        return (product.clone(), mask);
    }
    let (ow, oh) = rotated_size(w, h, deg);
    let t = (deg as f64).to_radians();
    let (cos, sin) = (t.cos(), t.sin());
    let mut out = Raster::filled(ow, oh, [0, 0, 0, 0]);
    let mut mask = Mask::empty(ow, oh);
    let (icx, icy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (ocx, ocy) = (ow as f64 / 2.0, oh as f64 / 2.0);
    for y in 0..oh {
        for x in 0..ow {
            let dx = x as f64 + 0.5 - ocx;
            let dy = y as f64 + 0.5 - ocy;
            // Inverse of a counterclockwise turn on a y-down grid.
            let sx = icx + dx * cos - dy * sin;
            let sy = icy + dx * sin + dy * cos;
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let nearest = product.pixel(sx as u32, sy as u32);
            if nearest[3] == 0 {
                continue;
            }
            mask.set(x, y, true);
            let mut px = sample_transparent_border(product, sx - 0.5, sy - 0.5);
            if px[3] == 0 {
                px = [nearest[0], nearest[1], nearest[2], 1];
            }
            out.put_pixel(x, y, px);
        }
    }
    (out, mask)
}

/// Bilinear premultiplied sample where taps outside the raster are transparent.
fn sample_transparent_border(r: &Raster, fx: f64, fy: f64) -> [u8; 4] {
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let mut acc = [0.0f64; 4];
    for (ox, oy, wgt) in [
        (0.0, 0.0, (1.0 - tx) * (1.0 - ty)),
        (1.0, 0.0, tx * (1.0 - ty)),
        (0.0, 1.0, (1.0 - tx) * ty),
        (1.0, 1.0, tx * ty),
    ] {
        let (x, y) = (x0 + ox, y0 + oy);
        if x < 0.0 || y < 0.0 || x >= r.width() as f64 || y >= r.height() as f64 {
            continue;
        }
        let p = r.pixel(x as u32, y as u32);
        let a = p[3] as f64 / 255.0;
        for c in 0..3 {
            acc[c] += wgt * p[c] as f64 * a;
        }
        acc[3] += wgt * a;
    }
    crate::raster::unpremultiply(acc)
}

/// Product resized by `scale` relative to a canvas and rotated by `deg`,
/// with its footprint mask.
pub fn transform_product(
    product: &Raster,
    scale: ScaleFactors,
    deg: u32,
    canvas_w: u32,
    canvas_h: u32,
) -> (Raster, Mask) {
    let (w, h) = scaled_size(scale, canvas_w, canvas_h);
    let resized = product.clone().with_alpha().resize_bilinear(w, h);
    rotate_product(&resized, deg)
}

/// Top-left corner for a `w × h` footprint in `slot`, bottom edge at the
/// vertical anchor, clamped into the canvas.
pub fn slot_origin(slot: Slot, w: u32, h: u32, canvas_w: u32, canvas_h: u32, anchor: f64) -> (u32, u32) {
    let cx = slot.center_fraction() * canvas_w as f64;
    let left = (cx - w as f64 / 2.0).round();
    let top = (anchor * canvas_h as f64).round() - h as f64;
    let max_x = canvas_w.saturating_sub(w) as f64;
    let max_y = canvas_h.saturating_sub(h) as f64;
    (left.clamp(0.0, max_x) as u32, top.clamp(0.0, max_y) as u32)
}

fn fits(scale: ScaleFactors, rotations: &[u32], canvas_w: u32, canvas_h: u32) -> bool {
    let (w, h) = scaled_size(scale, canvas_w, canvas_h);
    rotations.iter().all(|&deg| {
        let (rw, rh) = rotated_size(w, h, deg);
        rw <= canvas_w && rh <= canvas_h
    })
}

/// Alpha-composites the transformed product over the canvas.
pub fn composite(
    canvas: &Canvas,
    product: &Raster,
    slot: Slot,
    rotation_deg: u32,
    scale: ScaleFactors,
    vertical_anchor: f64,
) -> Result<(Raster, Mask, Rect)> {
    let (cw, ch) = canvas.raster.dimensions();
    let (rotated, footprint) = transform_product(product, scale, rotation_deg, cw, ch);
    let (w, h) = rotated.dimensions();
    if w > cw || h > ch {
        return Err(PipelineError::invalid(format!(
            "product {w}x{h} does not fit canvas {cw}x{ch}"
        )));
    }
    let (x, y) = slot_origin(slot, w, h, cw, ch, vertical_anchor);
    let mut composed = canvas.raster.clone();
    composed.draw_over(&rotated, x, y);
    let mut mask = Mask::empty(cw, ch);
    mask.stamp(&footprint, x, y);
    Ok((composed, mask, Rect::new(x, y, w, h)))
}

/// Every slot × rotation variant in configuration order (slots outer,
/// rotations inner). When a rotated product would overflow the canvas the
/// scale is shrunk uniformly by 5 % steps, at most 20 times.
pub fn enumerate_variants(
    canvas: &Canvas,
    product: &Asset,
    scale: ScaleFactors,
    config: &PlanConfig,
) -> Result<VariantPlan> {
    if !product.raster.has_alpha() {
        return Err(PipelineError::invalid(format!(
            "product {} has no alpha channel",
            product.asset_id
        )));
    }
    let (cw, ch) = canvas.raster.dimensions();
    let mut effective = scale;
    let mut reductions = 0;
    while !fits(effective, &config.rotations_deg, cw, ch) {
        if reductions == MAX_REDUCTIONS {
            return Err(PipelineError::invalid(format!(
                "product does not fit the canvas after {MAX_REDUCTIONS} scale reductions"
            )));
        }
        effective = effective.times(REDUCTION_FACTOR);
        reductions += 1;
    }
    if reductions > 0 {
        debug!(reductions, ?effective, "scale reduced to fit rotations");
    }

    let mut variants = Vec::with_capacity(config.slots.len() * config.rotations_deg.len());
    for &slot in &config.slots {
        for &deg in &config.rotations_deg {
            let (composed, mask, bbox) =
                composite(canvas, &product.raster, slot, deg, effective, config.vertical_anchor)?;
            variants.push(CompositionVariant {
                variant_id: variant_id(slot, deg),
                position_slot: slot,
                rotation_deg: deg,
                scale: effective,
                placed_bbox: bbox,
                composed,
                mask,
            });
        }
    }
    Ok(VariantPlan {
        variants,
        requested_scale: scale,
        effective_scale: effective,
        scale_reductions: reductions,
    })
}
