//! 8-bit RGBA rasters and single-channel masks.
//!
//! [`Raster`] is the pixel currency of the whole pipeline: assets, canvases,
//! composed variants and generated candidates are all rasters. Pixels are
//! stored row-major, four bytes per pixel, straight (non-premultiplied) alpha.

use std::fmt;
use std::io::Cursor;

use image::{DynamicImage, ImageFormat, RgbaImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub const WHITE: [u8; 4] = [255, 255, 255, 255];
pub const TRANSPARENT: [u8; 4] = [0, 0, 0, 0];

/// Hex SHA-256 of arbitrary bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Axis-aligned integer rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    pub fn right(&self) -> u32 {
        self.x + self.width
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    /// True when this rectangle lies fully inside a `width`×`height` image.
    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.right() <= width && self.bottom() <= height
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    has_alpha: bool,
    data: Vec<u8>,
}

impl fmt::Debug for Raster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Raster")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("has_alpha", &self.has_alpha)
            .finish_non_exhaustive()
    }
}

impl Raster {
    /// A raster filled with one colour. The result carries an alpha channel.
    pub fn filled(width: u32, height: u32, rgba: [u8; 4]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 4);
        for _ in 0..(width as usize * height as usize) {
            data.extend_from_slice(&rgba);
        }
        Self {
            width,
            height,
            has_alpha: true,
            data,
        }
    }

    pub fn from_rgba(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize * 4 {
            return Err(PipelineError::invalid(format!(
                "rgba buffer of {} bytes does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            has_alpha: true,
            data,
        })
    }

    /// Builds an opaque raster from packed RGB bytes. The result reports
    /// `has_alpha() == false`.
    pub fn from_rgb(width: u32, height: u32, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != width as usize * height as usize * 3 {
            return Err(PipelineError::invalid(format!(
                "rgb buffer of {} bytes does not match {width}x{height}",
                rgb.len()
            )));
        }
        let mut data = Vec::with_capacity(rgb.len() / 3 * 4);
        for px in rgb.chunks_exact(3) {
            data.extend_from_slice(&[px[0], px[1], px[2], 255]);
        }
        Ok(Self {
            width,
            height,
            has_alpha: false,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// Whether the source carried an alpha channel.
    pub fn has_alpha(&self) -> bool {
        self.has_alpha
    }

    /// Marks the raster as carrying meaningful alpha.
    pub fn with_alpha(mut self) -> Self {
        self.has_alpha = true;
        self
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 4
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 4] {
        let i = self.offset(x, y);
        [
            self.data[i],
            self.data[i + 1],
            self.data[i + 2],
            self.data[i + 3],
        ]
    }

    pub fn put_pixel(&mut self, x: u32, y: u32, px: [u8; 4]) {
        let i = self.offset(x, y);
        self.data[i..i + 4].copy_from_slice(&px);
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        let has_alpha = img.color().has_alpha();
        let rgba = img.to_rgba8();
        let (width, height) = rgba.dimensions();
        Ok(Self {
            width,
            height,
            has_alpha,
            data: rgba.into_raw(),
        })
    }

    /// PNG encoding of the raster (RGBA8, or RGB8 when the raster has no alpha).
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        let rgba = RgbaImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length checked at construction");
        let img = if self.has_alpha {
            DynamicImage::ImageRgba8(rgba)
        } else {
            DynamicImage::ImageRgb8(DynamicImage::ImageRgba8(rgba).to_rgb8())
        };
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Hash of dimensions and pixel bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.data);
        hex::encode(h.finalize())
    }

    /// BT.601 luma of every pixel, row-major, on the 0..=255 scale.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(4)
            .map(|p| {
                LUMA_WEIGHTS[0] * p[0] as f64
                    + LUMA_WEIGHTS[1] * p[1] as f64
                    + LUMA_WEIGHTS[2] * p[2] as f64
            })
            .collect()
    }

    pub fn crop(&self, rect: Rect) -> Result<Raster> {
        if rect.is_empty() || !rect.fits_within(self.width, self.height) {
            return Err(PipelineError::invalid(format!(
                "crop {rect:?} outside {}x{} raster",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(rect.width as usize * rect.height as usize * 4);
        for y in rect.y..rect.bottom() {
            let start = self.offset(rect.x, y);
            data.extend_from_slice(&self.data[start..start + rect.width as usize * 4]);
        }
        Ok(Raster {
            width: rect.width,
            height: rect.height,
            has_alpha: self.has_alpha,
            data,
        })
    }

    /// Bilinear resize with pixel-centre alignment, interpolating in
    /// premultiplied alpha so transparent pixels do not bleed colour.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> Raster {
        assert!(width > 0 && height > 0, "resize target must be non-empty");
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Raster {
            width,
            height,
            has_alpha: self.has_alpha,
            data: vec![0; width as usize * height as usize * 4],
        };
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                out.put_pixel(x, y, self.sample_clamped(fx, fy));
            }
        }
        out
    }

    /// Bilinear sample at a continuous position already clamped to the grid.
    fn sample_clamped(&self, fx: f64, fy: f64) -> [u8; 4] {
        let x0 = fx.floor() as u32;
        let y0 = fy.floor() as u32;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let taps = [
            (x0, y0, (1.0 - tx) * (1.0 - ty)),
            (x1, y0, tx * (1.0 - ty)),
            (x0, y1, (1.0 - tx) * ty),
            (x1, y1, tx * ty),
        ];
        let mut acc = [0.0f64; 4];
        for (x, y, w) in taps {
            let p = self.pixel(x, y);
            let a = p[3] as f64 / 255.0;
            acc[0] += w * p[0] as f64 * a;
            acc[1] += w * p[1] as f64 * a;
            acc[2] += w * p[2] as f64 * a;
            acc[3] += w * a;
        }
        unpremultiply(acc)
    }

    /// Porter-Duff "over" of `src` onto this raster with `src`'s top-left at
    /// (`x`, `y`). Pixels outside `src`'s footprint are left untouched.
    pub fn draw_over(&mut self, src: &Raster, x: u32, y: u32) {
        for sy in 0..src.height {
            let dy = y + sy;
            if dy >= self.height {
                break;
            }
            for sx in 0..src.width {
                let dx = x + sx;
                if dx >= self.width {
                    break;
                }
                let s = src.pixel(sx, sy);
                match s[3] {
                    0 => {}
                    255 => self.put_pixel(dx, dy, s),
                    _ => {
                        let d = self.pixel(dx, dy);
                        self.put_pixel(dx, dy, blend_over(s, d));
                    }
                }
            }
        }
    }

    /// Flattens onto an opaque colour, dropping alpha.
    pub fn flatten_onto(&self, matte: [u8; 3]) -> Raster {
        let mut out = Raster::filled(self.width, self.height, [matte[0], matte[1], matte[2], 255]);
        out.draw_over(self, 0, 0);
        out
    }
}

/// Converts a premultiplied accumulator (colour·alpha in 0..=255, alpha in 0..=1)
/// back to straight RGBA8.
pub(crate) fn unpremultiply(acc: [f64; 4]) -> [u8; 4] {
    let a = acc[3];
    if a <= 0.0 {
        return TRANSPARENT;
    }
    let c = |v: f64| (v / a).round().clamp(0.0, 255.0) as u8;
    [
        c(acc[0]),
        c(acc[1]),
        c(acc[2]),
        (a * 255.0).round().clamp(0.0, 255.0) as u8,
    ]
}

fn blend_over(s: [u8; 4], d: [u8; 4]) -> [u8; 4] {
    let sa = s[3] as f64 / 255.0;
    let da = d[3] as f64 / 255.0;
    let out_a = sa + da * (1.0 - sa);
    if out_a <= 0.0 {
        return TRANSPARENT;
    }
    let mut out = [0u8; 4];
    for c in 0..3 {
        let v = (s[c] as f64 * sa + d[c] as f64 * da * (1.0 - sa)) / out_a;
        out[c] = v.round().clamp(0.0, 255.0) as u8;
    }
    out[3] = (out_a * 255.0).round().clamp(0.0, 255.0) as u8;
    out
}

/// Single-channel 8-bit mask. Nonzero marks the product footprint.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("count", &self.count())
            .finish()
    }
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(PipelineError::invalid(format!(
                "mask buffer of {} bytes does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize] != 0
    }

    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        self.data[y as usize * self.width as usize + x as usize] = if on { 255 } else { 0 };
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Tight bounding box of the nonzero region, `None` when empty.
    pub fn bounds(&self) -> Option<Rect> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != u32::MAX).then(|| Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    /// Copies `src` into this mask with its top-left at (`x`, `y`).
    pub fn stamp(&mut self, src: &Mask, x: u32, y: u32) {
        for sy in 0..src.height {
            for sx in 0..src.width {
                if src.get(sx, sy) && x + sx < self.width && y + sy < self.height {
                    self.set(x + sx, y + sy, true);
                }
            }
        }
    }

    pub fn crop(&self, rect: Rect) -> Result<Mask> {
        if rect.is_empty() || !rect.fits_within(self.width, self.height) {
            return Err(PipelineError::invalid(format!(
                "crop {rect:?} outside {}x{} mask",
                self.width, self.height
            )));
        }
        let mut out = Mask::empty(rect.width, rect.height);
        for y in 0..rect.height {
            for x in 0..rect.width {
                out.set(x, y, self.get(rect.x + x, rect.y + y));
            }
        }
        Ok(out)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let img = image::GrayImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        DynamicImage::ImageLuma8(img).write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        let (width, height) = img.dimensions();
        Ok(Self {
            width,
            height,
            data: img.into_raw(),
        })
    }
}
