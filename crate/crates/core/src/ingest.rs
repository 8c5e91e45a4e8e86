//! Slide loading, tissue segmentation and tiling.
//!
//! Slides are ordinary raster images, one file per magnification, declared
//! in a JSON manifest. Tissue is separated from glass with Otsu's threshold
//! on a box-downsampled luma image; tissue is the dark class.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CancerType, Magnification, TmbLabel};

pub const TILE_SIZE: u32 = 256;

/// Downscaled images whose luma variance falls below this are all background.
pub const LOW_VARIANCE_GUARD: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct SlideImage {
    pub slide_id: String,
    pub patient_id: String,
    pub magnification: Magnification,
    pub pixels: RgbImage,
}

impl SlideImage {
    pub fn new(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        magnification: Magnification,
        pixels: RgbImage,
    ) -> Result<Self> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(Error::invalid("slide image must be at least 1x1"));
        }
        Ok(Self {
            slide_id: slide_id.into(),
            patient_id: patient_id.into(),
            magnification,
            pixels,
        })
    }

    pub fn open(entry: &ManifestEntry, root: &Path) -> Result<Self> {
        let path = root.join(&entry.path);
        let img = image::open(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Self::new(&entry.slide_id, &entry.patient_id, entry.magnification, img)
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    width: usize,
    height: usize,
    downscale_factor: u32,
    bits: Vec<bool>,
}

impl ForegroundMask {
    pub fn new(width: usize, height: usize, downscale_factor: u32, bits: Vec<bool>) -> Result<Self> {
        if downscale_factor == 0 {
            return Err(Error::invalid("downscale factor must be >= 1"));
        }
        if bits.len() != width * height {
            return Err(Error::invalid("mask bit count does not match dimensions"));
        }
        Ok(Self {
            width,
            height,
            downscale_factor,
            bits,
        })
    }

    /// A mask of constant value sized for an image of `image_w` x `image_h`.
    pub fn filled(image_w: u32, image_h: u32, downscale_factor: u32, value: bool) -> Self {
        let f = downscale_factor.max(1);
        let w = image_w.div_ceil(f) as usize;
        let h = image_h.div_ceil(f) as usize;
        Self {
            width: w,
            height: h,
            downscale_factor: f,
            bits: vec![value; w * h],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn downscale_factor(&self) -> u32 {
        self.downscale_factor
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

#[derive(Debug, Clone)]
pub struct Tile {
    pub slide_id: String,
    pub magnification: Magnification,
    pub x: u32,
    pub y: u32,
    pub pixels: RgbImage,
}

/// Between-class variance of the split `{0..=t}` vs `{t+1..=255}`, up to the
/// constant factor `1 / total^2`. Zero when either class is empty.
fn between_class_score(w0: u64, s0: u64, w1: u64, s1: u64) -> f64 {
    if w0 == 0 || w1 == 0 {
        return 0.0;
    }
    let d = s0 as i128 * w1 as i128 - s1 as i128 * w0 as i128;
    let d = d as f64;
    d * d / (w0 as f64 * w1 as f64)
}

/// Otsu's threshold. Returns the smallest `t` maximizing the between-class
/// variance of `{0..=t}` vs `{t+1..=255}`. A histogram with a single occupied
/// bin returns that bin.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::invalid("otsu: histogram has no counts"));
    }
    let sum_all: u64 = histogram
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u64 * c)
        .sum();

    let mut w0 = 0u64;
    let mut s0 = 0u64;
    let mut best = 0usize;
    let mut best_score = 0.0f64;
    for (t, &count) in histogram.iter().enumerate() {
        w0 += count;
        s0 += t as u64 * count;
        let score = between_class_score(w0, s0, total - w0, sum_all - s0);
        if score > best_score {
            best_score = score;
            best = t;
        }
    }
    if best_score == 0.0 {
        // only one occupied bin
        let bin = histogram.iter().position(|&c| c > 0).unwrap_or(0);
        return Ok(bin as u8);
    }
    Ok(best as u8)
}

pub fn luma(p: &Rgb<u8>) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// Box-downsampled luma. Edge cells average only the pixels they cover.
pub fn downsampled_luma(image: &RgbImage, factor: u32) -> (usize, usize, Vec<f64>) {
    let f = factor.max(1);
    let w = image.width().div_ceil(f) as usize;
    let h = image.height().div_ceil(f) as usize;
    let mut sums = vec![0.0f64; w * h];
    let mut counts = vec![0u32; w * h];
    for (x, y, p) in image.enumerate_pixels() {
        let idx = (y / f) as usize * w + (x / f) as usize;
        sums[idx] += luma(p);
        counts[idx] += 1;
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .collect();
    (w, h, values)
}

/// Tissue mask by Otsu on the downscaled luma. Tissue is the dark class
/// (quantized luma <= threshold).
pub fn segment_foreground(image: &SlideImage, downscale_factor: u32) -> Result<ForegroundMask> {
    if downscale_factor == 0 {
        return Err(Error::invalid("downscale factor must be >= 1"));
    }
    let (w, h, values) = downsampled_luma(&image.pixels, downscale_factor);

    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var < LOW_VARIANCE_GUARD {
        return ForegroundMask::new(w, h, downscale_factor, vec![false; w * h]);
    }

    let quantized: Vec<u8> = values
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    let mut hist = [0u64; 256];
    for &q in &quantized {
        hist[q as usize] += 1;
    }
    let t = otsu_threshold(&hist)?;
    let bits = quantized.iter().map(|&q| q <= t).collect();
    ForegroundMask::new(w, h, downscale_factor, bits)
}

/// Fraction of the full-resolution window covered by foreground mask cells.
fn window_foreground_fraction(mask: &ForegroundMask, x0: u32, y0: u32, size: u32) -> f64 {
    let f = mask.downscale_factor();
    let cx0 = x0 / f;
    let cx1 = (x0 + size - 1) / f;
    let cy0 = y0 / f;
    let cy1 = (y0 + size - 1) / f;
    let mut covered = 0u64;
    for cy in cy0..=cy1 {
        if cy as usize >= mask.height() {
            break;
        }
        let oy = overlap(cy * f, (cy + 1) * f, y0, y0 + size);
        for cx in cx0..=cx1 {
            if cx as usize >= mask.width() {
                break;
            }
            if mask.get(cx as usize, cy as usize) {
                covered += oy * overlap(cx * f, (cx + 1) * f, x0, x0 + size);
            }
        }
    }
    covered as f64 / (size as f64 * size as f64)
}

fn overlap(a0: u32, a1: u32, b0: u32, b1: u32) -> u64 {
    a1.min(b1).saturating_sub(a0.max(b0)) as u64
}

/// Grid windows (left, top) that pass the foreground rule, row-major.
pub fn tile_positions(
    width: u32,
    height: u32,
    mask: &ForegroundMask,
    min_foreground_fraction: f64,
) -> Result<Vec<(u32, u32)>> {
    if !(0.0..=1.0).contains(&min_foreground_fraction) {
        return Err(Error::invalid(format!(
            "min_foreground_fraction {min_foreground_fraction} outside [0, 1]"
        )));
    }
    let expected_w = width.div_ceil(mask.downscale_factor()) as usize;
    let expected_h = height.div_ceil(mask.downscale_factor()) as usize;
    if mask.width() != expected_w || mask.height() != expected_h {
        return Err(Error::invalid("mask dimensions do not match image"));
    }
    let mut out = Vec::new();
    for ty in 0..height / TILE_SIZE {
        for tx in 0..width / TILE_SIZE {
            let (x, y) = (tx * TILE_SIZE, ty * TILE_SIZE);
            if window_foreground_fraction(mask, x, y, TILE_SIZE) >= min_foreground_fraction {
                out.push((x, y));
            }
        }
    }
    Ok(out)
}

/// Crop every aligned 256x256 window whose foreground coverage reaches
/// `min_foreground_fraction`. Partial windows at the right/bottom are dropped.
pub fn tile_slide(
    image: &SlideImage,
    mask: &ForegroundMask,
    min_foreground_fraction: f64,
) -> Result<Vec<Tile>> {
    let positions = tile_positions(image.width(), image.height(), mask, min_foreground_fraction)?;
    Ok(positions
        .into_iter()
        .map(|(x, y)| crop_tile(image, x, y))
        .collect())
}

pub fn crop_tile(image: &SlideImage, x: u32, y: u32) -> Tile {
    let pixels = image::imageops::crop_imm(&image.pixels, x, y, TILE_SIZE, TILE_SIZE).to_image();
    Tile {
        slide_id: image.slide_id.clone(),
        magnification: image.magnification,
        x,
        y,
        pixels,
    }
}

/// Box-downsample an RGB raster by an integer factor (per-channel mean,
/// rounded). Used to synthesize ×10 / ×5 levels from a ×20 raster.
pub fn box_downsample(image: &RgbImage, factor: u32) -> Result<RgbImage> {
    if factor == 0 {
        return Err(Error::invalid("downsample factor must be >= 1"));
    }
    let w = image.width().div_ceil(factor);
    let h = image.height().div_ceil(factor);
    let mut sums = vec![[0u64; 3]; (w * h) as usize];
    let mut counts = vec![0u64; (w * h) as usize];
    for (x, y, p) in image.enumerate_pixels() {
        let idx = ((y / factor) * w + x / factor) as usize;
        for c in 0..3 {
            sums[idx][c] += p[c] as u64;
        }
        counts[idx] += 1;
    }
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let idx = (y * w + x) as usize;
        let n = counts[idx];
        let ch = |c: usize| ((sums[idx][c] * 2 + n) / (2 * n)) as u8;
        Rgb([ch(0), ch(1), ch(2)])
    }))
}

/// One row of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub patient_id: String,
    pub path: PathBuf,
    pub magnification: Magnification,
    pub cancer_type: CancerType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<TmbLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tmb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_mutation_count: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survival_months: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survival_event: Option<bool>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut seen = std::collections::BTreeSet::new();
    for e in &entries {
        if !seen.insert((e.slide_id.clone(), e.magnification)) {
            return Err(Error::Data(format!(
                "manifest lists slide {} at x{} twice",
                e.slide_id, e.magnification
            )));
        }
    }
    Ok(entries)
}

/// `tiles.csv`: slide_id, magnification, x, y.
pub fn write_tiles_csv(path: &Path, slide_id: &str, mag: Magnification, positions: &[(u32, u32)]) -> Result<()> {
    let mut out = String::from("slide_id,magnification,x,y\n");
    for (x, y) in positions {
        out.push_str(&format!("{slide_id},{mag},{x},{y}\n"));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tiles_csv(path: &Path) -> Result<Vec<(u32, u32)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let parse = |i: usize| -> Result<u32> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: bad tile row {rec:?}", path.display())))
        };
        out.push((parse(2)?, parse(3)?));
    }
    Ok(out)
}
