//! Attention heatmaps: per-tile attention painted onto slide coordinates.

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::roc::quantile_sorted;
use crate::ingest::TILE_SIZE;
use crate::types::Magnification;

/// Spread below which attention counts as constant.
pub const CONSTANT_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Normalization {
    MinMax,
    /// Clip to the given percentiles (0-100) and rescale.
    Percentile { lo: f64, hi: f64 },
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::Percentile { lo: 1.0, hi: 99.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    pub slide_id: String,
    pub magnification: Magnification,
    pub normalization: Normalization,
    /// Weight of the ramp color over the base pixel.
    pub opacity: f64,
}

impl HeatmapSpec {
    pub fn new(slide_id: impl Into<String>, magnification: Magnification) -> Self {
        Self {
            slide_id: slide_id.into(),
            magnification,
            normalization: Normalization::default(),
            opacity: 0.6,
        }
    }
}

/// Maps attention to [0, 1]. Constant input maps to 0.5 everywhere. If
/// the percentile window collapses while the values are not constant,
/// min-max scaling is used instead.
pub fn normalize_attention(alpha: &[f64], norm: Normalization) -> Vec<f64> {
    if alpha.is_empty() {
        return Vec::new();
    }
    let min = alpha.iter().copied().fold(f64::INFINITY, f64::min);
    let max = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max - min < CONSTANT_GUARD {
        return vec![0.5; alpha.len()];
    }
    let (lo, hi) = match norm {
        Normalization::MinMax => (min, max),
        Normalization::Percentile { lo, hi } => {
            let mut sorted = alpha.to_vec();
            sorted.sort_by(f64::total_cmp);
            let a = quantile_sorted(&sorted, lo / 100.0);
            let b = quantile_sorted(&sorted, hi / 100.0);
            if b - a < CONSTANT_GUARD {
                (min, max)
            } else {
                (a, b)
            }
        }
    };
    alpha.iter().map(|&a| ((a - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

/// Blue (0) to red (1).
pub fn ramp(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    Rgb([(255.0 * v).round() as u8, 0, (255.0 * (1.0 - v)).round() as u8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub x: i32,
    pub y: i32,
    pub alpha_raw: f64,
    pub alpha_normalized: f64,
    pub tile_prob: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Heatmap {
    pub raster: RgbImage,
    /// Slide coordinate of the raster's top-left pixel.
    pub origin: (i32, i32),
    pub rows: Vec<HeatmapRow>,
}

/// Paints each tile footprint with the ramp color of its normalized
/// attention, blended over `base` (or white). Without a base the raster
/// covers the bounding box of the footprints.
pub fn render_heatmap(
    coords: &[[i32; 2]],
    alpha: &[f64],
    base: Option<&RgbImage>,
    spec: &HeatmapSpec,
    tile_probs: Option<&[f64]>,
) -> Result<Heatmap> {
    if coords.is_empty() {
        return Err(Error::invalid("heatmap: no tiles"));
    }
    if coords.len() != alpha.len() {
        return Err(Error::invalid(format!("heatmap: {} coordinates but {} attention weights", coords.len(), alpha.len())));
    }
    if tile_probs.is_some_and(|p| p.len() != alpha.len()) {
        return Err(Error::invalid("heatmap: tile probabilities do not match the tiles"));
    }
    if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::invalid("heatmap: attention must be finite and non-negative"));
    }
    let sum: f64 = alpha.iter().sum();
    if (sum - 1.0).abs() >= 1e-6 {
        return Err(Error::invalid(format!("heatmap: attention sums to {sum}, expected 1")));
    }
    if !(0.0..=1.0).contains(&spec.opacity) {
        return Err(Error::invalid(format!("heatmap: opacity {} outside [0, 1]", spec.opacity)));
    }
    let t = TILE_SIZE as i64;
    let (origin, mut raster) = match base {
        Some(img) => {
            for c in coords {
                let (x, y) = (c[0] as i64, c[1] as i64);
                if x < 0 || y < 0 || x + t > img.width() as i64 || y + t > img.height() as i64 {
                    return Err(Error::invalid(format!(
                        "tile ({x}, {y}) lies outside the {}x{} base image",
                        img.width(),
                        img.height()
                    )));
                }
            }
            ((0, 0), img.clone())
        }
        None => {
            let x0 = coords.iter().map(|c| c[0]).min().unwrap();
            let y0 = coords.iter().map(|c| c[1]).min().unwrap();
            let x1 = coords.iter().map(|c| c[0] as i64 + t).max().unwrap();
            let y1 = coords.iter().map(|c| c[1] as i64 + t).max().unwrap();
            let w = (x1 - x0 as i64) as u32;
            let h = (y1 - y0 as i64) as u32;
            ((x0, y0), RgbImage::from_pixel(w, h, Rgb([255, 255, 255])))
        }
    };
    let norm = normalize_attention(alpha, spec.normalization);
    let op = spec.opacity;
    for (c, &v) in coords.iter().zip(&norm) {
        let color = ramp(v);
        let px = (c[0] - origin.0) as u32;
        let py = (c[1] - origin.1) as u32;
        for y in py..py + TILE_SIZE {
            for x in px..px + TILE_SIZE {
                let p = raster.get_pixel_mut(x, y);
                for ch in 0..3 {
                    p.0[ch] = (op * color.0[ch] as f64 + (1.0 - op) * p.0[ch] as f64).round() as u8;
                }
            }
        }
    }
    let rows = coords
        .iter()
        .enumerate()
        .map(|(i, c)| HeatmapRow {
            x: c[0],
            y: c[1],
            alpha_raw: alpha[i],
            alpha_normalized: norm[i],
            tile_prob: tile_probs.map(|p| p[i]),
        })
        .collect();
    Ok(Heatmap { raster, origin, rows })
}

impl Heatmap {
    /// `heatmap.csv`: x, y, alpha_raw, alpha_normalized, plus tile_prob
    /// when per-tile probabilities were supplied. Floats are written in
    /// shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let with_prob = self.rows.iter().any(|r| r.tile_prob.is_some());
        let mut out = String::from("x,y,alpha_raw,alpha_normalized");
        out.push_str(if with_prob { ",tile_prob\n" } else { "\n" });
        for r in &self.rows {
            out.push_str(&format!("{},{},{:?},{:?}", r.x, r.y, r.alpha_raw, r.alpha_normalized));
            if let Some(p) = r.tile_prob {
                out.push_str(&format!(",{p:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::File::create(&csv)
            .and_then(|mut f| f.write_all(self.to_csv().as_bytes()))
            .map_err(|e| Error::io(&csv, e))?;
        let png = dir.join(format!("{stem}.png"));
        self.raster
            .save_with_format(&png, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("{}: {e}", png.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: i32) -> Vec<[i32; 2]> {
        (0..n).map(|i| [(i % 3) * 256, (i / 3) * 256]).collect()
    }

    fn spec(norm: Normalization, opacity: f64) -> HeatmapSpec {
        HeatmapSpec {
            normalization: norm,
            opacity,
            ..HeatmapSpec::new("s", Magnification::X20)
        }
    }

    #[test]
    fn uniform_attention_is_midpoint() {
        let a = vec![1.0 / 6.0; 6];
        let h = render_heatmap(&grid(6), &a, None, &spec(Normalization::default(), 1.0), None).unwrap();
        assert!(h.rows.iter().all(|r| r.alpha_normalized == 0.5));
        let mid = ramp(0.5);
        assert!(h.raster.pixels().all(|p| *p == mid));
        assert_eq!(h.raster.dimensions(), (768, 512));
    }

    #[test]
    fn delta_attention_paints_one_red_tile() {
        let mut a = vec![0.0; 9];
        a[4] = 1.0;
        for norm in [Normalization::MinMax, Normalization::default()] {
            let h = render_heatmap(&grid(9), &a, None, &spec(norm, 1.0), None).unwrap();
            let red = h.raster.pixels().filter(|p| **p == Rgb([255, 0, 0])).count();
            let blue = h.raster.pixels().filter(|p| **p == Rgb([0, 0, 255])).count();
            assert_eq!(red, 256 * 256);
            assert_eq!(blue, 8 * 256 * 256);
            assert_eq!(*h.raster.get_pixel(256 + 10, 256 + 10), Rgb([255, 0, 0]));
        }
    }

    #[test]
    fn blends_over_base_and_keeps_dims() {
        let base = RgbImage::from_pixel(600, 300, Rgb([100, 100, 100]));
        let h = render_heatmap(&[[0, 0], [256, 0]], &[0.25, 0.75], Some(&base), &spec(Normalization::MinMax, 0.5), None)
            .unwrap();
        assert_eq!(h.raster.dimensions(), (600, 300));
        assert_eq!(*h.raster.get_pixel(300, 10), Rgb([178, 50, 50]));
        assert_eq!(*h.raster.get_pixel(10, 10), Rgb([50, 50, 178]));
        assert_eq!(*h.raster.get_pixel(550, 290), Rgb([100, 100, 100]));
        let err = render_heatmap(&[[400, 0]], &[1.0], Some(&base), &spec(Normalization::MinMax, 0.5), None);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rejects_unnormalized_attention() {
        assert!(render_heatmap(&grid(2), &[0.5, 0.6], None, &spec(Normalization::MinMax, 1.0), None).is_err());
        assert!(render_heatmap(&grid(2), &[0.5, 0.5], None, &spec(Normalization::MinMax, 1.5), None).is_err());
    }

    #[test]
    fn csv_raw_column_roundtrips_bitwise() {
        let raw = [0.1f64, 0.2, 0.7000000000000001];
        let probs = [0.3, 0.4, 0.5];
        let h = render_heatmap(&grid(3), &raw, None, &spec(Normalization::default(), 0.6), Some(&probs)).unwrap();
        let csv = h.to_csv();
        assert!(csv.starts_with("x,y,alpha_raw,alpha_normalized,tile_prob\n"));
        let parsed: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
        assert_eq!(parsed.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), raw.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn ramp_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(ramp(lo).0[0] <= ramp(hi).0[0]);
            prop_assert!(ramp(lo).0[2] >= ramp(hi).0[2]);
        }

        #[test]
        fn normalization_preserves_order(v in proptest::collection::vec(0.0f64..1.0, 1..60)) {
            for norm in [Normalization::MinMax, Normalization::default()] {
                let n = normalize_attention(&v, norm);
                for i in 0..v.len() {
                    prop_assert!((0.0..=1.0).contains(&n[i]));
                    for j in 0..v.len() {
                        if v[i] < v[j] {
                            prop_assert!(n[i] <= n[j]);
                        }
                    }
                }
            }
        }
    }
}
