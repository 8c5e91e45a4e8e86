//! Tile descriptors and the per-slide feature bag.
//!
//! The built-in embedder is a handcrafted 62-dimensional descriptor:
//! 16-bin normalized histograms for R, G, B (48), channel means then
//! variances (6), and an 8-direction magnitude-weighted gradient
//! orientation histogram of luma (8). Precomputed features of any width
//! can be ingested through the bag file format instead.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::ingest::{luma, Tile, TILE_SIZE};
use crate::types::{CancerType, Magnification};

pub const BUILTIN_DIM: usize = 62;
pub const HIST_BINS: usize = 16;
pub const ORIENTATION_BINS: usize = 8;
const BAG_MAGIC: &[u8; 5] = b"SGMB1";

/// Features X (N x D) of one slide at one magnification plus tile origins.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub slide_id: String,
    pub patient_id: String,
    pub cancer_type: CancerType,
    pub magnification: Magnification,
    pub features: Array2<f64>,
    pub coords: Vec<[i32; 2]>,
}

impl FeatureBag {
    pub fn new(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        cancer_type: CancerType,
        magnification: Magnification,
        features: Array2<f64>,
        coords: Vec<[i32; 2]>,
    ) -> Result<Self> {
        let slide_id = slide_id.into();
        if features.nrows() == 0 {
            return Err(Error::EmptyBag(slide_id));
        }
        if features.nrows() != coords.len() {
            return Err(Error::invalid(format!(
                "bag {slide_id}: {} feature rows but {} coords",
                features.nrows(),
                coords.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("bag {slide_id}: non-finite feature")));
        }
        Ok(Self {
            slide_id,
            patient_id: patient_id.into(),
            cancer_type,
            magnification,
            features,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// New bag whose row `i` is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> FeatureBag {
        let features = Array2::from_shape_fn((self.len(), self.dim()), |(i, j)| self.features[[perm[i], j]]);
        FeatureBag {
            features,
            coords: perm.iter().map(|&p| self.coords[p]).collect(),
            ..self.clone()
        }
    }
}

/// Handcrafted 62-dim descriptor of a 256x256 tile. Depends only on pixels.
pub fn embed_tile(tile: &Tile) -> Result<Vec<f64>> {
    let (w, h) = tile.pixels.dimensions();
    if (w, h) != (TILE_SIZE, TILE_SIZE) {
        return Err(Error::invalid(format!("tile is {w}x{h}, expected 256x256")));
    }
    let n = (w * h) as f64;
    let mut out = vec![0.0; BUILTIN_DIM];

    let mut sums = [0.0f64; 3];
    for p in tile.pixels.pixels() {
        for c in 0..3 {
            out[c * HIST_BINS + (p[c] >> 4) as usize] += 1.0;
            sums[c] += p[c] as f64;
        }
    }
    for v in &mut out[..3 * HIST_BINS] {
        *v /= n;
    }
    let means = sums.map(|s| s / n);
    let mut vars = [0.0f64; 3];
    for p in tile.pixels.pixels() {
        for c in 0..3 {
            vars[c] += (p[c] as f64 - means[c]).powi(2);
        }
    }
    let base = 3 * HIST_BINS;
    for c in 0..3 {
        out[base + c] = means[c];
        out[base + 3 + c] = vars[c] / n;
    }

    let orient = orientation_histogram(tile);
    out[base + 6..].copy_from_slice(&orient);
    Ok(out)
}

/// Central-difference gradients on interior pixels; bin k collects angles
/// nearest to k * 45 degrees (bin 0 points along +x). Normalized by the
/// interior pixel count.
fn orientation_histogram(tile: &Tile) -> [f64; ORIENTATION_BINS] {
    let (w, h) = tile.pixels.dimensions();
    let (w, h) = (w as usize, h as usize);
    let l: Vec<f64> = tile.pixels.pixels().map(luma).collect();
    let mut hist = [0.0f64; ORIENTATION_BINS];
    let step = PI / 4.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (l[y * w + x + 1] - l[y * w + x - 1]) / 2.0;
            let gy = (l[(y + 1) * w + x] - l[(y - 1) * w + x]) / 2.0;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let bin = (gy.atan2(gx) / step).round().rem_euclid(ORIENTATION_BINS as f64) as usize;
            hist[bin % ORIENTATION_BINS] += mag;
        }
    }
    let interior = ((w - 2) * (h - 2)) as f64;
    hist.map(|v| v / interior)
}

/// Embed every tile of one slide; rows follow input order.
pub fn embed_slide(tiles: &[Tile], patient_id: &str, cancer_type: CancerType) -> Result<FeatureBag> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::EmptyBag("slide has no tiles".into()))?;
    if tiles
        .iter()
        .any(|t| t.slide_id != first.slide_id || t.magnification != first.magnification)
    {
        return Err(Error::invalid("embed_slide: tiles from different slides or magnifications"));
    }
    let mut features = Array2::zeros((tiles.len(), BUILTIN_DIM));
    for (i, t) in tiles.iter().enumerate() {
        let v = embed_tile(t)?;
        features.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
    }
    let coords = tiles.iter().map(|t| [t.x as i32, t.y as i32]).collect();
    FeatureBag::new(&first.slide_id, patient_id, cancer_type, first.magnification, features, coords)
}

pub fn encode_feature_bag(bag: &FeatureBag) -> Vec<u8> {
    let mut buf = Vec::with_capacity(32 + bag.len() * (bag.dim() * 4 + 8));
    buf.extend_from_slice(BAG_MAGIC);
    for s in [&bag.slide_id, &bag.patient_id] {
        buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.as_bytes());
    }
    buf.push(bag.cancer_type.index() as u8);
    buf.push(bag.magnification.value() as u8);
    buf.extend_from_slice(&(bag.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(bag.dim() as u32).to_le_bytes());
    for v in bag.features.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for c in &bag.coords {
        buf.extend_from_slice(&c[0].to_le_bytes());
        buf.extend_from_slice(&c[1].to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.data.len() - self.pos),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos as u64;
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
    }
}

pub fn decode_feature_bag(data: &[u8]) -> Result<FeatureBag> {
    let mut cur = Cursor { data, pos: 0 };
    if cur.take(5, "magic")? != BAG_MAGIC {
        return Err(Error::format(0, "bad magic, expected SGMB1"));
    }
    let slide_id = cur.string("slide_id")?;
    let patient_id = cur.string("patient_id")?;
    let at = cur.pos as u64;
    let cancer_type = CancerType::from_index(cur.u8("cancer_type")? as usize)
        .map_err(|e| Error::format(at, e.to_string()))?;
    let at = cur.pos as u64;
    let magnification = Magnification::from_value(cur.u8("magnification")? as u32)
        .map_err(|e| Error::format(at, e.to_string()))?;
    let n_at = cur.pos as u64;
    let n = cur.u32("N")? as usize;
    let d = cur.u32("D")? as usize;
    if n == 0 {
        return Err(Error::EmptyBag(format!("{slide_id}: header declares N=0 (byte {n_at})")));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(4))
        .and_then(|b| b.checked_add(n * 8))
        .ok_or_else(|| Error::format(n_at, "N x D overflows"))?;
    let remaining = data.len() - cur.pos;
    if remaining != expected {
        return Err(Error::format(
            cur.pos as u64,
            format!("payload is {remaining} bytes, header N={n} D={d} implies {expected}"),
        ));
    }
    let mut values = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let at = cur.pos as u64;
        let v = f32::from_le_bytes(cur.take(4, "feature")?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(at, "non-finite feature value"));
        }
        values.push(v as f64);
    }
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        let x = i32::from_le_bytes(cur.take(4, "coord")?.try_into().unwrap());
        let y = i32::from_le_bytes(cur.take(4, "coord")?.try_into().unwrap());
        coords.push([x, y]);
    }
    let features = Array2::from_shape_vec((n, d), values).expect("shape checked");
    FeatureBag::new(slide_id, patient_id, cancer_type, magnification, features, coords)
}

pub fn save_feature_bag(bag: &FeatureBag, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_feature_bag(bag)).map_err(|e| Error::io(path, e))
}

pub fn load_feature_bag(path: &Path) -> Result<FeatureBag> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    decode_feature_bag(&data).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}
