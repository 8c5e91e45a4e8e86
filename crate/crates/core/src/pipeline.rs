//! Staged end-to-end runs over an output directory.
//!
//! Every stage reads its inputs from files written by earlier stages, so
//! any stage can run on its own. Per-slide artifacts are cached by a
//! SHA-256 key over the stage's inputs and the part of the config it
//! uses; `cache.json` maps each artifact to its key and content digest.
//!
//! Layout under the output directory:
//!
//! ```text
//! slides.json  patients.json  cache.json
//! tiles/<stem>.csv  features/<stem>.sgmb  graphs/<stem>.csv
//! models/fold<f>.ckpt  models/folds.csv  logs/fold<f>_x<m>.csv
//! predictions.csv  report.json  roc.csv  km.csv  scales/x<m>/...
//! heatmaps/<stem>.{csv,png}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{decode_feature_bag, embed_slide, encode_feature_bag, FeatureBag};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, read_predictions_csv, write_evaluation, write_predictions_csv, EvalConfig, PatientPrediction};
use crate::graph::{build_knn_graph, read_graph_csv, write_graph_csv, SlideGraph, DEFAULT_K};
use crate::heatmap::{render_heatmap, HeatmapSpec, Normalization};
use crate::ingest::{crop_tile, load_manifest, read_tiles_csv, segment_foreground, tile_positions, write_tiles_csv, SlideImage};
use crate::model::{forward_single_scale, multiscale_ensemble, tile_probabilities, Checkpoint};
use crate::synth::{generate_synthetic_cohort, SyntheticCohortSpec};
use crate::training::{cross_validate, patient_labels, predict, LabeledGraph, PatientLabel, TrainConfig, DEFAULT_TMB_CUTOFF};
use crate::types::{CancerType, Magnification};

/// Bumped whenever an artifact format or stage algorithm changes.
const CACHE_VERSION: u32 = 1;
const ENSEMBLE_SCALE: &str = "ensemble";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Tile,
    Embed,
    Graph,
    Train,
    Predict,
    Evaluate,
    Heatmap,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Tile,
        Stage::Embed,
        Stage::Graph,
        Stage::Train,
        Stage::Predict,
        Stage::Evaluate,
        Stage::Heatmap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Tile => "tile",
            Stage::Embed => "embed",
            Stage::Graph => "graph",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Heatmap => "heatmap",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn d_true() -> bool {
    true
}
fn d_downscale() -> u32 {
    16
}
fn d_min_fg() -> f64 {
    0.5
}
fn d_k() -> usize {
    DEFAULT_K
}
fn d_cutoff() -> f64 {
    DEFAULT_TMB_CUTOFF
}
fn d_boot() -> usize {
    2000
}
fn d_level() -> f64 {
    0.95
}
fn d_heatmaps() -> usize {
    2
}
fn d_opacity() -> f64 {
    0.6
}
fn d_mags() -> Vec<Magnification> {
    Magnification::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestInput {
    pub path: PathBuf,
    /// Directory that image paths are relative to; defaults to the
    /// manifest's directory.
    #[serde(default)]
    pub root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilingConfig {
    #[serde(default = "d_downscale")]
    pub downscale_factor: u32,
    #[serde(default = "d_min_fg")]
    pub min_foreground_fraction: f64,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            downscale_factor: d_downscale(),
            min_foreground_fraction: d_min_fg(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    #[serde(default = "d_k")]
    pub k: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k: d_k() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelConfig {
    /// TMB-H iff TMB > cutoff (mutations per megabase).
    #[serde(default = "d_cutoff")]
    pub tmb_cutoff: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self { tmb_cutoff: d_cutoff() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(default = "d_boot")]
    pub n_boot: usize,
    #[serde(default = "d_level")]
    pub level: f64,
    #[serde(default)]
    pub subgroup_keys: Vec<String>,
    /// Also evaluate each magnification on its own under `scales/`.
    #[serde(default = "d_true")]
    pub per_scale: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            n_boot: d_boot(),
            level: d_level(),
            subgroup_keys: Vec::new(),
            per_scale: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapConfig {
    /// Explicit slide stems (`<slide_id>_x<mag>`). When empty, the slides
    /// of the `count` patients with the highest ensemble probability are
    /// rendered.
    #[serde(default)]
    pub slides: Vec<String>,
    #[serde(default = "d_heatmaps")]
    pub count: usize,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "d_opacity")]
    pub opacity: f64,
    /// Add per-tile probabilities from the classifier head.
    #[serde(default)]
    pub tile_probs: bool,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            slides: Vec::new(),
            count: d_heatmaps(),
            normalization: Normalization::default(),
            opacity: d_opacity(),
            tile_probs: false,
        }
    }
}

/// Whole-run configuration. Exactly one of `synthetic` and `manifest`
/// names the input. The top-level seed drives every seeded stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "d_mags")]
    pub magnifications: Vec<Magnification>,
    #[serde(default)]
    pub synthetic: Option<SyntheticCohortSpec>,
    #[serde(default)]
    pub manifest: Option<ManifestInput>,
    #[serde(default)]
    pub tiling: TilingConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub labels: LabelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub heatmap: HeatmapConfig,
}

impl PipelineConfig {
    /// Parses TOML. Relative manifest paths resolve against `base`. A
    /// `seed` override replaces the file's seed.
    pub fn from_toml(text: &str, base: &Path, seed: Option<u64>) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = seed {
            table.insert("seed".into(), toml::Value::Integer(s as i64));
        }
        let seed = table
            .get("seed")
            .cloned()
            .ok_or_else(|| Error::Config("missing top-level seed".into()))?;
        for section in ["train", "synthetic"] {
            match table.get_mut(section) {
                Some(toml::Value::Table(t)) => {
                    t.insert("seed".into(), seed.clone());
                }
                Some(_) => return Err(Error::Config(format!("[{section}] must be a table"))),
                None if section == "train" => {
                    let mut t = toml::Table::new();
                    t.insert("seed".into(), seed.clone());
                    table.insert(section.into(), toml::Value::Table(t));
                }
                None => {}
            }
        }
        let mut cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(m) = &mut cfg.manifest {
            if m.path.is_relative() {
                m.path = base.join(&m.path);
            }
            if let Some(r) = &mut m.root {
                if r.is_relative() {
                    *r = base.join(&*r);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, seed).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Synthetic-cohort config with default settings.
    pub fn synthetic(spec: SyntheticCohortSpec, train: TrainConfig) -> Self {
        Self {
            seed: spec.seed,
            magnifications: d_mags(),
            synthetic: Some(spec),
            manifest: None,
            tiling: TilingConfig::default(),
            graph: GraphConfig::default(),
            labels: LabelConfig::default(),
            train,
            evaluate: EvaluateConfig::default(),
            heatmap: HeatmapConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match (&self.synthetic, &self.manifest) {
            (Some(s), None) => s.validate()?,
            (None, Some(_)) => {}
            _ => return bad("exactly one of [synthetic] and [manifest] must be given"),
        }
        if self.magnifications.is_empty() {
            return bad("magnifications must not be empty");
        }
        if self.tiling.downscale_factor == 0 {
            return bad("tiling.downscale_factor must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.tiling.min_foreground_fraction) {
            return bad("tiling.min_foreground_fraction must lie in [0, 1]");
        }
        if self.graph.k == 0 {
            return bad("graph.k must be >= 1");
        }
        if !(self.labels.tmb_cutoff >= 0.0) {
            return bad("labels.tmb_cutoff must be >= 0");
        }
        if self.evaluate.n_boot == 0 || !(self.evaluate.level > 0.0 && self.evaluate.level < 1.0) {
            return bad("evaluate needs n_boot >= 1 and level in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.heatmap.opacity) {
            return bad("heatmap.opacity must lie in [0, 1]");
        }
        self.train.validate()
    }

    fn mags(&self) -> BTreeSet<Magnification> {
        self.magnifications.iter().copied().collect()
    }
}

/// One slide known to the run, listed in `slides.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRef {
    pub stem: String,
    pub slide_id: String,
    pub patient_id: String,
    pub cancer_type: CancerType,
    pub magnification: Magnification,
    /// Source raster; absent for synthetic slides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
}

/// One patient, listed in `patients.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    #[serde(flatten)]
    pub label: PatientLabel,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

pub fn slide_stem(slide_id: &str, mag: Magnification) -> Result<String> {
    if slide_id.is_empty()
        || slide_id.starts_with('.')
        || slide_id.chars().any(|c| matches!(c, '/' | '\\' | ':') || c.is_control())
    {
        return Err(Error::Data(format!("slide id {slide_id:?} is not usable as a file name")));
    }
    Ok(format!("{slide_id}_x{mag}"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    digest: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn cache_key(stage: Stage, config: &impl Serialize, inputs: &[(&str, &str)]) -> String {
    let body = serde_json::json!({
        "version": CACHE_VERSION,
        "stage": stage.name(),
        "config": config,
        "inputs": inputs,
    });
    sha256_hex(body.to_string().as_bytes())
}

/// Whether one item was served from the cache or recomputed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageEvent {
    pub stage: Stage,
    pub item: String,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunReport {
    pub events: Vec<StageEvent>,
}

impl RunReport {
    pub fn hits(&self, stage: Stage) -> usize {
        self.events.iter().filter(|e| e.stage == stage && e.cache_hit).count()
    }

    pub fn misses(&self, stage: Stage) -> usize {
        self.events.iter().filter(|e| e.stage == stage && !e.cache_hit).count()
    }

    pub fn recomputed(&self) -> Vec<&StageEvent> {
        self.events.iter().filter(|e| !e.cache_hit).collect()
    }

    /// One line per stage that ran: `<stage>: <hits> cached, <misses> recomputed`.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for s in Stage::ALL {
            if self.events.iter().any(|e| e.stage == s) {
                out.push_str(&format!("{s}: {} cached, {} recomputed\n", self.hits(s), self.misses(s)));
            }
        }
        out
    }
}

/// A run over one output directory.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub out_dir: PathBuf,
    cache: BTreeMap<String, CacheEntry>,
    pub report: RunReport,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize + ?Sized>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn stage_error(stage: Stage, e: Error) -> Error {
    let ctx = |m: String| format!("{stage} stage: {m}");
    match e {
        Error::InvalidInput(m) => Error::InvalidInput(ctx(m)),
        Error::Config(m) => Error::Config(ctx(m)),
        Error::EmptyBag(m) => Error::EmptyBag(ctx(m)),
        Error::Format { offset, message } => Error::Format { offset, message: ctx(message) },
        Error::UndefinedMetric(m) => Error::UndefinedMetric(ctx(m)),
        Error::Untrainable(m) => Error::Untrainable(ctx(m)),
        Error::Divergence(m) => Error::Divergence(ctx(m)),
        Error::Data(m) => Error::Data(ctx(m)),
        Error::Io { path, source } => Error::Data(ctx(format!("{}: {source}", path.display()))),
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out_dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out_dir = out_dir.into();
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let cache_path = out_dir.join("cache.json");
        let cache = if cache_path.exists() {
            serde_json::from_slice(&read(&cache_path)?)
                .map_err(|e| Error::Data(format!("{}: {e}", cache_path.display())))?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            config,
            out_dir,
            cache,
            report: RunReport::default(),
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    /// Digest of an artifact, read from disk.
    fn digest(&self, rel: &str) -> Result<String> {
        Ok(sha256_hex(&read(&self.path(rel))?))
    }

    fn fresh(&self, rel: &str, key: &str) -> bool {
        match self.cache.get(rel) {
            Some(e) if e.key == key => std::fs::read(self.path(rel)).is_ok_and(|b| sha256_hex(&b) == e.digest),
            _ => false,
        }
    }

    fn store(&mut self, rel: &str, key: String, bytes: &[u8]) -> Result<()> {
        write(&self.path(rel), bytes)?;
        self.cache.insert(
            rel.to_string(),
            CacheEntry {
                key,
                digest: sha256_hex(bytes),
            },
        );
        Ok(())
    }

    fn event(&mut self, stage: Stage, item: impl Into<String>, cache_hit: bool) {
        let item = item.into();
        debug!("{stage} {item}: {}", if cache_hit { "cached" } else { "recomputed" });
        self.report.events.push(StageEvent { stage, item, cache_hit });
    }

    fn save_cache(&self) -> Result<()> {
        write(&self.path("cache.json"), &to_json(&self.cache)?)
    }

    /// The stages `pipeline` runs for this input, in order.
    pub fn stages(&self) -> Vec<Stage> {
        let head: &[Stage] = if self.config.synthetic.is_some() {
            &[Stage::Synth]
        } else {
            &[Stage::Tile, Stage::Embed]
        };
        head.iter()
            .copied()
            .chain([Stage::Graph, Stage::Train, Stage::Predict, Stage::Evaluate, Stage::Heatmap])
            .collect()
    }

    pub fn run_all(&mut self) -> Result<()> {
        for s in self.stages() {
            self.run_stage(s)?;
        }
        Ok(())
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        info!("running {stage} stage");
        let r = match stage {
            Stage::Synth => self.synth(),
            Stage::Tile => self.tile(),
            Stage::Embed => self.embed(),
            Stage::Graph => self.graph(),
            Stage::Train => self.train(),
            Stage::Predict => self.predict_inner(None),
            Stage::Evaluate => self.evaluate(),
            Stage::Heatmap => self.heatmaps(),
        };
        let saved = self.save_cache();
        r.and(saved).map_err(|e| stage_error(stage, e))
    }

    pub fn slides(&self) -> Result<Vec<SlideRef>> {
        let path = self.path("slides.json");
        if !path.exists() {
            return Err(Error::Data(format!("{} is missing; run the synth or tile stage first", path.display())));
        }
        let all: Vec<SlideRef> =
            serde_json::from_slice(&read(&path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mags = self.config.mags();
        Ok(all.into_iter().filter(|s| mags.contains(&s.magnification)).collect())
    }

    pub fn patients(&self) -> Result<Vec<PatientRecord>> {
        let path = self.path("patients.json");
        serde_json::from_slice(&read(&path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    fn synth(&mut self) -> Result<()> {
        let spec = self
            .config
            .synthetic
            .clone()
            .ok_or_else(|| Error::Config("synth stage needs a [synthetic] section".into()))?;
        let cohort = generate_synthetic_cohort(&spec)?;
        let patients: Vec<PatientRecord> = cohort
            .patients
            .iter()
            .map(|p| PatientRecord {
                label: PatientLabel {
                    patient_id: p.patient_id.clone(),
                    cancer_type: p.cancer_type,
                    tmb_value: Some(p.tmb),
                    total_mutation_count: Some(p.total_mutation_count),
                    label: p.label,
                    survival: Some(p.survival.clone()),
                },
                metadata: BTreeMap::new(),
            })
            .collect();
        write(&self.path("patients.json"), &to_json(&patients)?)?;
        let mut refs = Vec::with_capacity(cohort.slides.len());
        for s in &cohort.slides {
            let b = &s.bag;
            let stem = slide_stem(&b.slide_id, b.magnification)?;
            let rel = format!("features/{stem}.sgmb");
            let key = cache_key(Stage::Synth, &spec, &[("slide", &stem)]);
            let hit = self.fresh(&rel, &key);
            if !hit {
                self.store(&rel, key, &encode_feature_bag(b))?;
            }
            self.event(Stage::Synth, &stem, hit);
            refs.push(SlideRef {
                stem,
                slide_id: b.slide_id.clone(),
                patient_id: b.patient_id.clone(),
                cancer_type: b.cancer_type,
                magnification: b.magnification,
                image: None,
            });
        }
        write(&self.path("slides.json"), &to_json(&refs)?)
    }

    fn manifest(&self) -> Result<(Vec<crate::ingest::ManifestEntry>, PathBuf)> {
        let m = self
            .config
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Config("tile and embed stages need a [manifest] section".into()))?;
        let root = m
            .root
            .clone()
            .unwrap_or_else(|| m.path.parent().unwrap_or(Path::new(".")).to_path_buf());
        Ok((load_manifest(&m.path)?, root))
    }

    fn tile(&mut self) -> Result<()> {
        let (entries, root) = self.manifest()?;
        let labels = patient_labels(&entries, self.config.labels.tmb_cutoff)?;
        let mut metadata: BTreeMap<&str, BTreeMap<String, String>> = BTreeMap::new();
        for e in &entries {
            let m = metadata.entry(&e.patient_id).or_default();
            for (k, v) in &e.metadata {
                if m.insert(k.clone(), v.clone()).is_some_and(|old| old != *v) {
                    return Err(Error::Data(format!("patient {}: conflicting metadata {k}", e.patient_id)));
                }
            }
        }
        let patients: Vec<PatientRecord> = labels
            .into_iter()
            .map(|l| PatientRecord {
                metadata: metadata.remove(l.patient_id.as_str()).unwrap_or_default(),
                label: l,
            })
            .collect();
        write(&self.path("patients.json"), &to_json(&patients)?)?;

        let refs: Vec<SlideRef> = entries
            .iter()
            .map(|e| {
                Ok(SlideRef {
                    stem: slide_stem(&e.slide_id, e.magnification)?,
                    slide_id: e.slide_id.clone(),
                    patient_id: e.patient_id.clone(),
                    cancer_type: e.cancer_type,
                    magnification: e.magnification,
                    image: Some(root.join(&e.path)),
                })
            })
            .collect::<Result<_>>()?;
        write(&self.path("slides.json"), &to_json(&refs)?)?;

        let mags = self.config.mags();
        let todo: Vec<&SlideRef> = refs.iter().filter(|r| mags.contains(&r.magnification)).collect();
        let tiling = self.config.tiling.clone();
        let keyed: Vec<(String, String)> = todo
            .par_iter()
            .map(|r| {
                let img = sha256_hex(&read(r.image.as_ref().expect("manifest slide has an image"))?);
                Ok((format!("tiles/{}.csv", r.stem), cache_key(Stage::Tile, &tiling, &[("image", &img)])))
            })
            .collect::<Result<_>>()?;
        let computed: Vec<Option<Vec<u8>>> = todo
            .par_iter()
            .zip(&keyed)
            .map(|(r, (rel, key))| {
                if self.fresh(rel, key) {
                    return Ok(None);
                }
                let image = load_image(r)?;
                let mask = segment_foreground(&image, tiling.downscale_factor)?;
                let pos = tile_positions(image.width(), image.height(), &mask, tiling.min_foreground_fraction)?;
                let tmp = tempfile_path(&self.out_dir, rel);
                write_tiles_csv(&tmp, &r.slide_id, r.magnification, &pos)?;
                let bytes = read(&tmp)?;
                let _ = std::fs::remove_file(&tmp);
                Ok(Some(bytes))
            })
            .collect::<Result<_>>()?;
        for ((r, (rel, key)), bytes) in todo.iter().zip(keyed).zip(computed) {
            let hit = bytes.is_none();
            if let Some(b) = bytes {
                self.store(&rel, key, &b)?;
            }
            self.event(Stage::Tile, &r.stem, hit);
        }
        Ok(())
    }

    fn embed(&mut self) -> Result<()> {
        let slides = self.slides()?;
        let keyed: Vec<(String, String)> = slides
            .par_iter()
            .map(|r| {
                let img_path = r
                    .image
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("slide {} has no source image to embed", r.stem)))?;
                let img = sha256_hex(&read(img_path)?);
                let tiles = self.digest(&format!("tiles/{}.csv", r.stem))?;
                let key = cache_key(Stage::Embed, &"builtin", &[("image", &img), ("tiles", &tiles)]);
                Ok((format!("features/{}.sgmb", r.stem), key))
            })
            .collect::<Result<_>>()?;
        let patients: BTreeMap<String, CancerType> =
            self.patients()?.into_iter().map(|p| (p.label.patient_id, p.label.cancer_type)).collect();
        let computed: Vec<Option<Vec<u8>>> = slides
            .par_iter()
            .zip(&keyed)
            .map(|(r, (rel, key))| {
                if self.fresh(rel, key) {
                    return Ok(None);
                }
                let image = load_image(r)?;
                let pos = read_tiles_csv(&self.path(&format!("tiles/{}.csv", r.stem)))?;
                if pos.is_empty() {
                    return Err(Error::EmptyBag(format!("slide {} has no foreground tiles", r.stem)));
                }
                let tiles: Vec<_> = pos.iter().map(|&(x, y)| crop_tile(&image, x, y)).collect();
                let ct = patients.get(&r.patient_id).copied().unwrap_or(r.cancer_type);
                Ok(Some(encode_feature_bag(&embed_slide(&tiles, &r.patient_id, ct)?)))
            })
            .collect::<Result<_>>()?;
        for ((r, (rel, key)), bytes) in slides.iter().zip(keyed).zip(computed) {
            let hit = bytes.is_none();
            if let Some(b) = bytes {
                self.store(&rel, key, &b)?;
            }
            self.event(Stage::Embed, &r.stem, hit);
        }
        Ok(())
    }

    fn graph(&mut self) -> Result<()> {
        let slides = self.slides()?;
        let k = self.config.graph.k;
        let keyed: Vec<(String, String)> = slides
            .par_iter()
            .map(|r| {
                let feat = self.digest(&format!("features/{}.sgmb", r.stem))?;
                Ok((format!("graphs/{}.csv", r.stem), cache_key(Stage::Graph, &k, &[("features", &feat)])))
            })
            .collect::<Result<_>>()?;
        let computed: Vec<Option<Vec<u8>>> = slides
            .par_iter()
            .zip(&keyed)
            .map(|(r, (rel, key))| {
                if self.fresh(rel, key) {
                    return Ok(None);
                }
                let bag = self.load_bag(r)?;
                let g = build_knn_graph(bag, k)?;
                let tmp = tempfile_path(&self.out_dir, rel);
                write_graph_csv(&g, &tmp)?;
                let bytes = read(&tmp)?;
                let _ = std::fs::remove_file(&tmp);
                Ok(Some(bytes))
            })
            .collect::<Result<_>>()?;
        for ((r, (rel, key)), bytes) in slides.iter().zip(keyed).zip(computed) {
            let hit = bytes.is_none();
            if let Some(b) = bytes {
                self.store(&rel, key, &b)?;
            }
            self.event(Stage::Graph, &r.stem, hit);
        }
        Ok(())
    }

    fn load_bag(&self, r: &SlideRef) -> Result<FeatureBag> {
        let path = self.path(&format!("features/{}.sgmb", r.stem));
        let bag = decode_feature_bag(&read(&path)?).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        if bag.slide_id != r.slide_id || bag.magnification != r.magnification || bag.patient_id != r.patient_id {
            return Err(Error::Data(format!("{} does not hold slide {}", path.display(), r.stem)));
        }
        Ok(bag)
    }

    fn load_graph(&self, r: &SlideRef) -> Result<SlideGraph> {
        let edges = read_graph_csv(&self.path(&format!("graphs/{}.csv", r.stem)))?;
        SlideGraph::from_edges(self.load_bag(r)?, self.config.graph.k, edges)
    }

    fn load_graphs(&self, slides: &[SlideRef]) -> Result<Vec<SlideGraph>> {
        slides.par_iter().map(|r| self.load_graph(r)).collect()
    }

    /// Digests of every slide's features and graph, in slide order.
    fn input_digests(&self, slides: &[SlideRef]) -> Result<Vec<(String, String)>> {
        slides
            .par_iter()
            .map(|r| {
                let f = self.digest(&format!("features/{}.sgmb", r.stem))?;
                let g = self.digest(&format!("graphs/{}.csv", r.stem))?;
                Ok((r.stem.clone(), sha256_hex(format!("{f}{g}").as_bytes())))
            })
            .collect()
    }

    /// Train config with the model's input width taken from the bags.
    fn train_config(&self, graphs: &[SlideGraph]) -> Result<TrainConfig> {
        let mut cfg = self.config.train.clone();
        let dims: BTreeSet<usize> = graphs.iter().map(|g| g.bag.dim()).collect();
        match dims.len() {
            0 => return Err(Error::Data("no slides at the selected magnifications".into())),
            1 => cfg.model.input_dim = *dims.first().unwrap(),
            _ => return Err(Error::Data(format!("feature bags disagree on width: {dims:?}"))),
        }
        Ok(cfg)
    }

    fn train(&mut self) -> Result<()> {
        let slides = self.slides()?;
        let patients = self.patients()?;
        let mags: Vec<Magnification> = self.config.mags().into_iter().collect();
        let digests = self.input_digests(&slides)?;
        let patients_digest = self.digest("patients.json")?;
        let graphs = self.load_graphs(&slides)?;
        let cfg = self.train_config(&graphs)?;
        let mut inputs: Vec<(&str, &str)> = vec![("patients", &patients_digest)];
        inputs.extend(digests.iter().map(|(a, b)| (a.as_str(), b.as_str())));
        let key = cache_key(Stage::Train, &(&cfg, &mags), &inputs);

        let mut outputs = vec!["models/folds.csv".to_string()];
        for f in 0..cfg.folds {
            outputs.push(format!("models/fold{f}.ckpt"));
            outputs.extend(mags.iter().map(|m| format!("logs/fold{f}_x{m}.csv")));
        }
        if outputs.iter().all(|o| self.fresh(o, &key)) {
            self.event(Stage::Train, "models", true);
            return Ok(());
        }

        let labels: Vec<PatientLabel> = patients.iter().map(|p| p.label.clone()).collect();
        let by_id: BTreeMap<&str, &PatientLabel> = labels.iter().map(|p| (p.patient_id.as_str(), p)).collect();
        let labeled: Vec<LabeledGraph> = graphs
            .into_iter()
            .map(|g| {
                let p = by_id
                    .get(g.bag.patient_id.as_str())
                    .ok_or_else(|| Error::Data(format!("slide {} has no patient record", g.bag.slide_id)))?;
                Ok(LabeledGraph { label: p.label, graph: g })
            })
            .collect::<Result<_>>()?;
        let cv = cross_validate(&labels, &labeled, &mags, &cfg)?;

        let mut folds_csv = String::from("patient_id,fold\n");
        for (p, f) in labels.iter().zip(&cv.fold_of) {
            folds_csv.push_str(&format!("{},{f}\n", p.patient_id));
        }
        self.store("models/folds.csv", key.clone(), folds_csv.as_bytes())?;
        for (f, fold) in cv.folds.iter().enumerate() {
            self.store(&format!("models/fold{f}.ckpt"), key.clone(), &fold.checkpoint().encode())?;
            for (m, t) in &fold.scales {
                self.store(&format!("logs/fold{f}_x{m}.csv"), key.clone(), t.log.to_csv().as_bytes())?;
            }
        }
        self.event(Stage::Train, "models", false);
        Ok(())
    }

    fn read_folds(&self) -> Result<BTreeMap<String, usize>> {
        let path = self.path("models/folds.csv");
        let mut rdr = csv::Reader::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut out = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let fold = rec.get(1).and_then(|s| s.parse().ok());
            match (rec.get(0), fold) {
                (Some(p), Some(f)) => {
                    out.insert(p.to_string(), f);
                }
                _ => return Err(Error::Data(format!("{}: bad row {rec:?}", path.display()))),
            }
        }
        Ok(out)
    }

    /// Writes `predictions.csv`: one row per patient and scale plus an
    /// `ensemble` row. Without `checkpoint`, each patient is scored by the
    /// model of the fold that held it out; with it, every patient is
    /// scored by that one model.
    pub fn predict(&mut self, checkpoint: Option<&Path>) -> Result<()> {
        let r = self.predict_inner(checkpoint);
        let saved = self.save_cache();
        r.and(saved).map_err(|e| stage_error(Stage::Predict, e))
    }

    fn predict_inner(&mut self, checkpoint: Option<&Path>) -> Result<()> {
        let slides = self.slides()?;
        let patients = self.patients()?;
        let mut inputs = self.input_digests(&slides)?;
        inputs.push(("patients".into(), self.digest("patients.json")?));
        let (models, assign): (Vec<Checkpoint>, BTreeMap<String, usize>) = match checkpoint {
            Some(path) => {
                let bytes = read(path)?;
                inputs.push(("checkpoint".into(), sha256_hex(&bytes)));
                let ck = Checkpoint::decode(&bytes)?;
                (vec![ck], patients.iter().map(|p| (p.label.patient_id.clone(), 0)).collect())
            }
            None => {
                let folds = self.read_folds()?;
                let n = folds.values().max().map_or(0, |m| m + 1);
                let mut cks = Vec::with_capacity(n);
                for f in 0..n {
                    let rel = format!("models/fold{f}.ckpt");
                    let bytes = read(&self.path(&rel))?;
                    inputs.push((rel, sha256_hex(&bytes)));
                    cks.push(Checkpoint::decode(&bytes)?);
                }
                inputs.push(("folds".into(), self.digest("models/folds.csv")?));
                (cks, folds)
            }
        };
        let mags: Vec<Magnification> = self.config.mags().into_iter().collect();
        let refs: Vec<(&str, &str)> = inputs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let key = cache_key(Stage::Predict, &mags, &refs);
        if self.fresh("predictions.csv", &key) {
            self.event(Stage::Predict, "predictions", true);
            return Ok(());
        }

        let graphs = self.load_graphs(&slides)?;
        let mut by_patient: BTreeMap<&str, Vec<&SlideGraph>> = BTreeMap::new();
        for g in &graphs {
            by_patient.entry(g.bag.patient_id.as_str()).or_default().push(g);
        }
        let rows: Vec<Vec<PatientPrediction>> = patients
            .par_iter()
            .map(|p| {
                let id = &p.label.patient_id;
                let f = *assign
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("patient {id} has no fold assignment")))?;
                let ck = &models[f];
                let mut scale_probs = BTreeMap::new();
                for &m in &mags {
                    let gs: Vec<&SlideGraph> = by_patient
                        .get(id.as_str())
                        .map(|v| v.iter().copied().filter(|g| g.bag.magnification == m).collect())
                        .unwrap_or_default();
                    if gs.is_empty() {
                        continue;
                    }
                    let model = ck
                        .scales
                        .get(&m)
                        .ok_or_else(|| Error::Data(format!("checkpoint has no x{m} model")))?;
                    let probs = predict(&gs, &model.ema)?;
                    scale_probs.insert(m, probs.iter().sum::<f64>() / probs.len() as f64);
                }
                if scale_probs.is_empty() {
                    return Err(Error::Data(format!("patient {id} has no slides at the selected magnifications")));
                }
                let ensemble = multiscale_ensemble(&scale_probs, &ck.ensemble_weights)?;
                let row = |scale: String, prob: f64| PatientPrediction {
                    patient_id: id.clone(),
                    cancer_type: p.label.cancer_type,
                    scale,
                    prob,
                    label: p.label.label,
                    metadata: p.metadata.clone(),
                };
                let mut out: Vec<PatientPrediction> = scale_probs.iter().map(|(m, &q)| row(m.to_string(), q)).collect();
                out.push(row(ENSEMBLE_SCALE.into(), ensemble));
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let rows: Vec<PatientPrediction> = rows.into_iter().flatten().collect();
        let tmp = tempfile_path(&self.out_dir, "predictions.csv");
        write_predictions_csv(&tmp, &rows)?;
        let bytes = read(&tmp)?;
        let _ = std::fs::remove_file(&tmp);
        self.store("predictions.csv", key, &bytes)?;
        self.event(Stage::Predict, "predictions", false);
        Ok(())
    }

    fn evaluate(&mut self) -> Result<()> {
        let preds = read_predictions_csv(&self.path("predictions.csv"))?;
        let patients = self.patients()?;
        let key = cache_key(
            Stage::Evaluate,
            &(&self.config.evaluate, self.config.seed),
            &[("predictions", &self.digest("predictions.csv")?), ("patients", &self.digest("patients.json")?)],
        );
        let mut scales: Vec<String> = vec![ENSEMBLE_SCALE.into()];
        if self.config.evaluate.per_scale {
            let present: BTreeSet<&str> = preds.iter().map(|p| p.scale.as_str()).collect();
            scales.extend(
                Magnification::ALL
                    .iter()
                    .map(|m| m.to_string())
                    .filter(|s| present.contains(s.as_str())),
            );
        }
        let dir_of = |s: &str| if s == ENSEMBLE_SCALE { String::new() } else { format!("scales/x{s}/") };
        let files: Vec<String> = scales
            .iter()
            .flat_map(|s| ["report.json", "roc.csv", "km.csv"].map(|f| format!("{}{f}", dir_of(s))))
            .collect();
        if files.iter().all(|f| self.fresh(f, &key)) {
            self.event(Stage::Evaluate, "report", true);
            return Ok(());
        }

        let survival: BTreeMap<String, (f64, bool)> = patients
            .iter()
            .filter_map(|p| p.label.survival.as_ref().map(|s| (p.label.patient_id.clone(), (s.time, s.event))))
            .collect();
        let cfg = EvalConfig {
            n_boot: self.config.evaluate.n_boot,
            level: self.config.evaluate.level,
            seed: self.config.seed,
            subgroup_keys: self.config.evaluate.subgroup_keys.clone(),
        };
        let tmp = self.out_dir.join(".eval-tmp");
        for s in &scales {
            let subset: Vec<PatientPrediction> = preds.iter().filter(|p| p.scale == *s).cloned().collect();
            let eval = evaluate(&subset, &survival, &cfg)?;
            write_evaluation(&eval, &tmp)?;
            for f in ["report.json", "roc.csv", "km.csv"] {
                let bytes = read(&tmp.join(f))?;
                self.store(&format!("{}{f}", dir_of(s)), key.clone(), &bytes)?;
            }
        }
        let _ = std::fs::remove_dir_all(&tmp);
        self.event(Stage::Evaluate, "report", false);
        Ok(())
    }

    fn heatmap_slides(&self, slides: &[SlideRef]) -> Result<Vec<SlideRef>> {
        let hm = &self.config.heatmap;
        if !hm.slides.is_empty() {
            return hm
                .slides
                .iter()
                .map(|stem| {
                    slides
                        .iter()
                        .find(|s| s.stem == *stem)
                        .cloned()
                        .ok_or_else(|| Error::InvalidInput(format!("heatmap slide {stem} is not in the run")))
                })
                .collect();
        }
        let mut preds: Vec<PatientPrediction> = read_predictions_csv(&self.path("predictions.csv"))?
            .into_iter()
            .filter(|p| p.scale == ENSEMBLE_SCALE)
            .collect();
        preds.sort_by(|a, b| b.prob.total_cmp(&a.prob).then_with(|| a.patient_id.cmp(&b.patient_id)));
        let top: BTreeSet<&str> = preds.iter().take(hm.count).map(|p| p.patient_id.as_str()).collect();
        Ok(slides.iter().filter(|s| top.contains(s.patient_id.as_str())).cloned().collect())
    }

    fn heatmaps(&mut self) -> Result<()> {
        let slides = self.slides()?;
        let chosen = self.heatmap_slides(&slides)?;
        let folds = self.read_folds()?;
        let hm = self.config.heatmap.clone();
        let mut jobs = Vec::with_capacity(chosen.len());
        for r in &chosen {
            let f = *folds
                .get(&r.patient_id)
                .ok_or_else(|| Error::Data(format!("patient {} has no fold assignment", r.patient_id)))?;
            let ck_rel = format!("models/fold{f}.ckpt");
            let mut inputs = vec![
                ("checkpoint".to_string(), self.digest(&ck_rel)?),
                ("features".to_string(), self.digest(&format!("features/{}.sgmb", r.stem))?),
                ("graph".to_string(), self.digest(&format!("graphs/{}.csv", r.stem))?),
            ];
            if let Some(img) = &r.image {
                inputs.push(("image".to_string(), sha256_hex(&read(img)?)));
            }
            let refs: Vec<(&str, &str)> = inputs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            let key = cache_key(Stage::Heatmap, &hm, &refs);
            jobs.push((r, ck_rel, key));
        }
        let computed: Vec<Option<(Vec<u8>, Vec<u8>)>> = jobs
            .par_iter()
            .map(|(r, ck_rel, key)| {
                let csv = format!("heatmaps/{}.csv", r.stem);
                let png = format!("heatmaps/{}.png", r.stem);
                if self.fresh(&csv, key) && self.fresh(&png, key) {
                    return Ok(None);
                }
                let ck = Checkpoint::decode(&read(&self.path(ck_rel))?)?;
                let model = ck
                    .scales
                    .get(&r.magnification)
                    .ok_or_else(|| Error::Data(format!("{ck_rel} has no x{} model", r.magnification)))?;
                let g = self.load_graph(r)?;
                let out = forward_single_scale(&g, &model.ema)?;
                let probs = if hm.tile_probs { Some(tile_probabilities(&g, &model.ema)?) } else { None };
                let base = r.image.as_ref().map(|_| load_image(r)).transpose()?;
                let spec = HeatmapSpec {
                    slide_id: r.slide_id.clone(),
                    magnification: r.magnification,
                    normalization: hm.normalization,
                    opacity: hm.opacity,
                };
                let map = render_heatmap(&g.bag.coords, &out.attention, base.as_ref().map(|b| &b.pixels), &spec, probs.as_deref())?;
                let tmp = self.out_dir.join(format!(".heatmap-tmp-{}", r.stem));
                map.write(&tmp, "h")?;
                let pair = (read(&tmp.join("h.csv"))?, read(&tmp.join("h.png"))?);
                let _ = std::fs::remove_dir_all(&tmp);
                Ok(Some(pair))
            })
            .collect::<Result<_>>()?;
        for ((r, _, key), out) in jobs.iter().zip(computed) {
            let hit = out.is_none();
            if let Some((csv, png)) = out {
                self.store(&format!("heatmaps/{}.csv", r.stem), key.clone(), &csv)?;
                self.store(&format!("heatmaps/{}.png", r.stem), key.clone(), &png)?;
            }
            self.event(Stage::Heatmap, &r.stem, hit);
        }
        Ok(())
    }
}

fn load_image(r: &SlideRef) -> Result<SlideImage> {
    let path = r
        .image
        .as_ref()
        .ok_or_else(|| Error::Data(format!("slide {} has no source image", r.stem)))?;
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    SlideImage::new(&r.slide_id, &r.patient_id, r.magnification, img)
}

/// Scratch file next to the output directory's artifacts, unique per target.
fn tempfile_path(out_dir: &Path, rel: &str) -> PathBuf {
    out_dir.join(format!(".tmp-{}", rel.replace('/', "-")))
}
