//! Experiment configuration (TOML or YAML) and its expansion into specs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use synthaug_core::data::{SourceFilterSpec, SplitSpec};
use synthaug_core::extract::{CannyParams, CANNY, FALSE_SEGMENTATION};
use synthaug_core::quality::{Polarity, BRISQUE, CONFIDENCE, CORESET};
use synthaug_core::sample::TieBreak;

use crate::error::{Error, Result};
use crate::preset::{self, LEVELS};

pub const RANDOM: &str = "random";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub extractor: ExtractorConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub matrix: MatrixConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Coco,
    Flickr,
    /// A manifest JSON of real records.
    Manifest,
    /// Procedural single-person scenes generated on the fly.
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Directory image paths are resolved against.
    #[serde(default)]
    pub root: PathBuf,
    /// COCO instances JSON, Flickr sentences directory, or manifest JSON.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// COCO captions JSON or Flickr region (XML) directory.
    #[serde(default)]
    pub secondary: Option<PathBuf>,
    /// Prefix (relative to `root`) of image files named in COCO/Flickr annotations.
    #[serde(default)]
    pub image_prefix: PathBuf,
    #[serde(default = "default_toy_count")]
    pub toy_count: usize,
    #[serde(default = "default_toy_size")]
    pub toy_size: [u32; 2],
    #[serde(default)]
    pub filter: SourceFilterSpec,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default = "default_small")]
    pub baseline_small: usize,
    #[serde(default = "default_large")]
    pub baseline_large: usize,
}

fn default_toy_count() -> usize {
    10
}
fn default_toy_size() -> [u32; 2] {
    [64, 64]
}
fn default_small() -> usize {
    synthaug_core::data::SMALL_BASELINE
}
fn default_large() -> usize {
    synthaug_core::data::LARGE_BASELINE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalExtractorConfig {
    pub name: String,
    pub command: PathBuf,
    #[serde(default)]
    pub transposes_geometry: bool,
    #[serde(default)]
    pub max_parallelism: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    #[serde(default)]
    pub canny: CannyParams,
    #[serde(default)]
    pub external: Vec<ExternalExtractorConfig>,
    /// Registers `false_segmentation` on top of the named segmentation extractor.
    #[serde(default)]
    pub false_segmentation_of: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    /// `mock` or `external`.
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default)]
    pub command: Option<PathBuf>,
    #[serde(default)]
    pub backend_id: Option<String>,
    #[serde(default)]
    pub supported_features: Vec<String>,
    #[serde(default)]
    pub max_parallelism: Option<usize>,
    #[serde(default = "default_controlnet")]
    pub controlnet_id: String,
    #[serde(default = "default_variants")]
    pub variants_per_image: usize,
    #[serde(default = "default_vocabulary")]
    pub vocabulary: Vec<Vec<String>>,
}

fn default_backend() -> String {
    "mock".into()
}
fn default_controlnet() -> String {
    "controlnet".into()
}
fn default_variants() -> usize {
    5
}
pub fn default_vocabulary() -> Vec<Vec<String>> {
    vec![
        vec!["man".into(), "woman".into(), "child".into()],
        vec!["red".into(), "black".into(), "yellow".into()],
    ]
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            backend: default_backend(),
            command: None,
            backend_id: None,
            supported_features: Vec::new(),
            max_parallelism: None,
            controlnet_id: default_controlnet(),
            variants_per_image: default_variants(),
            vocabulary: default_vocabulary(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalMetricConfig {
    pub name: String,
    pub command: PathBuf,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Linear regression model over the 36 BRISQUE features.
    #[serde(default)]
    pub brisque_model: Option<PathBuf>,
    /// Clean-image statistics; the bundled file is used when both are absent.
    #[serde(default)]
    pub surrogate: Option<PathBuf>,
    #[serde(default)]
    pub external: Vec<ExternalMetricConfig>,
    #[serde(default = "default_failure_fraction")]
    pub max_failure_fraction: f64,
}

fn default_failure_fraction() -> f64 {
    synthaug_core::quality::DEFAULT_MAX_FAILURE_FRACTION
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { brisque_model: None, surrogate: None, external: Vec::new(), max_failure_fraction: default_failure_fraction() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "default_increment")]
    pub increment: usize,
    #[serde(default)]
    pub tie_break: TieBreak,
}

fn default_increment() -> usize {
    125
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { increment: default_increment(), tie_break: TieBreak::ById }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    #[serde(default = "default_matrix_name")]
    pub name: String,
    #[serde(default = "default_extractors")]
    pub extractors: Vec<String>,
    #[serde(default = "default_sampling")]
    pub sampling: Vec<String>,
    #[serde(default = "default_levels")]
    pub augmentation: Vec<String>,
    #[serde(default = "default_counts")]
    pub counts: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Train the two real-only baselines in every augmentation level.
    #[serde(default = "yes")]
    pub baselines: bool,
    /// Train duplication sets matching each augmented size.
    #[serde(default)]
    pub ablation: bool,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_max_failed")]
    pub max_failed_fraction: f64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_matrix_name() -> String {
    "default".into()
}
fn default_extractors() -> Vec<String> {
    vec![CANNY.into()]
}
fn default_sampling() -> Vec<String> {
    vec![RANDOM.into()]
}
fn default_levels() -> Vec<String> {
    vec!["low".into()]
}
fn default_counts() -> Vec<usize> {
    vec![250, 500, 750, 1000, 1250]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn yes() -> bool {
    true
}
fn default_max_failed() -> f64 {
    0.25
}
fn default_workers() -> usize {
    1
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            name: default_matrix_name(),
            extractors: default_extractors(),
            sampling: default_sampling(),
            augmentation: default_levels(),
            counts: default_counts(),
            seeds: default_seeds(),
            baselines: true,
            ablation: false,
            master_seed: 0,
            max_failed_fraction: default_max_failed(),
            workers: default_workers(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    /// `mock` or `external`.
    #[serde(default = "default_backend")]
    pub adapter: String,
    #[serde(default)]
    pub command: Option<PathBuf>,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default)]
    pub max_parallelism: Option<usize>,
    /// Per-level overrides of preset parameters.
    #[serde(default)]
    pub presets: BTreeMap<String, BTreeMap<String, f64>>,
}

fn default_epochs() -> u32 {
    300
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self { adapter: default_backend(), command: None, epochs: default_epochs(), max_parallelism: None, presets: BTreeMap::new() }
    }
}

/// Parses TOML or YAML by extension (`.yaml`/`.yml` are YAML, everything else TOML)
/// and resolves relative paths against the file's directory.
pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_yaml = path.extension().is_some_and(|e| e == "yaml" || e == "yml");
    let mut cfg = parse_config(&text, is_yaml).map_err(|reason| Error::Parse { path: path.to_path_buf(), reason })?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.resolve_paths(base);
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str, yaml: bool) -> std::result::Result<Config, String> {
    if yaml {
        serde_yaml::from_str(text).map_err(|e| e.to_string())
    } else {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl Config {
    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.dataset.root);
        for p in [&mut self.dataset.path, &mut self.dataset.secondary, &mut self.generation.command, &mut self.trainer.command]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        for p in [&mut self.metrics.brisque_model, &mut self.metrics.surrogate].into_iter().flatten() {
            resolve(base, p);
        }
        for e in &mut self.extractor.external {
            resolve(base, &mut e.command);
        }
        for m in &mut self.metrics.external {
            resolve(base, &mut m.command);
        }
    }

    pub fn extractor_names(&self) -> BTreeSet<String> {
        let mut names: BTreeSet<String> = [CANNY.to_string()].into();
        names.extend(self.extractor.external.iter().map(|e| e.name.clone()));
        if self.extractor.false_segmentation_of.is_some() {
            names.insert(FALSE_SEGMENTATION.into());
        }
        names
    }

    pub fn sampling_names(&self) -> BTreeSet<String> {
        let mut names: BTreeSet<String> =
            [RANDOM, BRISQUE, CONFIDENCE, CORESET].into_iter().map(str::to_string).collect();
        names.extend(self.metrics.external.iter().map(|m| m.name.clone()));
        names
    }

    pub fn pool_size(&self) -> usize {
        self.dataset.baseline_small * self.generation.variants_per_image
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        d.filter.validate().map_err(|e| Error::config("dataset.filter", e.to_string()))?;
        if matches!(d.source, DatasetSource::Coco | DatasetSource::Flickr | DatasetSource::Manifest) && d.path.is_none() {
            return Err(Error::config("dataset.path", "required for this source"));
        }
        if matches!(d.source, DatasetSource::Flickr) && d.secondary.is_none() {
            return Err(Error::config("dataset.secondary", "flickr needs the region annotation directory"));
        }
        if d.baseline_small == 0 || d.baseline_small > d.baseline_large {
            return Err(Error::config("dataset.baseline_small", "must be positive and not exceed baseline_large"));
        }
        if d.source == DatasetSource::Toy && d.toy_size.iter().any(|&s| s < 16) {
            return Err(Error::config("dataset.toy_size", "images must be at least 16x16"));
        }

        let mut seen = BTreeSet::new();
        for e in &self.extractor.external {
            if e.name == CANNY || e.name == FALSE_SEGMENTATION || !seen.insert(e.name.clone()) {
                return Err(Error::config("extractor.external", format!("duplicate extractor name {}", e.name)));
            }
        }
        if let Some(inner) = &self.extractor.false_segmentation_of {
            if !seen.contains(inner) && inner != CANNY {
                return Err(Error::config("extractor.false_segmentation_of", format!("unknown extractor {inner}")));
            }
        }
        self.extractor.canny.validate().map_err(|e| Error::config("extractor.canny", e.to_string()))?;

        let g = &self.generation;
        match g.backend.as_str() {
            "mock" => {}
            "external" if g.command.is_some() => {}
            "external" => return Err(Error::config("generation.command", "required for the external backend")),
            other => return Err(Error::config("generation.backend", format!("unknown backend {other:?}"))),
        }
        if g.variants_per_image == 0 {
            return Err(Error::config("generation.variants_per_image", "must be positive"));
        }
        synthaug_core::prompt::Vocabulary::new(g.vocabulary.clone())
            .map_err(|e| Error::config("generation.vocabulary", e.to_string()))?;

        if !(0.0..=1.0).contains(&self.metrics.max_failure_fraction) {
            return Err(Error::config("metrics.max_failure_fraction", "must be in [0, 1]"));
        }
        for m in &self.metrics.external {
            if self.sampling_names().iter().filter(|n| **n == m.name).count() > 1
                || [RANDOM, BRISQUE, CONFIDENCE, CORESET].contains(&m.name.as_str())
            {
                return Err(Error::config("metrics.external", format!("metric name {} clashes with a built-in", m.name)));
            }
        }
        if self.sampling.increment == 0 {
            return Err(Error::config("sampling.increment", "must be positive"));
        }

        let m = &self.matrix;
        let extractors = self.extractor_names();
        for e in &m.extractors {
            if !extractors.contains(e) {
                return Err(Error::config("matrix.extractors", format!("unknown extractor {e:?}")));
            }
        }
        let samplers = self.sampling_names();
        for s in &m.sampling {
            if !samplers.contains(s) {
                return Err(Error::config("matrix.sampling", format!("unknown sampling method {s:?}")));
            }
        }
        for a in &m.augmentation {
            if !LEVELS.contains(&a.as_str()) {
                return Err(Error::config("matrix.augmentation", format!("unknown level {a:?}")));
            }
            preset::preset_with(a, &self.trainer.presets)?;
        }
        for k in self.trainer.presets.keys() {
            if !LEVELS.contains(&k.as_str()) {
                return Err(Error::config("trainer.presets", format!("unknown level {k:?}")));
            }
        }
        if m.extractors.is_empty() || m.sampling.is_empty() || m.augmentation.is_empty() || m.seeds.is_empty() {
            return Err(Error::config("matrix", "extractors, sampling, augmentation and seeds must be non-empty"));
        }
        let pool = self.pool_size();
        for &c in &m.counts {
            if c > pool {
                return Err(Error::config("matrix.counts", format!("{c} exceeds the synthetic pool of {pool}")));
            }
            if c % self.sampling.increment != 0 && m.sampling.iter().any(|s| s != RANDOM) {
                return Err(Error::config(
                    "matrix.counts",
                    format!("{c} is not a multiple of sampling.increment {}", self.sampling.increment),
                ));
            }
        }
        if !(0.0..=1.0).contains(&m.max_failed_fraction) {
            return Err(Error::config("matrix.max_failed_fraction", "must be in [0, 1]"));
        }
        if m.workers == 0 {
            return Err(Error::config("matrix.workers", "must be positive"));
        }
        match self.trainer.adapter.as_str() {
            "mock" => {}
            "external" if self.trainer.command.is_some() => {}
            "external" => return Err(Error::config("trainer.command", "required for the external adapter")),
            other => return Err(Error::config("trainer.adapter", format!("unknown adapter {other:?}"))),
        }
        Ok(())
    }

    /// Expands the matrix into specs: one per extractor x sampling x level, plus
    /// baselines and ablation sets per level when enabled.
    pub fn specs(&self) -> Vec<ExperimentSpec> {
        let m = &self.matrix;
        let mut out = Vec::new();
        let base = |kind, extractor: Option<&str>, sampling: Option<&str>, level: &str, counts: Vec<usize>| ExperimentSpec {
            kind,
            dataset: self.dataset.source,
            extractor: extractor.map(str::to_string),
            sampling: sampling.map(str::to_string),
            augmentation: level.to_string(),
            trainer: self.trainer.adapter.clone(),
            epochs: self.trainer.epochs,
            counts,
            seeds: m.seeds.clone(),
        };
        for level in &m.augmentation {
            if m.baselines {
                out.push(base(SpecKind::BaselineSmall, None, None, level, vec![0]));
                out.push(base(SpecKind::BaselineLarge, None, None, level, vec![0]));
            }
            for e in &m.extractors {
                for s in &m.sampling {
                    out.push(base(SpecKind::Synthetic, Some(e), Some(s), level, m.counts.clone()));
                }
            }
            if m.ablation {
                out.push(base(SpecKind::Ablation, None, None, level, m.counts.clone()));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecKind {
    /// The small real baseline plus `count` synthetic images.
    Synthetic,
    BaselineSmall,
    BaselineLarge,
    /// The small real baseline duplicated up to its size plus `count`.
    Ablation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: SpecKind,
    pub dataset: DatasetSource,
    pub extractor: Option<String>,
    pub sampling: Option<String>,
    pub augmentation: String,
    pub trainer: String,
    pub epochs: u32,
    pub counts: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Serialize)]
struct SpecIdentity<'a> {
    kind: SpecKind,
    dataset: DatasetSource,
    extractor: &'a Option<String>,
    sampling: &'a Option<String>,
    augmentation: &'a str,
    trainer: &'a str,
    epochs: u32,
}

impl ExperimentSpec {
    /// 16 hex digits of SHA-256 over the key-sorted JSON of the spec's identity
    /// (everything except the count and seed lists, which index its cells).
    pub fn hash(&self) -> String {
        let id = SpecIdentity {
            kind: self.kind,
            dataset: self.dataset,
            extractor: &self.extractor,
            sampling: &self.sampling,
            augmentation: &self.augmentation,
            trainer: &self.trainer,
            epochs: self.epochs,
        };
        // serde_json::Value keeps object keys sorted
        let canonical = serde_json::to_value(&id).expect("spec serializes").to_string();
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    /// Short label used in charts and tables.
    pub fn label(&self) -> String {
        match self.kind {
            SpecKind::Synthetic => format!(
                "{} / {} / {}",
                self.extractor.as_deref().unwrap_or("-"),
                self.sampling.as_deref().unwrap_or("-"),
                self.augmentation
            ),
            SpecKind::BaselineSmall => format!("baseline small / {}", self.augmentation),
            SpecKind::BaselineLarge => format!("baseline large / {}", self.augmentation),
            SpecKind::Ablation => format!("ablation / {}", self.augmentation),
        }
    }
}
