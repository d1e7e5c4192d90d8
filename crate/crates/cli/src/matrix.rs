//! Experiment matrix: shared preparation, per-cell training and evaluation,
//! resumption and aggregation.
//!
//! Layout under `<out>/<matrix>/`:
//! - `shared/`: filtered source, splits, baselines, synthetic pools, cached scores
//! - `<spec-hash>/<count>/<seed>/`: manifest, selection, weights, detections, eval
//! - `specs.json`, `results.json`, append-only `index.jsonl`
//!
//! A cell is complete once its `eval.json` exists; reruns skip complete cells.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use synthaug_core::data::{self, build_ablation, build_synthetic_pool, filter_source, mix, split_real};
use synthaug_core::detector::PredictionFile;
use synthaug_core::eval::{evaluate, Detection, EvalConfig, EvalResult};
use synthaug_core::extract::{Extractor, ExtractorDescriptor, ExtractorKind, FALSE_SEGMENTATION};
use synthaug_core::generate::{ExternalGenerator, GeneratorBackend, GeneratorDescriptor, GeneratorKind, MockGenerator, Synthesizer};
use synthaug_core::manifest::{validate_manifest_with_sources, write_file, DatasetManifest, Provenance, QualityRecord};
use synthaug_core::prompt::Vocabulary;
use synthaug_core::quality::{
    self, score_pool, BrisqueMetric, ExternalMetric, MetricDescriptor, MetricKind, Polarity, PoolScores, QualityMetric,
    ReferenceModel, BRISQUE, CONFIDENCE, CORESET,
};
use synthaug_core::sample::{self, rounds_select, SelectionOutput, SelectionPlan, SelectionSource};

use crate::config::{Config, DatasetSource, ExperimentSpec, SpecKind, RANDOM};
use crate::error::{Error, Result};
use crate::preset::preset_with;
use crate::trainer::{ExternalTrainer, MockTrainer, TrainRequest, Trainer};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Forces the mock generator and mock trainer.
    pub mock: bool,
    /// Overrides `matrix.workers`.
    pub workers: Option<usize>,
    /// Overrides `matrix.master_seed`.
    pub master_seed: Option<u64>,
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn save_json<T: Serialize>(v: &T, path: &Path) -> Result<()> {
    Ok(write_file(path, to_json(v).as_bytes())?)
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), reason: e.to_string() })
}

/// Everything cells share: splits, baselines, pools, cached scores.
pub struct Workspace {
    pub cfg: Config,
    pub master_seed: u64,
    pub dir: PathBuf,
    pub data_root: PathBuf,
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
    pub small: DatasetManifest,
    pub large: DatasetManifest,
    pub pools: BTreeMap<String, DatasetManifest>,
    pub scores: BTreeMap<(String, String), Vec<QualityRecord>>,
    pub embeddings: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    pub trainer: Arc<dyn Trainer>,
}

pub fn build_extractor(cfg: &Config, name: &str) -> Result<Extractor> {
    let external = |n: &str| {
        cfg.extractor.external.iter().find(|e| e.name == n).map(|e| Extractor::External {
            descriptor: ExtractorDescriptor {
                name: e.name.clone(),
                kind: ExtractorKind::External,
                transposes_geometry: e.transposes_geometry,
                max_parallelism: e.max_parallelism,
            },
            command: e.command.clone(),
        })
    };
    let simple = |n: &str| -> Option<Extractor> {
        if n == synthaug_core::extract::CANNY {
            Some(Extractor::Canny(cfg.extractor.canny))
        } else {
            external(n)
        }
    };
    if name == FALSE_SEGMENTATION {
        let inner = cfg
            .extractor
            .false_segmentation_of
            .as_deref()
            .ok_or_else(|| Error::config("extractor.false_segmentation_of", "not configured"))?;
        let inner = simple(inner).ok_or_else(|| Error::config("extractor.false_segmentation_of", format!("unknown extractor {inner}")))?;
        return Ok(Extractor::FalseSegmentation(Box::new(inner)));
    }
    simple(name).ok_or_else(|| Error::config("matrix.extractors", format!("unknown extractor {name}")))
}

pub fn build_backend(cfg: &Config, mock: bool, scratch: &Path) -> Arc<dyn GeneratorBackend> {
    let g = &cfg.generation;
    match (mock, g.command.as_ref()) {
        (false, Some(command)) if g.backend == "external" => Arc::new(ExternalGenerator {
            descriptor: GeneratorDescriptor {
                backend_id: g.backend_id.clone().unwrap_or_else(|| "external".into()),
                kind: GeneratorKind::External,
                supported_features: g.supported_features.clone(),
                max_parallelism: g.max_parallelism,
            },
            command: command.clone(),
            scratch: scratch.to_path_buf(),
        }),
        _ => Arc::new(MockGenerator::default()),
    }
}

/// Metric by name: BRISQUE or a configured external scorer.
pub fn build_metric(cfg: &Config, name: &str, scratch: &Path) -> Result<Box<dyn QualityMetric>> {
    if name == BRISQUE {
        let model = match (&cfg.metrics.brisque_model, &cfg.metrics.surrogate) {
            (None, None) => ReferenceModel::bundled(),
            (m, s) => ReferenceModel::load(m.as_deref(), s.as_deref())?,
        };
        return Ok(Box::new(BrisqueMetric::new(model)));
    }
    let m = cfg
        .metrics
        .external
        .iter()
        .find(|m| m.name == name)
        .ok_or_else(|| Error::config("matrix.sampling", format!("{name} is not a pool-scoring metric")))?;
    Ok(Box::new(ExternalMetric {
        descriptor: MetricDescriptor { name: m.name.clone(), polarity: m.polarity, kind: MetricKind::ModelAgnostic },
        command: m.command.clone(),
        scratch: scratch.to_path_buf(),
    }))
}

pub fn metric_polarity(cfg: &Config, name: &str) -> Polarity {
    quality::builtin_descriptor(name)
        .map(|d| d.polarity)
        .or_else(|| cfg.metrics.external.iter().find(|m| m.name == name).map(|m| m.polarity))
        .unwrap_or(Polarity::LowerIsBetter)
}

pub fn load_source(cfg: &Config, data_root: &Path, master_seed: u64) -> Result<DatasetManifest> {
    let d = &cfg.dataset;
    let path = || d.path.clone().expect("validated: dataset.path present");
    Ok(match d.source {
        DatasetSource::Toy => data::write_toy_dataset(data_root, d.toy_count, (d.toy_size[0], d.toy_size[1]), master_seed)?,
        DatasetSource::Coco => data::load_coco(&path(), d.secondary.as_deref(), &d.image_prefix)?,
        DatasetSource::Flickr => {
            data::load_flickr(&path(), d.secondary.as_deref().expect("validated: flickr regions"), &d.image_prefix)?
        }
        DatasetSource::Manifest => DatasetManifest::load(&path())?,
    })
}

impl Workspace {
    pub fn prepare(cfg: &Config, out: &Path, opts: &RunOptions) -> Result<Self> {
        let master_seed = opts.master_seed.unwrap_or(cfg.matrix.master_seed);
        let dir = out.join(&cfg.matrix.name);
        let shared = dir.join("shared");
        let generated = cfg.dataset.source == DatasetSource::Toy;
        let data_root = if generated { shared.join("data") } else { cfg.dataset.root.clone() };

        let source = load_source(cfg, &data_root, master_seed)?;
        let filtered = filter_source(&source, &cfg.dataset.filter)?;
        let splits = split_real(&filtered, &cfg.dataset.split, master_seed)?;
        let (small, large) =
            data::build_baselines_sized(&splits.train, cfg.dataset.baseline_small, cfg.dataset.baseline_large, master_seed)?;
        for (m, name) in [(&filtered, "filtered"), (&splits.train, "train"), (&splits.val, "val"), (&splits.test, "test"), (&small, "baseline_small"), (&large, "baseline_large")] {
            m.save(&shared.join(format!("{name}.json")))?;
        }
        info!(
            "{} filtered records: train {}, val {}, test {}; baselines {} / {}",
            filtered.len(),
            splits.train.len(),
            splits.val.len(),
            splits.test.len(),
            small.len(),
            large.len()
        );

        let trainer: Arc<dyn Trainer> = if opts.mock || cfg.trainer.adapter == "mock" {
            let mut t = MockTrainer::new(&data_root);
            t.learn(&filtered);
            Arc::new(t)
        } else {
            Arc::new(ExternalTrainer {
                command: cfg.trainer.command.clone().expect("validated: trainer.command present"),
                dataset_root: data_root.clone(),
                max_parallelism: cfg.trainer.max_parallelism,
            })
        };

        let mut ws = Workspace {
            cfg: cfg.clone(),
            master_seed,
            dir,
            data_root,
            train: splits.train,
            val: splits.val,
            test: splits.test,
            small,
            large,
            pools: BTreeMap::new(),
            scores: BTreeMap::new(),
            embeddings: BTreeMap::new(),
            trainer,
        };
        let needs_pool = cfg.specs().iter().any(|s| s.kind == SpecKind::Synthetic);
        if needs_pool {
            for ext in &cfg.matrix.extractors {
                let pool = ws.pool(ext, opts, generated)?;
                ws.pools.insert(ext.clone(), pool);
            }
            ws.prepare_selection_inputs()?;
        }
        Ok(ws)
    }

    fn pool(&self, ext: &str, opts: &RunOptions, generated: bool) -> Result<DatasetManifest> {
        let shared = self.dir.join("shared");
        let manifest_path = shared.join("pools").join(format!("{ext}.json"));
        if manifest_path.exists() {
            return Ok(DatasetManifest::load(&manifest_path)?);
        }
        let images = if generated { self.data_root.join("synthetic").join(ext) } else { shared.join("pools").join(ext) };
        let vocabulary = Vocabulary::new(self.cfg.generation.vocabulary.clone())?;
        let synth = Synthesizer {
            extractor: build_extractor(&self.cfg, ext)?,
            vocabulary,
            backend: build_backend(&self.cfg, opts.mock, &shared.join("scratch").join(ext)),
            controlnet_id: self.cfg.generation.controlnet_id.clone(),
            master_seed: self.master_seed,
            dataset_root: self.data_root.clone(),
            output_dir: images,
        };
        let workers = opts.workers.unwrap_or(self.cfg.matrix.workers);
        let built = build_synthetic_pool(&self.small, &synth, self.cfg.generation.variants_per_image, workers)?;
        if let Some(s) = &built.shortfall {
            warn!("{ext}: pool has {} of {} images", s.produced, s.target);
            save_json(s, &shared.join("pools").join(format!("{ext}_shortfall.json")))?;
        }
        let sources: BTreeSet<String> = self.small.ids().into_iter().collect();
        let report = validate_manifest_with_sources(&built.manifest, &sources);
        if !report.is_valid() {
            return Err(Error::Invariant(format!("{ext} pool manifest invalid: {:?}", report.violations)));
        }
        built.manifest.save(&manifest_path)?;
        Ok(built.manifest)
    }

    /// Scores and embeddings shared by all cells of the same extractor.
    fn prepare_selection_inputs(&mut self) -> Result<()> {
        let shared = self.dir.join("shared");
        let samplers: BTreeSet<&String> = self.cfg.matrix.sampling.iter().collect();
        for (ext, pool) in &self.pools {
            for s in &samplers {
                let s = s.as_str();
                if s == RANDOM || s == CONFIDENCE {
                    continue;
                }
                if s == CORESET {
                    let path = shared.join("embeddings").join(format!("{ext}.json"));
                    let emb: BTreeMap<String, Vec<f64>> = if path.exists() {
                        load_json(&path)?
                    } else {
                        let mut both = self.small.clone();
                        both.records.extend(pool.records.iter().cloned());
                        let e = quality::brisque_embeddings(&both, &self.data_root)?;
                        save_json(&e, &path)?;
                        e
                    };
                    self.embeddings.insert(ext.clone(), sample::standardize(&emb));
                    continue;
                }
                let path = shared.join("scores").join(format!("{ext}__{s}.json"));
                let scores: PoolScores = if path.exists() {
                    load_json(&path)?
                } else {
                    let metric = build_metric(&self.cfg, s, &shared.join("scratch").join("metrics"))?;
                    let sc = score_pool(pool, &self.data_root, metric.as_ref(), self.cfg.metrics.max_failure_fraction)?;
                    save_json(&sc, &path)?;
                    sc
                };
                self.scores.insert((ext.clone(), s.to_string()), scores.records);
            }
        }
        Ok(())
    }

    fn assert_held_out_real(&self, training: &DatasetManifest) -> Result<()> {
        for (m, name) in [(&self.val, "validation"), (&self.test, "test")] {
            let synthetic = m.records.iter().filter(|r| r.provenance != Provenance::Real).count();
            if synthetic > 0 {
                return Err(Error::Invariant(format!("{name} split holds {synthetic} synthetic records")));
            }
        }
        let test_ids: BTreeSet<&str> = self.test.records.iter().map(|r| r.id.as_str()).collect();
        if let Some(r) = training.records.iter().find(|r| {
            test_ids.contains(r.id.as_str()) || r.lineage.as_ref().is_some_and(|l| test_ids.contains(l.source_id.as_str()))
        }) {
            return Err(Error::Invariant(format!("training record {} overlaps the test split", r.id)));
        }
        Ok(())
    }

    fn train_and_predict_pool(
        &self,
        training: &DatasetManifest,
        pool: &DatasetManifest,
        dir: &Path,
        seed: u64,
        preset_path: &Path,
    ) -> Result<Vec<QualityRecord>> {
        let manifest_path = dir.join("manifest.json");
        training.save(&manifest_path)?;
        let weights = dir.join("weights");
        self.trainer.train(&TrainRequest {
            manifest: &manifest_path,
            dataset_root: &self.data_root,
            epochs: self.cfg.trainer.epochs,
            aug: preset_path,
            out: &weights,
            seed,
        })?;
        let images: Vec<PathBuf> = pool.records.iter().map(|r| r.resolve(&self.data_root)).collect();
        let preds = self.trainer.predict(&weights, &images, &dir.join("scratch"))?;
        Ok(pool
            .records
            .iter()
            .zip(preds)
            .map(|(r, boxes)| QualityRecord {
                image_id: r.id.clone(),
                metric_name: CONFIDENCE.into(),
                score: boxes.iter().filter(|b| b.class_id == 0).map(|b| b.confidence).fold(0.0, f64::max),
            })
            .collect())
    }

    fn select(&self, spec: &ExperimentSpec, count: usize, seed: u64, cell: &Path, preset_path: &Path) -> Result<SelectionOutput> {
        let ext = spec.extractor.as_deref().expect("synthetic spec has an extractor");
        let sampling = spec.sampling.as_deref().expect("synthetic spec has a sampling method");
        let pool = &self.pools[ext];
        let inc = self.cfg.sampling.increment;
        let plan = SelectionPlan {
            metric_name: sampling.to_string(),
            rounds: count / inc,
            increment: inc,
            seed,
            tie_break: self.cfg.sampling.tie_break,
        };
        if count == 0 {
            return Ok(SelectionOutput { plan, rounds: vec![Vec::new()] });
        }
        let pool_ids = pool.ids();
        if sampling == RANDOM {
            let ids = sample::random_select(&pool_ids, count, seed)?;
            return Ok(SelectionOutput { plan: SelectionPlan { rounds: 1, increment: count, ..plan }, rounds: vec![ids] });
        }
        let rounds = match sampling {
            CORESET => {
                let base = self.small.ids();
                rounds_select(&plan, SelectionSource::Embeddings { embeddings: &self.embeddings[ext], base_ids: &base, pool_ids: &pool_ids }, None)?
            }
            CONFIDENCE => {
                let initial = self.train_and_predict_pool(&self.small, pool, &cell.join("rounds").join("0"), seed, preset_path)?;
                let mut rescore = |round: usize, selected: &[String]| -> synthaug_core::Result<Vec<QualityRecord>> {
                    let training = mix(&self.small, pool, selected)?;
                    self.train_and_predict_pool(&training, pool, &cell.join("rounds").join((round + 1).to_string()), seed, preset_path)
                        .map_err(|e| synthaug_core::Error::Metric { metric: CONFIDENCE.into(), reason: e.to_string() })
                };
                rounds_select(
                    &plan,
                    SelectionSource::Scores { records: &initial, polarity: Polarity::LowerIsBetter },
                    Some(&mut rescore),
                )?
            }
            metric => {
                let records = self
                    .scores
                    .get(&(ext.to_string(), metric.to_string()))
                    .ok_or_else(|| Error::Invariant(format!("no cached {metric} scores for {ext}")))?;
                rounds_select(&plan, SelectionSource::Scores { records, polarity: metric_polarity(&self.cfg, metric) }, None)?
            }
        };
        Ok(SelectionOutput { plan, rounds })
    }

    fn training_manifest(&self, spec: &ExperimentSpec, count: usize, seed: u64, cell: &Path, preset_path: &Path) -> Result<DatasetManifest> {
        Ok(match spec.kind {
            SpecKind::BaselineSmall => self.small.clone(),
            SpecKind::BaselineLarge => self.large.clone(),
            SpecKind::Ablation => build_ablation(&self.small, self.small.len() + count, seed)?,
            SpecKind::Synthetic => {
                let selection = self.select(spec, count, seed, cell, preset_path)?;
                save_json(&selection, &cell.join("selection.json"))?;
                let chosen = selection.rounds.last().cloned().unwrap_or_default();
                let ext = spec.extractor.as_deref().expect("synthetic spec has an extractor");
                mix(&self.small, &self.pools[ext], &chosen)?
            }
        })
    }

    /// Trains, predicts on the real-only test split and evaluates one cell.
    pub fn run_cell(&self, spec: &ExperimentSpec, count: usize, seed: u64) -> Result<EvalResult> {
        let cell = cell_dir(&self.dir, spec, count, seed);
        let preset = preset_with(&spec.augmentation, &self.cfg.trainer.presets)?;
        let preset_path = cell.join("aug.json");
        write_file(&preset_path, preset.to_json().as_bytes())?;

        let training = self.training_manifest(spec, count, seed, &cell, &preset_path)?;
        self.assert_held_out_real(&training)?;
        let manifest_path = cell.join("manifest.json");
        training.save(&manifest_path)?;

        let weights = cell.join("weights");
        self.trainer.train(&TrainRequest {
            manifest: &manifest_path,
            dataset_root: &self.data_root,
            epochs: self.cfg.trainer.epochs,
            aug: &preset_path,
            out: &weights,
            seed,
        })?;
        let images: Vec<PathBuf> = self.test.records.iter().map(|r| r.resolve(&self.data_root)).collect();
        let preds = self.trainer.predict(&weights, &images, &cell.join("scratch"))?;
        let mut by_id = PredictionFile::new();
        let mut dets = Vec::new();
        for (r, boxes) in self.test.records.iter().zip(preds) {
            dets.extend(boxes.iter().map(|b| Detection::from_predicted(&r.id, b)));
            by_id.insert(r.id.clone(), boxes);
        }
        synthaug_core::detector::save_predictions(&by_id, &cell.join("detections.json"))?;
        let result = evaluate(&dets, &self.test, &EvalConfig::default())?;
        result.save(&cell.join("eval.json"))?;
        Ok(result)
    }
}

pub fn cell_dir(matrix_dir: &Path, spec: &ExperimentSpec, count: usize, seed: u64) -> PathBuf {
    matrix_dir.join(spec.hash()).join(count.to_string()).join(seed.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Completed,
    Reused,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub spec_hash: String,
    pub count: usize,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map50: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map50_95: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Spread { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountResult {
    pub count: usize,
    pub per_seed: BTreeMap<u64, EvalResult>,
    pub map50: Option<Spread>,
    pub map50_95: Option<Spread>,
    pub failed_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub spec_hash: String,
    pub spec: ExperimentSpec,
    pub counts: Vec<CountResult>,
}

#[derive(Debug, Clone)]
pub struct MatrixOutcome {
    pub cells: Vec<CellOutcome>,
    pub results: Vec<RunResult>,
}

impl MatrixOutcome {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.status == CellStatus::Failed).count()
    }
}

fn append_index(path: &Path, outcome: &CellOutcome) -> Result<()> {
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    file.lock().map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(outcome).expect("outcome serializes");
    let res = writeln!(&file, "{line}").map_err(|e| Error::io(path, e));
    file.unlock().map_err(|e| Error::io(path, e))?;
    res
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Failure {
    error: String,
}

/// Result of one cell, reading a finished cell instead of recomputing it.
fn execute(ws: &Workspace, spec: &ExperimentSpec, count: usize, seed: u64) -> CellOutcome {
    let hash = spec.hash();
    let dir = cell_dir(&ws.dir, spec, count, seed);
    let eval_path = dir.join("eval.json");
    let done = |status, r: &EvalResult| CellOutcome {
        spec_hash: hash.clone(),
        count,
        seed,
        status,
        map50: Some(r.map50),
        map50_95: Some(r.map50_95),
        error: None,
    };
    if let Ok(r) = EvalResult::load(&eval_path) {
        return done(CellStatus::Reused, &r);
    }
    let failed_path = dir.join("failed.json");
    let _ = std::fs::remove_file(&failed_path);
    match ws.run_cell(spec, count, seed) {
        Ok(r) => done(CellStatus::Completed, &r),
        Err(e) => {
            warn!("cell {hash}/{count}/{seed} failed: {e}");
            let _ = save_json(&Failure { error: e.to_string() }, &failed_path);
            CellOutcome { spec_hash: hash.clone(), count, seed, status: CellStatus::Failed, map50: None, map50_95: None, error: Some(e.to_string()) }
        }
    }
}

/// Runs every cell not yet complete. Failed cells are recorded and the matrix
/// continues; more than `matrix.max_failed_fraction` failures is an error after
/// all cells have been attempted.
pub fn run_matrix(cfg: &Config, out: &Path, opts: &RunOptions) -> Result<MatrixOutcome> {
    let ws = Workspace::prepare(cfg, out, opts)?;
    let specs = cfg.specs();
    let by_hash: BTreeMap<String, &ExperimentSpec> = specs.iter().map(|s| (s.hash(), s)).collect();
    save_json(&by_hash, &ws.dir.join("specs.json"))?;

    let cells: Vec<(&ExperimentSpec, usize, u64)> =
        specs.iter().flat_map(|s| s.counts.iter().flat_map(move |&c| s.seeds.iter().map(move |&seed| (s, c, seed)))).collect();
    let workers = opts.workers.unwrap_or(cfg.matrix.workers).max(1);
    let workers = ws.trainer.max_parallelism().map_or(workers, |cap| workers.min(cap.max(1)));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("matrix.workers", e.to_string()))?;
    let index = ws.dir.join("index.jsonl");
    let outcomes: Vec<CellOutcome> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(spec, count, seed)| {
                let o = execute(&ws, spec, count, seed);
                if o.status != CellStatus::Reused {
                    if let Err(e) = append_index(&index, &o) {
                        warn!("cannot append to index: {e}");
                    }
                }
                o
            })
            .collect()
    });

    let results = aggregate(&ws.dir, &specs)?;
    save_json(&results, &ws.dir.join("results.json"))?;
    let outcome = MatrixOutcome { cells: outcomes, results };
    let failed = outcome.failed();
    info!("{} cells, {} failed", outcome.cells.len(), failed);
    if failed as f64 > cfg.matrix.max_failed_fraction * outcome.cells.len() as f64 {
        return Err(Error::Matrix { failed, total: outcome.cells.len() });
    }
    Ok(outcome)
}

/// Collects finished cells from disk into per-spec results.
pub fn aggregate(matrix_dir: &Path, specs: &[ExperimentSpec]) -> Result<Vec<RunResult>> {
    let mut out = Vec::new();
    for spec in specs {
        let mut counts = Vec::new();
        for &count in &spec.counts {
            let mut per_seed = BTreeMap::new();
            let mut failed_seeds = Vec::new();
            for &seed in &spec.seeds {
                match EvalResult::load(&cell_dir(matrix_dir, spec, count, seed).join("eval.json")) {
                    Ok(r) => {
                        per_seed.insert(seed, r);
                    }
                    Err(_) => failed_seeds.push(seed),
                }
            }
            let m50: Vec<f64> = per_seed.values().map(|r| r.map50).collect();
            let m95: Vec<f64> = per_seed.values().map(|r| r.map50_95).collect();
            counts.push(CountResult { count, map50: Spread::of(&m50), map50_95: Spread::of(&m95), per_seed, failed_seeds });
        }
        out.push(RunResult { spec_hash: spec.hash(), spec: spec.clone(), counts });
    }
    Ok(out)
}
