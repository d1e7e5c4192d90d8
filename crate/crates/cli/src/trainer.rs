//! Trainer adapters: an external `train`/`predict` executable or a
//! deterministic mock.
//!
//! External contract:
//! `<exe> train --manifest <path> --epochs <n> --aug <preset json> --out <weights>`
//! and `<exe> predict --weights <path> --images <list> --output <json>`. Both run
//! with the dataset root as working directory so relative record paths resolve;
//! `SYNTHAUG_SEED` carries the cell seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use synthaug_core::detector::{run_external_predict, DetectorAdapter, PredictedBox};
use synthaug_core::generate::relative_to;
use synthaug_core::manifest::{write_file, Annotation, DatasetManifest, Provenance};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TrainRequest<'a> {
    pub manifest: &'a Path,
    pub dataset_root: &'a Path,
    pub epochs: u32,
    pub aug: &'a Path,
    pub out: &'a Path,
    pub seed: u64,
}

pub trait Trainer: Send + Sync {
    fn name(&self) -> &str;

    fn train(&self, req: &TrainRequest<'_>) -> Result<()>;

    /// Detections per image, in input order.
    fn predict(&self, weights: &Path, images: &[PathBuf], scratch: &Path) -> Result<Vec<Vec<PredictedBox>>>;

    fn max_parallelism(&self) -> Option<usize>;
}

pub struct ExternalTrainer {
    pub command: PathBuf,
    pub dataset_root: PathBuf,
    pub max_parallelism: Option<usize>,
}

impl ExternalTrainer {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Trainer { trainer: self.command.display().to_string(), reason: reason.into() }
    }
}

impl Trainer for ExternalTrainer {
    fn name(&self) -> &str {
        "external"
    }

    fn train(&self, req: &TrainRequest<'_>) -> Result<()> {
        let out = Command::new(&self.command)
            .current_dir(req.dataset_root)
            .env("SYNTHAUG_SEED", req.seed.to_string())
            .arg("train")
            .arg("--manifest")
            .arg(req.manifest)
            .arg("--epochs")
            .arg(req.epochs.to_string())
            .arg("--aug")
            .arg(req.aug)
            .arg("--out")
            .arg(req.out)
            .output()
            .map_err(|e| self.fail(format!("cannot launch: {e}")))?;
        if !out.status.success() {
            return Err(self.fail(format!("train exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim())));
        }
        if !req.out.exists() {
            return Err(self.fail(format!("train produced no weights at {}", req.out.display())));
        }
        Ok(())
    }

    fn predict(&self, weights: &Path, images: &[PathBuf], scratch: &Path) -> Result<Vec<Vec<PredictedBox>>> {
        let file = run_external_predict(&self.command, weights, images, scratch)?;
        images
            .iter()
            .map(|p| file.get(p.to_string_lossy().as_ref()).cloned().ok_or_else(|| self.fail(format!("no predictions for {}", p.display()))))
            .collect()
    }

    fn max_parallelism(&self) -> Option<usize> {
        self.max_parallelism.or(Some(1))
    }
}

/// What the mock writes as "weights".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockWeights {
    pub real: usize,
    pub synthetic: usize,
    pub epochs: u32,
    pub preset: String,
    pub seed: u64,
    pub manifest_digest: String,
}

impl MockWeights {
    /// Grows towards 1 with more (real-weighted) training data.
    pub fn skill(&self) -> f64 {
        let effective = self.real as f64 + 0.5 * self.synthetic as f64;
        1.0 - (-effective / 40.0).exp()
    }
}

/// Predicts jittered ground truth for images it knows, with confidences and
/// jitter driven by a seeded noise term and by how much data it was trained on.
/// Unknown images get one random box.
pub struct MockTrainer {
    dataset_root: PathBuf,
    truth: BTreeMap<PathBuf, Vec<Annotation>>,
}

impl MockTrainer {
    pub fn new(dataset_root: &Path) -> Self {
        Self { dataset_root: dataset_root.to_path_buf(), truth: BTreeMap::new() }
    }

    /// Registers the ground truth of every record (keyed by path relative to the root).
    pub fn learn(&mut self, manifest: &DatasetManifest) {
        for r in &manifest.records {
            let key = relative_to(&r.resolve(&self.dataset_root), &self.dataset_root);
            self.truth.insert(key, r.annotations.clone());
        }
    }

    fn key(&self, image: &Path) -> PathBuf {
        relative_to(image, &self.dataset_root)
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), reason: e.to_string() })
}

fn jitter(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    // sum of two uniforms: cheap, bounded, roughly bell-shaped
    (rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0)) * scale
}

impl Trainer for MockTrainer {
    fn name(&self) -> &str {
        "mock"
    }

    fn train(&self, req: &TrainRequest<'_>) -> Result<()> {
        let bytes = std::fs::read(req.manifest).map_err(|e| Error::io(req.manifest, e))?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::Parse { path: req.manifest.to_path_buf(), reason: e.to_string() })?;
        let preset: crate::preset::AugmentationPreset = load_json(req.aug)?;
        let weights = MockWeights {
            real: manifest.records.iter().filter(|r| r.provenance == Provenance::Real).count(),
            synthetic: manifest.records.iter().filter(|r| r.provenance == Provenance::Synthetic).count(),
            epochs: req.epochs,
            preset: preset.name,
            seed: req.seed,
            manifest_digest: hex::encode(&Sha256::digest(&bytes)[..8]),
        };
        let mut s = serde_json::to_string_pretty(&weights).expect("weights serialize");
        s.push('\n');
        write_file(req.out, s.as_bytes())?;
        Ok(())
    }

    fn predict(&self, weights: &Path, images: &[PathBuf], _scratch: &Path) -> Result<Vec<Vec<PredictedBox>>> {
        let w: MockWeights = load_json(weights)?;
        let skill = w.skill();
        Ok(images
            .iter()
            .map(|img| {
                let key = self.key(img);
                let mut h = Sha256::new();
                h.update(w.manifest_digest.as_bytes());
                h.update(w.seed.to_le_bytes());
                h.update(key.to_string_lossy().as_bytes());
                let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
                let mut boxes = Vec::new();
                match self.truth.get(&key) {
                    Some(gt) => {
                        for a in gt {
                            let spread = 0.25 * (1.0 - skill) + 0.02;
                            let b = a.bbox;
                            let cx = (b.cx + jitter(&mut rng, spread * b.w)).clamp(0.0, 1.0);
                            let cy = (b.cy + jitter(&mut rng, spread * b.h)).clamp(0.0, 1.0);
                            let bw = (b.w * (1.0 + jitter(&mut rng, spread))).clamp(0.01, 1.0);
                            let bh = (b.h * (1.0 + jitter(&mut rng, spread))).clamp(0.01, 1.0);
                            let confidence = (0.35 + 0.5 * skill + jitter(&mut rng, 0.1)).clamp(0.0, 1.0);
                            boxes.push(PredictedBox { class_id: a.class_id, cx, cy, w: bw, h: bh, confidence });
                        }
                        if rng.random_bool((0.8 * (1.0 - skill)).clamp(0.0, 1.0)) {
                            boxes.push(random_box(&mut rng, 0.4 * (1.0 - skill)));
                        }
                    }
                    None => boxes.push(random_box(&mut rng, 0.5)),
                }
                boxes
            })
            .collect())
    }

    fn max_parallelism(&self) -> Option<usize> {
        None
    }
}

fn random_box(rng: &mut ChaCha8Rng, max_conf: f64) -> PredictedBox {
    let w = rng.random_range(0.1..0.5);
    let h = rng.random_range(0.1..0.5);
    PredictedBox {
        class_id: 0,
        cx: rng.random_range(w / 2.0..=1.0 - w / 2.0),
        cy: rng.random_range(h / 2.0..=1.0 - h / 2.0),
        w,
        h,
        confidence: rng.random_range(0.0..=max_conf.max(0.0)),
    }
}

/// A trained model seen through the detector adapter interface.
pub struct TrainedDetector<'a> {
    pub trainer: &'a dyn Trainer,
    pub weights: PathBuf,
    pub scratch: PathBuf,
}

impl DetectorAdapter for TrainedDetector<'_> {
    fn predict(&self, images: &[PathBuf]) -> synthaug_core::Result<Vec<Vec<PredictedBox>>> {
        self.trainer
            .predict(&self.weights, images, &self.scratch)
            .map_err(|e| synthaug_core::Error::Metric { metric: "detector".into(), reason: e.to_string() })
    }

    fn max_parallelism(&self) -> Option<usize> {
        self.trainer.max_parallelism()
    }
}
