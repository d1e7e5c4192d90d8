//! Detector adapter contract shared by the confidence metric, the trainer
//! adapters and evaluation.
//!
//! `<exe> predict --weights <path> --images <list file> --output <json>` where the
//! list file holds one image path per line and the output JSON maps every listed
//! path to its detections.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::manifest::write_file;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedBox {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

impl PredictedBox {
    pub fn bbox(&self) -> BBox {
        BBox { cx: self.cx, cy: self.cy, w: self.w, h: self.h }
    }
}

/// Image path (as listed) -> detections.
pub type PredictionFile = BTreeMap<String, Vec<PredictedBox>>;

pub fn load_predictions(path: &Path) -> Result<PredictionFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn save_predictions(preds: &PredictionFile, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(preds).expect("predictions serialize");
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn write_image_list(images: &[PathBuf], path: &Path) -> Result<()> {
    let mut body = String::new();
    for p in images {
        body.push_str(&p.to_string_lossy());
        body.push('\n');
    }
    write_file(path, body.as_bytes())
}

pub trait DetectorAdapter: Send + Sync {
    /// Detections for each image, in input order.
    fn predict(&self, images: &[PathBuf]) -> Result<Vec<Vec<PredictedBox>>>;

    fn max_parallelism(&self) -> Option<usize> {
        Some(1)
    }
}

/// Runs `<exe> predict` and reads the JSON it leaves behind.
pub fn run_external_predict(command: &Path, weights: &Path, images: &[PathBuf], scratch: &Path) -> Result<PredictionFile> {
    std::fs::create_dir_all(scratch).map_err(|e| Error::io(scratch, e))?;
    let list = scratch.join("predict_images.txt");
    let output = scratch.join("predictions.json");
    write_image_list(images, &list)?;
    let out = Command::new(command)
        .arg("predict")
        .arg("--weights")
        .arg(weights)
        .arg("--images")
        .arg(&list)
        .arg("--output")
        .arg(&output)
        .output()
        .map_err(|e| Error::Metric { metric: "detector".into(), reason: format!("cannot launch {}: {e}", command.display()) })?;
    if !out.status.success() {
        return Err(Error::Metric {
            metric: "detector".into(),
            reason: format!("predict exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim()),
        });
    }
    load_predictions(&output)
}

#[derive(Debug, Clone)]
pub struct ExternalDetector {
    pub command: PathBuf,
    pub weights: PathBuf,
    pub scratch: PathBuf,
}

impl DetectorAdapter for ExternalDetector {
    fn predict(&self, images: &[PathBuf]) -> Result<Vec<Vec<PredictedBox>>> {
        let file = run_external_predict(&self.command, &self.weights, images, &self.scratch)?;
        images
            .iter()
            .map(|p| {
                file.get(p.to_string_lossy().as_ref()).cloned().ok_or_else(|| Error::Metric {
                    metric: "detector".into(),
                    reason: format!("no predictions for {}", p.display()),
                })
            })
            .collect()
    }
}
