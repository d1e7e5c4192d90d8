//! Detection evaluation: IoU, matching, interpolated AP and mAP over IoU thresholds.
//!
//! Matching within an image processes detections in descending confidence and
//! admits a detection as a true positive whenever the set of true positives can
//! be re-assigned so that every one of them (plus the new detection) owns a
//! distinct ground truth box of its class at IoU >= threshold. Each new detection
//! first tries the highest-IoU unmatched ground truth, so in uncontested scenes
//! this is the usual greedy rule; when an earlier detection's choice would block
//! a later one, the earlier detection is moved to its next-best box instead. The
//! result is the maximum-cardinality matching that is lexicographically best in
//! confidence order, and the true-positive count of every confidence prefix can
//! only shrink as the threshold rises.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{PredictedBox, PredictionFile};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::manifest::{write_file, DatasetManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class_id: u32,
    pub bbox: BBox,
    pub confidence: f64,
}

impl Detection {
    pub fn from_predicted(image_id: &str, p: &PredictedBox) -> Self {
        Self { image_id: image_id.to_string(), class_id: p.class_id, bbox: p.bbox(), confidence: p.confidence }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub class_id: u32,
    pub bbox: BBox,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b && a.relative_area() > 0.0 {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    let union = a.relative_area() + b.relative_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Detection indices (into the input slice) in processing order.
    pub order: Vec<usize>,
    /// True-positive flag per entry of `order`.
    pub tp: Vec<bool>,
    /// Detection index matched to each ground truth, if any.
    pub gt_match: Vec<Option<usize>>,
}

fn cmp_detections(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| a.class_id.cmp(&b.class_id))
        .then_with(|| a.bbox.cx.total_cmp(&b.bbox.cx))
        .then_with(|| a.bbox.cy.total_cmp(&b.bbox.cy))
        .then_with(|| a.bbox.w.total_cmp(&b.bbox.w))
        .then_with(|| a.bbox.h.total_cmp(&b.bbox.h))
}

/// Processing order: descending confidence, then image id, then box
/// coordinates, then input position.
pub fn detection_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| cmp_detections(&dets[i], &dets[j]).then(i.cmp(&j)));
    order
}

fn augment(d: usize, adj: &[Vec<usize>], gt_owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &g in &adj[d] {
        if seen[g] {
            continue;
        }
        seen[g] = true;
        let free = match gt_owner[g] {
            None => true,
            Some(owner) => augment(owner, adj, gt_owner, seen),
        };
        if free {
            gt_owner[g] = Some(d);
            return true;
        }
    }
    false
}

/// Matches the detections of one image against its ground truth.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> MatchResult {
    let order = detection_order(dets);
    let adj: Vec<Vec<usize>> = dets
        .iter()
        .map(|d| {
            let mut cands: Vec<(usize, f64)> = gts
                .iter()
                .enumerate()
                .filter(|(_, g)| g.class_id == d.class_id)
                .map(|(i, g)| (i, iou(&d.bbox, &g.bbox)))
                .filter(|&(_, v)| v >= iou_threshold)
                .collect();
            cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            cands.into_iter().map(|(i, _)| i).collect()
        })
        .collect();
    let mut gt_owner: Vec<Option<usize>> = vec![None; gts.len()];
    let mut tp = Vec::with_capacity(order.len());
    for &d in &order {
        let mut seen = vec![false; gts.len()];
        tp.push(augment(d, &adj, &mut gt_owner, &mut seen));
    }
    MatchResult { order, tp, gt_match: gt_owner }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Envelope sampled at recall 0, 0.01, ..., 1.
    #[default]
    Points101,
    /// Exact area under the envelope.
    AllPoints,
}

/// Cumulative (recall, precision) after each detection of a ranked label stream.
pub fn pr_curve(labels: &[bool], total_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            tp += usize::from(l);
            let recall = if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 };
            (recall, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApValue {
    pub ap: f64,
    /// Set when there was no ground truth to recall.
    pub undefined: bool,
}

/// Average precision of a confidence-ranked TP/FP stream.
pub fn average_precision(labels: &[bool], total_gt: usize, interpolation: Interpolation) -> ApValue {
    if total_gt == 0 {
        return ApValue { ap: 0.0, undefined: true };
    }
    let mut tps = Vec::with_capacity(labels.len());
    let mut precision = Vec::with_capacity(labels.len());
    let mut tp = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        tp += usize::from(l);
        tps.push(tp);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // running max from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let ap = match interpolation {
        Interpolation::Points101 => {
            let mut sum = 0.0;
            let mut k = 0usize;
            for r in 0..=100usize {
                // first prefix whose recall tp/total_gt reaches r/100, compared exactly
                while k < tps.len() && tps[k] * 100 < r * total_gt {
                    k += 1;
                }
                if k < tps.len() {
                    sum += precision[k];
                }
            }
            sum / 101.0
        }
        Interpolation::AllPoints => {
            let mut area = 0.0;
            let mut prev = 0usize;
            for (i, &t) in tps.iter().enumerate() {
                if t > prev {
                    area += (t - prev) as f64 / total_gt as f64 * precision[i];
                    prev = t;
                }
            }
            area
        }
    };
    ApValue { ap, undefined: false }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { thresholds: coco_thresholds(), interpolation: Interpolation::Points101 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Keyed by threshold formatted with two decimals.
    pub ap_per_threshold: BTreeMap<String, f64>,
    pub map50: f64,
    pub map50_95: f64,
    /// Precision/recall after each ranked detection at IoU 0.50 (first class).
    pub pr_points: Vec<(f64, f64)>,
    pub interpolation: Interpolation,
    pub num_images: usize,
    pub num_ground_truth: usize,
    pub num_detections: usize,
    /// True when no evaluated class had ground truth, so AP fell back to 0.
    pub undefined: bool,
}

impl EvalResult {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("eval result serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })
    }
}

/// Per-class AP at one threshold over a whole manifest; images are matched
/// independently and the label streams merged in global detection order.
pub fn ranked_labels(
    dets: &[Detection],
    gts_by_image: &BTreeMap<&str, Vec<GroundTruth>>,
    class_id: u32,
    threshold: f64,
) -> (Vec<bool>, usize) {
    let class_dets: Vec<Detection> = dets.iter().filter(|d| d.class_id == class_id).cloned().collect();
    let mut per_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in class_dets.iter().enumerate() {
        per_image.entry(d.image_id.as_str()).or_default().push(i);
    }
    let mut label = vec![false; class_dets.len()];
    let mut total_gt = 0;
    for (img, gts) in gts_by_image {
        let gts: Vec<GroundTruth> = gts.iter().copied().filter(|g| g.class_id == class_id).collect();
        total_gt += gts.len();
        let Some(idx) = per_image.get(img) else { continue };
        let local: Vec<Detection> = idx.iter().map(|&i| class_dets[i].clone()).collect();
        let m = match_detections(&local, &gts, threshold);
        for (pos, &d) in m.order.iter().enumerate() {
            label[idx[d]] = m.tp[pos];
        }
    }
    let order = detection_order(&class_dets);
    (order.into_iter().map(|i| label[i]).collect(), total_gt)
}

/// Ground truth of every manifest record keyed by record id.
pub fn ground_truth(manifest: &DatasetManifest) -> BTreeMap<&str, Vec<GroundTruth>> {
    manifest
        .records
        .iter()
        .map(|r| (r.id.as_str(), r.annotations.iter().map(|a| GroundTruth { class_id: a.class_id, bbox: a.bbox }).collect()))
        .collect()
}

pub fn evaluate(dets: &[Detection], manifest: &DatasetManifest, config: &EvalConfig) -> Result<EvalResult> {
    let gts = ground_truth(manifest);
    for d in dets {
        if !gts.contains_key(d.image_id.as_str()) {
            return Err(Error::Input(format!("detection for unknown image {}", d.image_id)));
        }
        if !d.confidence.is_finite() {
            return Err(Error::Input(format!("non-finite confidence on {}", d.image_id)));
        }
    }
    let mut classes: BTreeSet<u32> = gts.values().flatten().map(|g| g.class_id).collect();
    classes.extend(dets.iter().map(|d| d.class_id));
    let num_ground_truth = gts.values().map(Vec::len).sum();

    let mean_ap = |threshold: f64| -> (f64, bool) {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &c in &classes {
            let (labels, total) = ranked_labels(dets, &gts, c, threshold);
            let v = average_precision(&labels, total, config.interpolation);
            if !v.undefined {
                sum += v.ap;
                n += 1;
            }
        }
        if n == 0 {
            (0.0, true)
        } else {
            (sum / n as f64, false)
        }
    };

    let mut ap_per_threshold = BTreeMap::new();
    let mut total = 0.0;
    let mut undefined = false;
    for &t in &config.thresholds {
        let (ap, u) = mean_ap(t);
        undefined |= u;
        total += ap;
        ap_per_threshold.insert(threshold_key(t), ap);
    }
    let map50_95 = if config.thresholds.is_empty() { 0.0 } else { total / config.thresholds.len() as f64 };
    let map50 = match ap_per_threshold.get(&threshold_key(0.5)) {
        Some(v) => *v,
        None => mean_ap(0.5).0,
    };
    let pr_points = match classes.iter().next() {
        Some(&c) => {
            let (labels, total) = ranked_labels(dets, &gts, c, 0.5);
            pr_curve(&labels, total)
        }
        None => Vec::new(),
    };
    Ok(EvalResult {
        ap_per_threshold,
        map50,
        map50_95,
        pr_points,
        interpolation: config.interpolation,
        num_images: manifest.len(),
        num_ground_truth,
        num_detections: dets.len(),
        undefined: undefined || classes.is_empty(),
    })
}

/// Converts a predict JSON to detections. Keys may be record ids, manifest
/// paths, or paths resolved against `root`.
pub fn detections_from_predictions(file: &PredictionFile, manifest: &DatasetManifest, root: &Path) -> Result<Vec<Detection>> {
    let mut lookup: BTreeMap<String, &str> = BTreeMap::new();
    for r in &manifest.records {
        lookup.insert(r.id.clone(), &r.id);
        lookup.insert(r.path.to_string_lossy().into_owned(), &r.id);
        lookup.insert(r.resolve(root).to_string_lossy().into_owned(), &r.id);
    }
    let mut out = Vec::new();
    for (key, boxes) in file {
        let id = lookup.get(key).ok_or_else(|| Error::Input(format!("predictions for unknown image {key}")))?;
        out.extend(boxes.iter().map(|p| Detection::from_predicted(id, p)));
    }
    Ok(out)
}

pub const CSV_HEADER: [&str; 5] = ["run", "map50", "map50_95", "num_images", "num_detections"];

pub fn csv_row(run: &str, r: &EvalResult) -> [String; 5] {
    [
        run.to_string(),
        format!("{:.6}", r.map50),
        format!("{:.6}", r.map50_95),
        r.num_images.to_string(),
        r.num_detections.to_string(),
    ]
}
