//! Quality assessment of generated images.
//!
//! BRISQUE-style natural-scene statistics are computed natively: MSCN
//! coefficients, generalized Gaussian fits of the coefficients and asymmetric
//! generalized Gaussian fits of their four orientation products, at two scales.
//! The 36-dimensional feature vector is scored either by a supplied linear
//! regression model or by its Mahalanobis distance to clean-image statistics.
//!
//! Neural scorers (NIMA, CLIP-IQA) and the detector used by the confidence
//! metric are reached through subprocess adapters.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use image::GrayImage;
use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::detector::DetectorAdapter;
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, QualityRecord};
use crate::raster::{self, Plane};

pub const BRISQUE: &str = "brisque";
pub const NIMA: &str = "nima";
pub const CLIPIQA: &str = "clipiqa";
pub const CONFIDENCE: &str = "confidence";
pub const CORESET: &str = "coreset";

pub const MSCN_WINDOW: usize = 7;
pub const MSCN_STABILIZER: f64 = 1.0;
pub const ALPHA_RANGE: (f64, f64) = (0.2, 10.0);
pub const MIN_FIT_SAMPLES: usize = 100;
pub const FEATURE_LEN: usize = 36;

/// Smallest sample count accepted when fitting inside the feature pipeline,
/// where the half-scale plane of a 14x14 image only offers 36 products.
const MIN_FEATURE_SAMPLES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    HigherIsBetter,
    LowerIsBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    ModelAgnostic,
    ModelAware,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricDescriptor {
    pub name: String,
    pub polarity: Polarity,
    pub kind: MetricKind,
}

/// Registry metadata for the metrics the framework knows by name.
pub fn builtin_descriptor(name: &str) -> Option<MetricDescriptor> {
    let (polarity, kind) = match name {
        BRISQUE => (Polarity::LowerIsBetter, MetricKind::ModelAgnostic),
        NIMA | CLIPIQA => (Polarity::HigherIsBetter, MetricKind::ModelAgnostic),
        // low confidence = most informative, selected first
        CONFIDENCE => (Polarity::LowerIsBetter, MetricKind::ModelAware),
        CORESET => (Polarity::HigherIsBetter, MetricKind::ModelAware),
        _ => return None,
    };
    Some(MetricDescriptor { name: name.into(), polarity, kind })
}

// ---------------------------------------------------------------------------
// MSCN

fn mscn_window() -> Vec<f64> {
    let taps = raster::gaussian_kernel_with_radius(7.0 / 6.0, MSCN_WINDOW / 2);
    let mut w: Vec<f64> = taps.iter().flat_map(|a| taps.iter().map(move |b| a * b)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean-subtracted contrast-normalized coefficients `(I - mu) / (sigma + c)` with a
/// 7x7 Gaussian window and edge replication.
///
/// Local moments are accumulated as offsets from the centre pixel, so a constant
/// image gives exactly zero and a photometric negative gives exactly the negated
/// raster.
pub fn mscn(image: &Plane, stabilizer: f64) -> Result<Plane> {
    let (h, w) = image.dim();
    if h < MSCN_WINDOW || w < MSCN_WINDOW {
        return Err(Error::Size(format!("mscn needs at least {MSCN_WINDOW}x{MSCN_WINDOW}, got {w}x{h}")));
    }
    if stabilizer.is_nan() || stabilizer <= 0.0 {
        return Err(Error::Parameter(format!("stabilizer must be positive, got {stabilizer}")));
    }
    let weights = mscn_window();
    let r = (MSCN_WINDOW / 2) as isize;
    let mut out = Plane::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let centre = image[[y as usize, x as usize]];
            let (mut d1, mut d2) = (0.0, 0.0);
            let mut k = 0;
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    let d = image[[yy, xx]] - centre;
                    d1 += weights[k] * d;
                    d2 += weights[k] * d * d;
                    k += 1;
                }
            }
            let sigma = (d2 - d1 * d1).max(0.0).sqrt();
            out[[y as usize, x as usize]] = -d1 / (sigma + stabilizer);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Generalized Gaussian fits

/// `Gamma(2/a)^2 / (Gamma(1/a) Gamma(3/a))`, increasing in `a`.
pub fn moment_ratio(alpha: f64) -> f64 {
    (2.0 * ln_gamma(2.0 / alpha) - ln_gamma(1.0 / alpha) - ln_gamma(3.0 / alpha)).exp()
}

/// Golden-section search over log-alpha for `moment_ratio(alpha) = target`,
/// stopping when the bracket's upper/lower ratio is within `1 + 1e-4`.
pub fn solve_alpha(target: f64) -> f64 {
    let (mut lo, mut hi) = (ALPHA_RANGE.0.ln(), ALPHA_RANGE.1.ln());
    let residual = |la: f64| (moment_ratio(la.exp()) - target).abs();
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut fa, mut fb) = (residual(a), residual(b));
    while hi - lo > 1e-4f64.ln_1p() {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = residual(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = residual(b);
        }
    }
    ((lo + hi) / 2.0).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GgdParams {
    pub alpha: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggdParams {
    pub alpha: f64,
    /// Standard deviation of the negative half.
    pub sigma_left: f64,
    /// Standard deviation of the positive half.
    pub sigma_right: f64,
    pub mean_offset: f64,
}

pub fn fit_ggd(samples: &[f64]) -> Result<GgdParams> {
    fit_ggd_min(samples, MIN_FIT_SAMPLES)
}

fn fit_ggd_min(samples: &[f64], min: usize) -> Result<GgdParams> {
    if samples.len() < min {
        return Err(Error::Size(format!("need at least {min} samples, got {}", samples.len())));
    }
    let n = samples.len() as f64;
    let second = samples.iter().map(|x| x * x).sum::<f64>() / n;
    let abs_mean = samples.iter().map(|x| x.abs()).sum::<f64>() / n;
    if second.is_nan() || second <= 0.0 || !second.is_finite() {
        return Err(Error::Degenerate("samples have zero variance".into()));
    }
    Ok(GgdParams { alpha: solve_alpha(abs_mean * abs_mean / second), variance: second })
}

pub fn fit_aggd(samples: &[f64]) -> Result<AggdParams> {
    fit_aggd_min(samples, MIN_FIT_SAMPLES)
}

fn fit_aggd_min(samples: &[f64], min: usize) -> Result<AggdParams> {
    if samples.len() < min {
        return Err(Error::Size(format!("need at least {min} samples, got {}", samples.len())));
    }
    let (mut left_sq, mut left_n, mut right_sq, mut right_n) = (0.0, 0usize, 0.0, 0usize);
    let (mut abs_sum, mut sq_sum) = (0.0, 0.0);
    for &x in samples {
        if x < 0.0 {
            left_sq += x * x;
            left_n += 1;
        } else if x > 0.0 {
            right_sq += x * x;
            right_n += 1;
        }
        abs_sum += x.abs();
        sq_sum += x * x;
    }
    if sq_sum.is_nan() || sq_sum <= 0.0 || !sq_sum.is_finite() {
        return Err(Error::Degenerate("samples have zero variance".into()));
    }
    if left_n == 0 || right_n == 0 {
        return Err(Error::Degenerate("samples do not populate both sides of zero".into()));
    }
    let n = samples.len() as f64;
    let sigma_left = (left_sq / left_n as f64).sqrt();
    let sigma_right = (right_sq / right_n as f64).sqrt();
    let gamma = sigma_left / sigma_right;
    let r_hat = (abs_sum / n).powi(2) / (sq_sum / n);
    let target = r_hat * (gamma.powi(3) + 1.0) * (gamma + 1.0) / (gamma * gamma + 1.0).powi(2);
    let alpha = solve_alpha(target);
    let (g1, g2, g3) = (ln_gamma(1.0 / alpha), ln_gamma(2.0 / alpha), ln_gamma(3.0 / alpha));
    let scale = ((g1 - g3) / 2.0).exp();
    let mean_offset = (sigma_right - sigma_left) * scale * (g2 - g1).exp();
    Ok(AggdParams { alpha, sigma_left, sigma_right, mean_offset })
}

// ---------------------------------------------------------------------------
// Features

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Horizontal,
    Vertical,
    Diagonal,
    AntiDiagonal,
}

impl Orientation {
    pub const ALL: [Orientation; 4] =
        [Orientation::Horizontal, Orientation::Vertical, Orientation::Diagonal, Orientation::AntiDiagonal];

    /// Neighbor offset `(dy, dx)`.
    fn offset(self) -> (isize, isize) {
        match self {
            Orientation::Horizontal => (0, 1),
            Orientation::Vertical => (1, 0),
            Orientation::Diagonal => (1, 1),
            Orientation::AntiDiagonal => (1, -1),
        }
    }
}

pub fn pairwise_products(m: &Plane, orientation: Orientation) -> Vec<f64> {
    let (h, w) = m.dim();
    let (dy, dx) = orientation.offset();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (ny, nx) = (y + dy, x + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            out.push(m[[y as usize, x as usize]] * m[[ny as usize, nx as usize]]);
        }
    }
    out
}

/// Two scales x (GGD alpha, GGD variance, then alpha / mean offset / left sigma /
/// right sigma for the horizontal, vertical, diagonal and anti-diagonal products).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BrisqueFeatures(#[serde(with = "feature_array")] pub [f64; FEATURE_LEN]);

mod feature_array {
    use super::FEATURE_LEN;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; FEATURE_LEN], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; FEATURE_LEN], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into().map_err(|v: Vec<f64>| D::Error::custom(format!("expected {FEATURE_LEN} values, got {}", v.len())))
    }
}

impl BrisqueFeatures {
    pub const PER_SCALE: usize = 18;

    /// Index of the first entry of an orientation block (4 values) at `scale`.
    pub fn block(scale: usize, orientation: Orientation) -> usize {
        let o = Orientation::ALL.iter().position(|&x| x == orientation).expect("known orientation");
        scale * Self::PER_SCALE + 2 + 4 * o
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn brisque_features(image: &GrayImage) -> Result<BrisqueFeatures> {
    brisque_features_plane(&raster::gray_to_plane(image))
}

pub fn brisque_features_plane(image: &Plane) -> Result<BrisqueFeatures> {
    let (h, w) = image.dim();
    if h < 2 * MSCN_WINDOW || w < 2 * MSCN_WINDOW {
        return Err(Error::Size(format!("brisque needs at least 14x14, got {w}x{h}")));
    }
    let mut out = [0.0; FEATURE_LEN];
    let half = raster::downsample_half(image);
    for (scale, plane) in [image, &half].into_iter().enumerate() {
        let m = mscn(plane, MSCN_STABILIZER)?;
        let base = scale * BrisqueFeatures::PER_SCALE;
        let coeffs: Vec<f64> = m.iter().copied().collect();
        let ggd = fit_ggd_min(&coeffs, MIN_FEATURE_SAMPLES)?;
        out[base] = ggd.alpha;
        out[base + 1] = ggd.variance;
        for o in Orientation::ALL {
            let p = fit_aggd_min(&pairwise_products(&m, o), MIN_FEATURE_SAMPLES)?;
            let i = BrisqueFeatures::block(scale, o);
            out[i..i + 4].copy_from_slice(&[p.alpha, p.mean_offset, p.sigma_left, p.sigma_right]);
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite brisque feature".into()));
    }
    Ok(BrisqueFeatures(out))
}

// ---------------------------------------------------------------------------
// Scoring models

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Clean-image feature statistics: 36-vector mean and row-major 36x36 covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateStats {
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
    #[serde(default)]
    pub provenance: String,
}

impl SurrogateStats {
    /// Mean and unbiased covariance of at least 100 clean-image feature vectors.
    pub fn fit(features: &[BrisqueFeatures], provenance: impl Into<String>) -> Result<Self> {
        if features.len() < MIN_FIT_SAMPLES {
            return Err(Error::Size(format!(
                "surrogate statistics need at least {MIN_FIT_SAMPLES} clean images, got {}",
                features.len()
            )));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; FEATURE_LEN];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f.0.iter()) {
                *m += v / n;
            }
        }
        let mut cov = vec![0.0; FEATURE_LEN * FEATURE_LEN];
        for f in features {
            for i in 0..FEATURE_LEN {
                let di = f.0[i] - mean[i];
                for j in 0..FEATURE_LEN {
                    cov[i * FEATURE_LEN + j] += di * (f.0[j] - mean[j]) / (n - 1.0);
                }
            }
        }
        Ok(SurrogateStats { mean, covariance: cov, provenance: provenance.into() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::manifest::write_file(path, serde_json::to_string_pretty(self).expect("stats serialize").as_bytes())
    }

    /// Statistics bundled with the crate, fitted on 200 procedural clean scenes.
    pub fn bundled() -> Self {
        serde_json::from_str(include_str!("../data/default_surrogate.json")).expect("bundled surrogate parses")
    }

    /// Statistics of `count` procedural clean scenes; `procedural(200, 96, 7)`
    /// reproduces the bundled file.
    pub fn procedural(count: usize, size: u32, seed: u64) -> Result<Self> {
        let features = (0..count as u64)
            .map(|i| {
                let scene = crate::scene::procedural_scene(seed.wrapping_mul(0x9E37_79B9).wrapping_add(i), size, size);
                brisque_features(&image::DynamicImage::ImageRgb8(scene.image).to_luma8())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::fit(&features, format!("{count} procedural clean scenes, {size}x{size}, seed {seed}"))
    }
}

#[derive(Debug, Clone)]
pub enum ReferenceModel {
    Regression(LinearModel),
    Surrogate(Whitener),
}

impl ReferenceModel {
    /// A regression model wins over surrogate statistics; neither is an error.
    pub fn load(model: Option<&Path>, surrogate: Option<&Path>) -> Result<Self> {
        if let Some(p) = model {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let m: LinearModel =
                serde_json::from_str(&text).map_err(|e| Error::Load { path: p.to_path_buf(), reason: e.to_string() })?;
            if m.weights.len() != FEATURE_LEN {
                return Err(Error::Configuration(format!("regression model has {} weights", m.weights.len())));
            }
            return Ok(ReferenceModel::Regression(m));
        }
        if let Some(p) = surrogate {
            return Ok(ReferenceModel::Surrogate(Whitener::new(&SurrogateStats::load(p)?)?));
        }
        Err(Error::Configuration("brisque needs a regression model or surrogate statistics".into()))
    }

    pub fn bundled() -> Self {
        ReferenceModel::Surrogate(Whitener::new(&SurrogateStats::bundled()).expect("bundled surrogate is well-formed"))
    }
}

/// Cholesky factor of the (ridge-regularized) surrogate covariance.
#[derive(Debug, Clone)]
pub struct Whitener {
    mean: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Whitener {
    pub fn new(stats: &SurrogateStats) -> Result<Self> {
        if stats.mean.len() != FEATURE_LEN || stats.covariance.len() != FEATURE_LEN * FEATURE_LEN {
            return Err(Error::Configuration("surrogate statistics must be 36 + 36x36 values".into()));
        }
        let mut cov = DMatrix::from_row_slice(FEATURE_LEN, FEATURE_LEN, &stats.covariance);
        cov = (&cov + cov.transpose()) * 0.5;
        let ridge = 1e-6 * cov.trace() / FEATURE_LEN as f64 + 1e-12;
        for i in 0..FEATURE_LEN {
            cov[(i, i)] += ridge;
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Configuration("surrogate covariance is not positive definite".into()))?;
        Ok(Whitener { mean: DVector::from_column_slice(&stats.mean), chol })
    }

    /// `L^-1 (x - mean)`; its norm is the Mahalanobis distance.
    pub fn whiten(&self, features: &BrisqueFeatures) -> DVector<f64> {
        let d = DVector::from_column_slice(&features.0) - &self.mean;
        self.chol.l().solve_lower_triangular(&d).expect("cholesky factor is invertible")
    }
}

/// Lower is better.
pub fn brisque_score(features: &BrisqueFeatures, model: &ReferenceModel) -> f64 {
    match model {
        ReferenceModel::Regression(m) => m.bias + m.weights.iter().zip(features.0.iter()).map(|(w, f)| w * f).sum::<f64>(),
        ReferenceModel::Surrogate(w) => w.whiten(features).norm(),
    }
}

// ---------------------------------------------------------------------------
// Metrics

pub trait QualityMetric: Send + Sync {
    fn descriptor(&self) -> &MetricDescriptor;

    fn score(&self, image_path: &Path) -> Result<f64>;
}

pub struct BrisqueMetric {
    descriptor: MetricDescriptor,
    model: ReferenceModel,
}

impl BrisqueMetric {
    pub fn new(model: ReferenceModel) -> Self {
        BrisqueMetric { descriptor: builtin_descriptor(BRISQUE).expect("builtin"), model }
    }
}

impl QualityMetric for BrisqueMetric {
    fn descriptor(&self) -> &MetricDescriptor {
        &self.descriptor
    }

    fn score(&self, image_path: &Path) -> Result<f64> {
        let img = raster::load_image(image_path)?.to_luma8();
        Ok(brisque_score(&brisque_features(&img)?, &self.model))
    }
}

/// Highest confidence the detector assigns to `class_id`, 0 without detections.
pub fn confidence_metric(image_path: &Path, detector: &dyn DetectorAdapter, class_id: u32) -> Result<f64> {
    let preds = detector.predict(&[image_path.to_path_buf()])?;
    let boxes = preds.into_iter().next().unwrap_or_default();
    Ok(boxes
        .iter()
        .filter(|b| b.class_id == class_id)
        .map(|b| b.confidence)
        .fold(0.0, f64::max))
}

pub struct ConfidenceMetric {
    descriptor: MetricDescriptor,
    detector: Arc<dyn DetectorAdapter>,
    class_id: u32,
}

impl ConfidenceMetric {
    pub fn new(detector: Arc<dyn DetectorAdapter>, class_id: u32) -> Self {
        ConfidenceMetric { descriptor: builtin_descriptor(CONFIDENCE).expect("builtin"), detector, class_id }
    }
}

impl QualityMetric for ConfidenceMetric {
    fn descriptor(&self) -> &MetricDescriptor {
        &self.descriptor
    }

    fn score(&self, image_path: &Path) -> Result<f64> {
        confidence_metric(image_path, self.detector.as_ref(), self.class_id)
    }
}

#[derive(Debug, Deserialize)]
struct ExternalScore {
    score: f64,
}

/// `<exe> --image <path> --output <json>` writing `{"score": <real>}`.
pub struct ExternalMetric {
    pub descriptor: MetricDescriptor,
    pub command: PathBuf,
    pub scratch: PathBuf,
}

impl QualityMetric for ExternalMetric {
    fn descriptor(&self) -> &MetricDescriptor {
        &self.descriptor
    }

    fn score(&self, image_path: &Path) -> Result<f64> {
        let fail = |reason: String| Error::Metric { metric: self.descriptor.name.clone(), reason };
        std::fs::create_dir_all(&self.scratch).map_err(|e| Error::io(&self.scratch, e))?;
        let stem = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let output = self.scratch.join(format!("{stem}__{}.json", self.descriptor.name));
        let out = Command::new(&self.command)
            .arg("--image")
            .arg(image_path)
            .arg("--output")
            .arg(&output)
            .output()
            .map_err(|e| fail(format!("cannot launch {}: {e}", self.command.display())))?;
        if !out.status.success() {
            return Err(fail(format!("exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim())));
        }
        let text = std::fs::read_to_string(&output).map_err(|e| fail(format!("no output: {e}")))?;
        let parsed: ExternalScore = serde_json::from_str(&text).map_err(|e| fail(format!("bad output: {e}")))?;
        if !parsed.score.is_finite() {
            return Err(fail("non-finite score".into()));
        }
        Ok(parsed.score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub image_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolScores {
    pub records: Vec<QualityRecord>,
    pub excluded: Vec<Exclusion>,
}

pub const DEFAULT_MAX_FAILURE_FRACTION: f64 = 0.5;

/// Scores every record; failures are logged and excluded unless they exceed
/// `max_failure_fraction` of the pool.
pub fn score_pool(
    manifest: &DatasetManifest,
    root: &Path,
    metric: &dyn QualityMetric,
    max_failure_fraction: f64,
) -> Result<PoolScores> {
    let name = &metric.descriptor().name;
    let mut out = PoolScores::default();
    for r in &manifest.records {
        match metric.score(&r.resolve(root)) {
            Ok(s) if s.is_finite() => {
                out.records.push(QualityRecord { image_id: r.id.clone(), metric_name: name.clone(), score: s })
            }
            Ok(s) => {
                warn!("{name}: {} scored non-finite {s}, excluded", r.id);
                out.excluded.push(Exclusion { image_id: r.id.clone(), reason: format!("non-finite score {s}") });
            }
            Err(e) => {
                warn!("{name}: {} excluded: {e}", r.id);
                out.excluded.push(Exclusion { image_id: r.id.clone(), reason: e.to_string() });
            }
        }
    }
    let total = manifest.records.len();
    if total > 0 && out.excluded.len() as f64 > max_failure_fraction * total as f64 {
        return Err(Error::PoolScoring { failed: out.excluded.len(), total });
    }
    Ok(out)
}

/// BRISQUE feature vectors keyed by record id, the default CORE-SET embedding.
pub fn brisque_embeddings(manifest: &DatasetManifest, root: &Path) -> Result<std::collections::BTreeMap<String, Vec<f64>>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let img = raster::load_image(&r.resolve(root))?.to_luma8();
            Ok((r.id.clone(), brisque_features(&img)?.0.to_vec()))
        })
        .collect()
}
