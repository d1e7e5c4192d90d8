//! Conditioning feature extraction.
//!
//! A native Canny edge extractor, the transposed-mask ("false segmentation")
//! extractor, and a file-based adapter for external backends such as pose or
//! segmentation models.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::process::Command;

use image::{DynamicImage, GrayImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::write_file;
use crate::raster::{self, Plane};

pub const CANNY: &str = "canny";
pub const FALSE_SEGMENTATION: &str = "false_segmentation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Native,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorDescriptor {
    pub name: String,
    pub kind: ExtractorKind,
    pub transposes_geometry: bool,
    /// Upper bound on concurrent invocations; `None` means unbounded.
    #[serde(default)]
    pub max_parallelism: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub source_id: String,
    pub extractor_name: String,
    pub transposed: bool,
    pub pixels: DynamicImage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub extractor_name: String,
    pub source_id: String,
    pub transposes_geometry: bool,
}

impl FeatureImage {
    pub fn dimensions(&self) -> (u32, u32) {
        (self.pixels.width(), self.pixels.height())
    }

    /// Checks the raster against the source size, honouring the transpose flag.
    pub fn check_dimensions(&self, source_width: u32, source_height: u32) -> Result<()> {
        let expected = if self.transposed {
            (source_height, source_width)
        } else {
            (source_width, source_height)
        };
        if self.dimensions() != expected {
            return Err(Error::ContractViolation(format!(
                "{} feature for {} is {:?}, expected {:?}",
                self.extractor_name,
                self.source_id,
                self.dimensions(),
                expected
            )));
        }
        Ok(())
    }

    pub fn sidecar(&self) -> FeatureSidecar {
        FeatureSidecar {
            extractor_name: self.extractor_name.clone(),
            source_id: self.source_id.clone(),
            transposes_geometry: self.transposed,
        }
    }

    /// Writes `<path>` as PNG and `<path>.json` next to it.
    pub fn save(&self, png_path: &Path) -> Result<()> {
        raster::save_png(&self.pixels, png_path)?;
        let json = serde_json::to_string_pretty(&self.sidecar()).expect("sidecar serializes");
        write_file(&sidecar_path(png_path), json.as_bytes())
    }

    pub fn load(png_path: &Path) -> Result<Self> {
        let side = sidecar_path(png_path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: FeatureSidecar =
            serde_json::from_str(&text).map_err(|e| Error::Load { path: side.clone(), reason: e.to_string() })?;
        Ok(FeatureImage {
            source_id: meta.source_id,
            extractor_name: meta.extractor_name,
            transposed: meta.transposes_geometry,
            pixels: raster::load_image(png_path)?,
        })
    }
}

pub fn sidecar_path(png_path: &Path) -> PathBuf {
    png_path.with_extension("json")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CannyParams {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    // Thresholds are on the unnormalized Sobel magnitude of 8-bit input.
    fn default() -> Self {
        CannyParams { sigma: 1.4, low: 50.0, high: 150.0 }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Parameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.low > 0.0 && self.low < self.high && self.high.is_finite()) {
            return Err(Error::Parameter(format!(
                "thresholds need 0 < low < high, got low={} high={}",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Binary Canny edge map (pixels 0 or 255) of a single-channel 8-bit image.
pub fn canny(image: &DynamicImage, params: &CannyParams) -> Result<GrayImage> {
    let gray = match image {
        DynamicImage::ImageLuma8(g) => g,
        other => return Err(Error::Channel(format!("{:?}", other.color()))),
    };
    params.validate()?;
    if gray.width() == 0 || gray.height() == 0 {
        return Err(Error::Parameter("empty image".into()));
    }
    let smoothed = raster::separable_blur(&raster::gray_to_plane(gray), &raster::gaussian_kernel(params.sigma));
    let (magnitude, bins) = sobel(&smoothed);
    let thin = non_maximum_suppression(&magnitude, &bins);
    Ok(hysteresis(&magnitude, &thin, params.low, params.high))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DirectionBin {
    Deg0,
    Deg45,
    Deg90,
    Deg135,
}

impl DirectionBin {
    /// Neighbor offset `(dx, dy)` along the gradient; y grows downwards.
    fn offset(self) -> (isize, isize) {
        match self {
            DirectionBin::Deg0 => (1, 0),
            DirectionBin::Deg45 => (1, 1),
            DirectionBin::Deg90 => (0, 1),
            DirectionBin::Deg135 => (-1, 1),
        }
    }

    fn from_gradient(gx: f64, gy: f64) -> Self {
        let mut angle = gy.atan2(gx).to_degrees();
        if angle < 0.0 {
            angle += 180.0;
        }
        if angle >= 180.0 {
            angle -= 180.0;
        }
        if !(22.5..157.5).contains(&angle) {
            DirectionBin::Deg0
        } else if angle < 67.5 {
            DirectionBin::Deg45
        } else if angle < 112.5 {
            DirectionBin::Deg90
        } else {
            DirectionBin::Deg135
        }
    }
}

fn sobel(p: &Plane) -> (Plane, Vec<DirectionBin>) {
    let (h, w) = p.dim();
    let at = |y: isize, x: isize| p[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]];
    let mut mag = Plane::zeros((h, w));
    let mut bins = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            mag[[y as usize, x as usize]] = (gx * gx + gy * gy).sqrt();
            bins.push(DirectionBin::from_gradient(gx, gy));
        }
    }
    (mag, bins)
}

/// Keeps a pixel when it is not smaller than the neighbor behind it and strictly
/// larger than the one ahead of it along the quantized gradient. Plateaus of two
/// equal maxima therefore keep exactly one pixel.
fn non_maximum_suppression(mag: &Plane, bins: &[DirectionBin]) -> Vec<bool> {
    let (h, w) = mag.dim();
    let sample = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[[y as usize, x as usize]]
        }
    };
    let mut keep = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let m = mag[[y, x]];
            if m <= 0.0 {
                continue;
            }
            let (dx, dy) = bins[y * w + x].offset();
            let before = sample(y as isize - dy, x as isize - dx);
            let after = sample(y as isize + dy, x as isize + dx);
            let tol = 1e-9 * (1.0 + m);
            keep[y * w + x] = m >= before - tol && m > after + tol;
        }
    }
    keep
}

fn hysteresis(mag: &Plane, thin: &[bool], low: f64, high: f64) -> GrayImage {
    let (h, w) = mag.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    let mut visited = vec![false; h * w];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if thin[i] && mag[[y, x]] >= high {
                visited[i] = true;
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        out.put_pixel(x as u32, y as u32, image::Luma([255]));
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !visited[j] && thin[j] && mag[[ny as usize, nx as usize]] >= low {
                    visited[j] = true;
                    queue.push_back((nx as usize, ny as usize));
                }
            }
        }
    }
    out
}

pub fn extract_canny(source_id: &str, image: &DynamicImage, params: &CannyParams) -> Result<FeatureImage> {
    Ok(FeatureImage {
        source_id: source_id.to_string(),
        extractor_name: CANNY.to_string(),
        transposed: false,
        pixels: DynamicImage::ImageLuma8(canny(image, params)?),
    })
}

/// Transposes a segmentation mask so generation is conditioned on the wrong geometry.
pub fn extract_false_segmentation(mask: &FeatureImage) -> FeatureImage {
    FeatureImage {
        source_id: mask.source_id.clone(),
        extractor_name: FALSE_SEGMENTATION.to_string(),
        transposed: !mask.transposed,
        pixels: raster::transpose_dynamic(&mask.pixels),
    }
}

/// Runs `<exe> --input <image> --output <output_png>` and loads the result.
pub fn run_external_extractor(
    descriptor: &ExtractorDescriptor,
    command: &Path,
    source_id: &str,
    image_path: &Path,
    output_png: &Path,
) -> Result<FeatureImage> {
    if descriptor.kind != ExtractorKind::External {
        return Err(Error::Configuration(format!("{} is not an external extractor", descriptor.name)));
    }
    let (sw, sh) = image::image_dimensions(image_path).map_err(|e| Error::image(image_path, e))?;
    if let Some(parent) = output_png.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let output = Command::new(command)
        .arg("--input")
        .arg(image_path)
        .arg("--output")
        .arg(output_png)
        .output()
        .map_err(|e| Error::Extraction {
            extractor: descriptor.name.clone(),
            diagnostics: format!("cannot launch {}: {e}", command.display()),
        })?;
    if !output.status.success() {
        return Err(Error::Extraction {
            extractor: descriptor.name.clone(),
            diagnostics: format!(
                "{} exited with {}: {}",
                command.display(),
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            ),
        });
    }
    let pixels = raster::load_image(output_png).map_err(|e| Error::Extraction {
        extractor: descriptor.name.clone(),
        diagnostics: format!("backend output unreadable: {e}"),
    })?;
    let feature = FeatureImage {
        source_id: source_id.to_string(),
        extractor_name: descriptor.name.clone(),
        transposed: descriptor.transposes_geometry,
        pixels,
    };
    feature.check_dimensions(sw, sh)?;
    Ok(feature)
}

/// A configured extractor that the pipeline can invoke per image.
#[derive(Debug, Clone)]
pub enum Extractor {
    Canny(CannyParams),
    External { descriptor: ExtractorDescriptor, command: PathBuf },
    /// Transposes the mask produced by the wrapped segmentation extractor.
    FalseSegmentation(Box<Extractor>),
}

impl Extractor {
    pub fn descriptor(&self) -> ExtractorDescriptor {
        match self {
            Extractor::Canny(_) => ExtractorDescriptor {
                name: CANNY.into(),
                kind: ExtractorKind::Native,
                transposes_geometry: false,
                max_parallelism: None,
            },
            Extractor::External { descriptor, .. } => descriptor.clone(),
            Extractor::FalseSegmentation(inner) => {
                let inner = inner.descriptor();
                ExtractorDescriptor {
                    name: FALSE_SEGMENTATION.into(),
                    kind: ExtractorKind::Native,
                    transposes_geometry: !inner.transposes_geometry,
                    max_parallelism: inner.max_parallelism,
                }
            }
        }
    }

    pub fn name(&self) -> String {
        self.descriptor().name
    }

    /// Produces the feature image for one source image. `scratch` receives
    /// intermediate files of external backends.
    pub fn extract(&self, source_id: &str, image_path: &Path, scratch: &Path) -> Result<FeatureImage> {
        match self {
            Extractor::Canny(params) => {
                let img = raster::load_image(image_path)?;
                let gray = DynamicImage::ImageLuma8(raster::to_luma(&img));
                extract_canny(source_id, &gray, params)
            }
            Extractor::External { descriptor, command } => {
                let out = scratch.join(format!("{}__{}.png", sanitize(source_id), descriptor.name));
                run_external_extractor(descriptor, command, source_id, image_path, &out)
            }
            Extractor::FalseSegmentation(inner) => {
                let mask = inner.extract(source_id, image_path, scratch)?;
                Ok(extract_false_segmentation(&mask))
            }
        }
    }
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[derive(Debug, Clone, Default)]
pub struct ExtractorRegistry {
    extractors: BTreeMap<String, Extractor>,
}

impl ExtractorRegistry {
    pub fn with_canny(params: CannyParams) -> Self {
        let mut r = ExtractorRegistry::default();
        r.extractors.insert(CANNY.into(), Extractor::Canny(params));
        r
    }

    pub fn register(&mut self, extractor: Extractor) -> Result<()> {
        let name = extractor.name();
        if self.extractors.contains_key(&name) {
            return Err(Error::Configuration(format!("extractor {name} registered twice")));
        }
        self.extractors.insert(name, extractor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Extractor> {
        self.extractors
            .get(name)
            .ok_or_else(|| Error::Configuration(format!("unknown extractor {name}")))
    }

    pub fn names(&self) -> Vec<String> {
        self.extractors.keys().cloned().collect()
    }
}
