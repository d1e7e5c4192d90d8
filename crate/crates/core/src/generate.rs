//! Controlled generation backends and label carry-over.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use image::{DynamicImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extract::{Extractor, ExtractorDescriptor, FeatureImage};
use crate::manifest::{write_file, Annotation, ImageRecord, Lineage, Provenance};
use crate::prompt::{self, CaptionVariant, Vocabulary};
use crate::raster;

pub const MOCK_BACKEND: &str = "mock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Mock,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorDescriptor {
    pub backend_id: String,
    pub kind: GeneratorKind,
    /// Extractor names this backend can be conditioned on; empty accepts any.
    #[serde(default)]
    pub supported_features: Vec<String>,
    #[serde(default)]
    pub max_parallelism: Option<usize>,
}

impl GeneratorDescriptor {
    pub fn supports(&self, extractor_name: &str) -> bool {
        self.supported_features.is_empty() || self.supported_features.iter().any(|f| f == extractor_name)
    }
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub feature: FeatureImage,
    pub prompt: String,
    pub seed: u64,
    pub backend_id: String,
    pub controlnet_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub raster: RgbImage,
    pub backend_id: String,
    pub seed: u64,
    pub prompt: String,
    pub controlnet_id: String,
}

pub trait GeneratorBackend: Send + Sync {
    fn descriptor(&self) -> &GeneratorDescriptor;

    /// Backend-specific generation; callers go through [`generate`].
    fn render(&self, request: &GenerationRequest) -> Result<RgbImage>;
}

/// Validates the request against the backend, renders, and attaches metadata.
pub fn generate(backend: &dyn GeneratorBackend, request: &GenerationRequest) -> Result<GeneratedImage> {
    let desc = backend.descriptor();
    if request.backend_id != desc.backend_id {
        return Err(Error::Configuration(format!(
            "request targets backend {} but {} was given",
            request.backend_id, desc.backend_id
        )));
    }
    if !desc.supports(&request.feature.extractor_name) {
        return Err(Error::Configuration(format!(
            "backend {} does not accept {} features",
            desc.backend_id, request.feature.extractor_name
        )));
    }
    let raster = backend.render(request)?;
    if raster.dimensions() != request.feature.dimensions() {
        return Err(Error::ContractViolation(format!(
            "backend {} returned {:?} for a {:?} feature",
            desc.backend_id,
            raster.dimensions(),
            request.feature.dimensions()
        )));
    }
    Ok(GeneratedImage {
        raster,
        backend_id: desc.backend_id.clone(),
        seed: request.seed,
        prompt: request.prompt.clone(),
        controlnet_id: request.controlnet_id.clone(),
    })
}

/// Deterministic stand-in for a diffusion model: seeded noise keyed by the
/// feature bytes, prompt and seed, with the feature blended in at half intensity.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    descriptor: GeneratorDescriptor,
}

impl Default for MockGenerator {
    fn default() -> Self {
        MockGenerator {
            descriptor: GeneratorDescriptor {
                backend_id: MOCK_BACKEND.into(),
                kind: GeneratorKind::Mock,
                supported_features: Vec::new(),
                max_parallelism: None,
            },
        }
    }
}

impl GeneratorBackend for MockGenerator {
    fn descriptor(&self) -> &GeneratorDescriptor {
        &self.descriptor
    }

    fn render(&self, request: &GenerationRequest) -> Result<RgbImage> {
        let feature = request.feature.pixels.to_luma8();
        let (w, h) = feature.dimensions();
        let mut hasher = Sha256::new();
        hasher.update(w.to_le_bytes());
        hasher.update(h.to_le_bytes());
        hasher.update(feature.as_raw());
        hasher.update((request.prompt.len() as u64).to_le_bytes());
        hasher.update(request.prompt.as_bytes());
        hasher.update(request.seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        Ok(RgbImage::from_fn(w, h, |x, y| {
            let f = u16::from(feature.get_pixel(x, y)[0]);
            let mut px = [0u8; 3];
            for c in &mut px {
                let noise: u16 = rng.random_range(0..=255);
                *c = ((noise + f) / 2) as u8;
            }
            image::Rgb(px)
        }))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalRequest {
    pub feature_path: PathBuf,
    pub prompt: String,
    pub seed: u64,
    pub controlnet_id: String,
    pub output_path: PathBuf,
}

/// File-based adapter: `<exe> --request <request.json>`; the backend writes the
/// PNG named in the request and exits 0.
#[derive(Debug, Clone)]
pub struct ExternalGenerator {
    pub descriptor: GeneratorDescriptor,
    pub command: PathBuf,
    pub scratch: PathBuf,
}

impl GeneratorBackend for ExternalGenerator {
    fn descriptor(&self) -> &GeneratorDescriptor {
        &self.descriptor
    }

    fn render(&self, request: &GenerationRequest) -> Result<RgbImage> {
        let stem = format!("{}__{}", sanitize(&request.feature.source_id), request.seed);
        let feature_path = self.scratch.join(format!("{stem}__feature.png"));
        let output_path = self.scratch.join(format!("{stem}__out.png"));
        let request_path = self.scratch.join(format!("{stem}__request.json"));
        raster::save_png(&request.feature.pixels, &feature_path)?;
        let body = ExternalRequest {
            feature_path,
            prompt: request.prompt.clone(),
            seed: request.seed,
            controlnet_id: request.controlnet_id.clone(),
            output_path: output_path.clone(),
        };
        write_file(&request_path, serde_json::to_string_pretty(&body).expect("request serializes").as_bytes())?;
        let fail = |diagnostics: String| Error::Generation { backend: self.descriptor.backend_id.clone(), diagnostics };
        let out = Command::new(&self.command)
            .arg("--request")
            .arg(&request_path)
            .output()
            .map_err(|e| fail(format!("cannot launch {}: {e}", self.command.display())))?;
        if !out.status.success() {
            return Err(fail(format!(
                "exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let img = raster::load_image(&output_path).map_err(|e| fail(format!("output unreadable: {e}")))?;
        Ok(img.to_rgb8())
    }
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Per-image seed from the master seed and the (source, variant) pair, so the
/// result does not depend on iteration order.
pub fn derive_seed(master_seed: u64, source_id: &str, variant_index: usize, repeat: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update((source_id.len() as u64).to_le_bytes());
    h.update(source_id.as_bytes());
    h.update((variant_index as u64).to_le_bytes());
    if repeat > 0 {
        h.update((repeat as u64).to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn carry_labels(source: &ImageRecord, extractor: &ExtractorDescriptor) -> Vec<Annotation> {
    source
        .annotations
        .iter()
        .map(|a| Annotation {
            class_id: a.class_id,
            bbox: if extractor.transposes_geometry { a.bbox.transpose() } else { a.bbox },
        })
        .collect()
}

pub fn synthetic_id(source_id: &str, extractor_name: &str, variant_index: usize, repeat: usize) -> String {
    if repeat == 0 {
        format!("{source_id}__{extractor_name}__v{variant_index}")
    } else {
        format!("{source_id}__{extractor_name}__v{variant_index}r{repeat}")
    }
}

pub fn build_synthetic_record(
    id: String,
    path: PathBuf,
    source: &ImageRecord,
    variant: &CaptionVariant,
    generated: &GeneratedImage,
    extractor: &ExtractorDescriptor,
) -> ImageRecord {
    let (width, height) = generated.raster.dimensions();
    ImageRecord {
        id,
        path,
        width,
        height,
        annotations: carry_labels(source, extractor),
        caption: variant.text.clone(),
        provenance: Provenance::Synthetic,
        lineage: Some(Lineage {
            source_id: source.id.clone(),
            extractor_name: extractor.name.clone(),
            variant_index: variant.variant_index,
            generator_seed: generated.seed,
        }),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSidecar {
    pub lineage: Lineage,
    pub backend_id: String,
    pub controlnet_id: String,
    pub prompt: String,
}

/// Extraction, caption variants and generation for one source image at a time.
#[derive(Clone)]
pub struct Synthesizer {
    pub extractor: Extractor,
    pub vocabulary: Vocabulary,
    pub backend: Arc<dyn GeneratorBackend>,
    pub controlnet_id: String,
    pub master_seed: u64,
    /// Directory that relative record paths are resolved against.
    pub dataset_root: PathBuf,
    /// Where synthetic images, features and sidecars are written.
    pub output_dir: PathBuf,
}

impl Synthesizer {
    pub fn max_parallelism(&self) -> Option<usize> {
        match (self.extractor.descriptor().max_parallelism, self.backend.descriptor().max_parallelism) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Generates `variants` synthetic records for `source`.
    pub fn synthesize(&self, source: &ImageRecord, variants: usize) -> Result<Vec<ImageRecord>> {
        let desc = self.extractor.descriptor();
        let image_path = source.resolve(&self.dataset_root);
        let scratch = self.output_dir.join("scratch");
        let feature = self.extractor.extract(&source.id, &image_path, &scratch)?;
        feature.check_dimensions(source.width, source.height)?;
        feature.save(&self.output_dir.join("features").join(format!("{}__{}.png", source.stem(), desc.name)))?;

        let count = prompt::variant_count(&source.caption, &self.vocabulary).max(1);
        let mut seen = std::collections::BTreeMap::<usize, usize>::new();
        let mut out = Vec::with_capacity(variants);
        for j in prompt::pool_variant_indices(count, variants) {
            let repeat = {
                let r = seen.entry(j).or_insert(0);
                *r += 1;
                *r - 1
            };
            let variant = if source.caption.is_empty() {
                CaptionVariant { source_caption: String::new(), variant_index: 0, text: String::new() }
            } else {
                prompt::apply_variant(&source.caption, &self.vocabulary, j)?
            };
            let seed = derive_seed(self.master_seed, &source.id, j, repeat);
            let request = GenerationRequest {
                feature: feature.clone(),
                prompt: variant.text.clone(),
                seed,
                backend_id: self.backend.descriptor().backend_id.clone(),
                controlnet_id: self.controlnet_id.clone(),
            };
            let generated = generate(self.backend.as_ref(), &request)?;
            let id = synthetic_id(&source.id, &desc.name, j, repeat);
            let file = self.output_dir.join(format!("{}.png", id.replace(['/', '\\'], "_")));
            raster::save_png(&DynamicImage::ImageRgb8(generated.raster.clone()), &file)?;
            let stored = relative_to(&file, &self.dataset_root);
            let record = build_synthetic_record(id, stored, source, &variant, &generated, &desc);
            let sidecar = SyntheticSidecar {
                lineage: record.lineage.clone().expect("synthetic lineage"),
                backend_id: generated.backend_id.clone(),
                controlnet_id: generated.controlnet_id.clone(),
                prompt: generated.prompt.clone(),
            };
            write_file(
                &file.with_extension("json"),
                serde_json::to_string_pretty(&sidecar).expect("sidecar serializes").as_bytes(),
            )?;
            out.push(record);
        }
        Ok(out)
    }
}

/// `path` relative to `root` when it lives below it, otherwise unchanged.
pub fn relative_to(path: &Path, root: &Path) -> PathBuf {
    path.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}
