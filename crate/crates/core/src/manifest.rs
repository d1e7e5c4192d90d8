//! Dataset manifests, image records and their label files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

/// Ties a synthetic record to the real image and the generation settings it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub source_id: String,
    pub extractor_name: String,
    pub variant_index: usize,
    pub generator_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Image location, relative to the dataset root unless absolute.
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
    pub caption: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<Lineage>,
}

impl ImageRecord {
    pub fn real(id: impl Into<String>, path: impl Into<PathBuf>, width: u32, height: u32) -> Self {
        ImageRecord {
            id: id.into(),
            path: path.into(),
            width,
            height,
            annotations: Vec::new(),
            caption: String::new(),
            provenance: Provenance::Real,
            lineage: None,
        }
    }

    pub fn resolve(&self, root: &Path) -> PathBuf {
        if self.path.is_absolute() {
            self.path.clone()
        } else {
            root.join(&self.path)
        }
    }

    /// Stem used for the per-image label and caption files.
    pub fn stem(&self) -> String {
        self.id.replace(['/', '\\'], "_")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub class_names: Vec<String>,
    pub records: Vec<ImageRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceCounts {
    pub real: usize,
    pub synthetic: usize,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, class_names: Vec<String>) -> Self {
        DatasetManifest { name: name.into(), class_names, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts(&self) -> ProvenanceCounts {
        let mut c = ProvenanceCounts::default();
        for r in &self.records {
            match r.provenance {
                Provenance::Real => c.real += 1,
                Provenance::Synthetic => c.synthetic += 1,
            }
        }
        c
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn index(&self) -> BTreeMap<&str, &ImageRecord> {
        self.records.iter().map(|r| (r.id.as_str(), r)).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    /// Writes one `<stem>.txt` label file per record into `dir`.
    pub fn write_label_files(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for r in &self.records {
            let p = dir.join(format!("{}.txt", r.stem()));
            write_file(&p, format_labels(&r.annotations).as_bytes())?;
        }
        Ok(())
    }

    /// Writes one `<stem>.txt` caption file per record into `dir`.
    pub fn write_caption_files(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for r in &self.records {
            let p = dir.join(format!("{}.txt", r.stem()));
            write_file(&p, format!("{}\n", r.caption).as_bytes())?;
        }
        Ok(())
    }
}

/// Writes `bytes`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `class_id cx cy w h`, one object per line, six decimals.
pub fn format_labels(annotations: &[Annotation]) -> String {
    let mut out = String::new();
    for a in annotations {
        let b = &a.bbox;
        out.push_str(&format!("{} {:.6} {:.6} {:.6} {:.6}\n", a.class_id, b.cx, b.cy, b.w, b.h));
    }
    out
}

pub fn parse_labels(text: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Input(format!("label line {}: expected 5 fields, got {}", lineno + 1, fields.len())));
        }
        let class_id = fields[0]
            .parse::<u32>()
            .map_err(|e| Error::Input(format!("label line {}: {e}", lineno + 1)))?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse::<f64>().map_err(|e| Error::Input(format!("label line {}: {e}", lineno + 1)))?;
        }
        out.push(Annotation { class_id, bbox: BBox::new(v[0], v[1], v[2], v[3])? });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRecord {
    pub image_id: String,
    pub metric_name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DuplicateId { id: String },
    DanglingLineage { id: String, source_id: String },
    MissingLineage { id: String },
    UnexpectedLineage { id: String },
    BoxOutOfRange { id: String, index: usize, detail: String },
    UnknownClass { id: String, index: usize, class_id: u32 },
    EmptyImage { id: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { id } => write!(f, "duplicate record id {id}"),
            Violation::DanglingLineage { id, source_id } => {
                write!(f, "{id}: lineage source {source_id} is not a real record")
            }
            Violation::MissingLineage { id } => write!(f, "{id}: synthetic record without lineage"),
            Violation::UnexpectedLineage { id } => write!(f, "{id}: real record carries lineage"),
            Violation::BoxOutOfRange { id, index, detail } => write!(f, "{id}: annotation {index}: {detail}"),
            Violation::UnknownClass { id, index, class_id } => {
                write!(f, "{id}: annotation {index}: class {class_id} not declared")
            }
            Violation::EmptyImage { id } => write!(f, "{id}: zero width or height"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_manifest(m: &DatasetManifest) -> ValidationReport {
    validate_manifest_with_sources(m, &BTreeSet::new())
}

/// Like [`validate_manifest`], but lineage may also resolve to `external_real_ids`
/// (used for synthetic-only pools whose sources live in another manifest).
pub fn validate_manifest_with_sources(m: &DatasetManifest, external_real_ids: &BTreeSet<String>) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    for r in &m.records {
        if !seen.insert(r.id.as_str()) {
            violations.push(Violation::DuplicateId { id: r.id.clone() });
        }
    }
    let real: BTreeSet<&str> = m
        .records
        .iter()
        .filter(|r| r.provenance == Provenance::Real)
        .map(|r| r.id.as_str())
        .chain(external_real_ids.iter().map(String::as_str))
        .collect();
    let n_classes = m.class_names.len() as u32;

    for r in &m.records {
        if r.width == 0 || r.height == 0 {
            violations.push(Violation::EmptyImage { id: r.id.clone() });
        }
        match (r.provenance, &r.lineage) {
            (Provenance::Synthetic, None) => violations.push(Violation::MissingLineage { id: r.id.clone() }),
            (Provenance::Synthetic, Some(l)) if !real.contains(l.source_id.as_str()) => {
                violations.push(Violation::DanglingLineage { id: r.id.clone(), source_id: l.source_id.clone() })
            }
            (Provenance::Real, Some(_)) => violations.push(Violation::UnexpectedLineage { id: r.id.clone() }),
            _ => {}
        }
        for (i, a) in r.annotations.iter().enumerate() {
            if a.class_id >= n_classes {
                violations.push(Violation::UnknownClass { id: r.id.clone(), index: i, class_id: a.class_id });
            }
            let problems = a.bbox.problems();
            if !problems.is_empty() {
                violations.push(Violation::BoxOutOfRange { id: r.id.clone(), index: i, detail: problems.join("; ") });
            }
        }
    }
    ValidationReport { violations }
}
