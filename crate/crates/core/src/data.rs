//! Dataset construction: source filtering, COCO and Flickr30k Entities
//! ingestion, splits, baselines, the synthetic pool, mixing and ablation sets.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::Synthesizer;
use crate::geometry::BBox;
use crate::manifest::{Annotation, DatasetManifest, ImageRecord, Provenance};
use crate::raster;
use crate::scene::procedural_scene;

pub const PERSON: &str = "person";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceFilterSpec {
    pub class_name: String,
    pub min_area: f64,
    pub max_area: f64,
    pub max_instances: usize,
}

impl Default for SourceFilterSpec {
    fn default() -> Self {
        Self { class_name: PERSON.into(), min_area: 0.05, max_area: 0.80, max_instances: 1 }
    }
}

impl SourceFilterSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.min_area && self.min_area < self.max_area && self.max_area <= 1.0) {
            return Err(Error::Parameter(format!("area range [{}, {}] must satisfy 0 < min < max <= 1", self.min_area, self.max_area)));
        }
        if self.max_instances == 0 {
            return Err(Error::Parameter("max_instances must be positive".into()));
        }
        Ok(())
    }
}

fn class_index(class_names: &[String], name: &str) -> Option<u32> {
    class_names.iter().position(|c| c.eq_ignore_ascii_case(name)).map(|i| i as u32)
}

/// Keeps records with 1..=`max_instances` annotations of the class, each with
/// relative area in `[min_area, max_area]`. Other classes are dropped and the
/// kept class becomes class 0 of a single-class manifest.
pub fn filter_source(manifest: &DatasetManifest, spec: &SourceFilterSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut out = DatasetManifest::new(manifest.name.clone(), vec![spec.class_name.clone()]);
    let Some(class) = class_index(&manifest.class_names, &spec.class_name) else {
        warn!("{}: no class named {}", manifest.name, spec.class_name);
        return Ok(out);
    };
    for r in &manifest.records {
        let hits: Vec<&Annotation> = r.annotations.iter().filter(|a| a.class_id == class).collect();
        if hits.is_empty() || hits.len() > spec.max_instances {
            continue;
        }
        if !hits.iter().all(|a| (spec.min_area..=spec.max_area).contains(&a.bbox.relative_area())) {
            continue;
        }
        let mut kept = r.clone();
        kept.annotations = hits.iter().map(|a| Annotation { class_id: 0, bbox: a.bbox }).collect();
        out.records.push(kept);
    }
    info!("{}: kept {} of {} records", manifest.name, out.len(), manifest.len());
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    #[serde(default)]
    category_id: Option<u64>,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    caption: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

fn read_coco(path: &Path) -> Result<CocoFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })
}

/// Reads COCO instance annotations. Record paths are `image_prefix/file_name`;
/// `captions`, when given, is a COCO captions file whose first caption per image
/// (by position) becomes the record caption.
pub fn load_coco(instances: &Path, captions: Option<&Path>, image_prefix: &Path) -> Result<DatasetManifest> {
    let coco = read_coco(instances)?;
    let mut cats: Vec<&CocoCategory> = coco.categories.iter().collect();
    cats.sort_by_key(|c| c.id);
    let class_of: BTreeMap<u64, u32> = cats.iter().enumerate().map(|(i, c)| (c.id, i as u32)).collect();
    let name = instances.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "coco".into());
    let mut m = DatasetManifest::new(name, cats.iter().map(|c| c.name.clone()).collect());

    let mut caption_of: BTreeMap<u64, String> = BTreeMap::new();
    if let Some(p) = captions {
        for a in read_coco(p)?.annotations {
            if let Some(c) = a.caption {
                caption_of.entry(a.image_id).or_insert_with(|| c.trim().to_string());
            }
        }
    }

    let mut pos: BTreeMap<u64, usize> = BTreeMap::new();
    for img in &coco.images {
        let stem = Path::new(&img.file_name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| img.id.to_string());
        let mut r = ImageRecord::real(stem, image_prefix.join(&img.file_name), img.width, img.height);
        r.caption = caption_of.remove(&img.id).unwrap_or_default();
        pos.insert(img.id, m.records.len());
        m.records.push(r);
    }
    for a in &coco.annotations {
        let (Some(cat), Some([x, y, w, h])) = (a.category_id, a.bbox) else { continue };
        let Some(&i) = pos.get(&a.image_id) else {
            return Err(Error::Load { path: instances.to_path_buf(), reason: format!("annotation for unknown image {}", a.image_id) });
        };
        let class_id = *class_of.get(&cat).ok_or_else(|| Error::Load {
            path: instances.to_path_buf(),
            reason: format!("unknown category {cat}"),
        })?;
        let r = &mut m.records[i];
        match BBox::from_pixel_corners(x, y, x + w, y + h, r.width, r.height) {
            Ok(bbox) => r.annotations.push(Annotation { class_id, bbox }),
            Err(e) => warn!("{}: skipping box {:?}: {e}", r.id, [x, y, w, h]),
        }
    }
    Ok(m)
}

/// One bracketed entity mention of a Flickr30k Entities sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityPhrase {
    pub entity_id: String,
    pub types: Vec<String>,
    pub phrase: String,
}

fn entity_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[/EN#(\d+)((?:/[^\s/\]]+)+)\s+([^\]]*)\]").expect("valid regex"))
}

/// Splits an annotated sentence into its plain caption and entity phrases.
pub fn parse_flickr_sentence(line: &str) -> (String, Vec<EntityPhrase>) {
    let mut phrases = Vec::new();
    let plain = entity_re().replace_all(line, |c: &regex::Captures| {
        phrases.push(EntityPhrase {
            entity_id: c[1].to_string(),
            types: c[2].split('/').filter(|t| !t.is_empty()).map(str::to_string).collect(),
            phrase: c[3].to_string(),
        });
        c[3].to_string()
    });
    let caption = plain.split_whitespace().collect::<Vec<_>>().join(" ");
    (caption, phrases)
}

/// Pixel boxes per entity id plus the image size, from a region XML file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlickrRegions {
    pub width: u32,
    pub height: u32,
    pub boxes: BTreeMap<String, Vec<[f64; 4]>>,
}

pub fn parse_flickr_regions(xml: &str) -> std::result::Result<FlickrRegions, String> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| e.to_string())?;
    let child_text = |n: roxmltree::Node, name: &str| -> Option<String> {
        n.children().find(|c| c.has_tag_name(name)).and_then(|c| c.text()).map(|t| t.trim().to_string())
    };
    let mut out = FlickrRegions::default();
    let root = doc.root_element();
    if let Some(size) = root.children().find(|c| c.has_tag_name("size")) {
        out.width = child_text(size, "width").and_then(|t| t.parse().ok()).ok_or("bad width")?;
        out.height = child_text(size, "height").and_then(|t| t.parse().ok()).ok_or("bad height")?;
    }
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let Some(bnd) = obj.children().find(|c| c.has_tag_name("bndbox")) else { continue };
        let mut coords = [0.0; 4];
        for (k, tag) in ["xmin", "ymin", "xmax", "ymax"].iter().enumerate() {
            coords[k] = child_text(bnd, tag).and_then(|t| t.parse().ok()).ok_or_else(|| format!("bad {tag}"))?;
        }
        for name in obj.children().filter(|c| c.has_tag_name("name")) {
            if let Some(id) = name.text() {
                out.boxes.entry(id.trim().to_string()).or_default().push(coords);
            }
        }
    }
    Ok(out)
}

/// People phrases become class-0 annotations, one per linked region box.
/// Each entity id is used once even when mentioned repeatedly.
pub fn annotate_flickr(phrases: &[EntityPhrase], regions: &FlickrRegions, person_type: &str) -> Vec<Annotation> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for p in phrases {
        if !p.types.iter().any(|t| t == person_type) || !seen.insert(p.entity_id.clone()) {
            continue;
        }
        let Some(boxes) = regions.boxes.get(&p.entity_id) else {
            warn!("entity {} ({}) has no region box; skipped", p.entity_id, p.phrase);
            continue;
        };
        for &[x0, y0, x1, y1] in boxes {
            // region files use inclusive pixel indices
            match BBox::from_pixel_corners(x0, y0, x1 + 1.0, y1 + 1.0, regions.width, regions.height) {
                Ok(bbox) => out.push(Annotation { class_id: 0, bbox }),
                Err(e) => warn!("entity {}: skipping box: {e}", p.entity_id),
            }
        }
    }
    out
}

/// Reads `sentences_dir/<stem>.txt` and `annotations_dir/<stem>.xml` pairs. The
/// first sentence becomes the caption; people entities from all sentences are
/// annotated.
pub fn load_flickr(sentences_dir: &Path, annotations_dir: &Path, image_prefix: &Path) -> Result<DatasetManifest> {
    let mut stems: Vec<PathBuf> = std::fs::read_dir(sentences_dir)
        .map_err(|e| Error::io(sentences_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    stems.sort();
    let mut m = DatasetManifest::new("flickr30k_entities", vec![PERSON.into()]);
    for path in stems {
        let stem = path.file_stem().expect("txt file has stem").to_string_lossy().into_owned();
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let xml_path = annotations_dir.join(format!("{stem}.xml"));
        let xml = match std::fs::read_to_string(&xml_path) {
            Ok(x) => x,
            Err(e) => {
                warn!("{stem}: no region file ({e}); skipped");
                continue;
            }
        };
        let regions = parse_flickr_regions(&xml).map_err(|reason| Error::Load { path: xml_path.clone(), reason })?;
        let mut caption = String::new();
        let mut phrases = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (plain, p) = parse_flickr_sentence(line);
            if caption.is_empty() {
                caption = plain;
            }
            phrases.extend(p);
        }
        let mut r = ImageRecord::real(&stem, image_prefix.join(format!("{stem}.jpg")), regions.width, regions.height);
        r.caption = caption;
        r.annotations = annotate_flickr(&phrases, &regions, "people");
        m.records.push(r);
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { val_fraction: 0.15, test_fraction: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

fn subset(m: &DatasetManifest, name: &str, ids: &[String]) -> DatasetManifest {
    let idx = m.index();
    let mut out = DatasetManifest::new(name, m.class_names.clone());
    out.records = ids.iter().map(|id| idx[id.as_str()].clone()).collect();
    out
}

fn shuffled_ids(m: &DatasetManifest, seed: u64) -> Vec<String> {
    let mut ids = m.ids();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids
}

/// Seeded train/val/test partition of a real-only manifest.
pub fn split_real(m: &DatasetManifest, spec: &SplitSpec, seed: u64) -> Result<Splits> {
    if m.records.iter().any(|r| r.provenance != Provenance::Real) {
        return Err(Error::Input("splits are carved from real records only".into()));
    }
    let held = spec.val_fraction + spec.test_fraction;
    if spec.val_fraction < 0.0 || spec.test_fraction < 0.0 || held >= 1.0 {
        return Err(Error::Parameter(format!("invalid split fractions {spec:?}")));
    }
    let ids = shuffled_ids(m, seed);
    let n = ids.len();
    let n_val = (n as f64 * spec.val_fraction).round() as usize;
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let (val, rest) = ids.split_at(n_val);
    let (test, train) = rest.split_at(n_test.min(rest.len()));
    Ok(Splits {
        train: subset(m, &format!("{}_train", m.name), train),
        val: subset(m, &format!("{}_val", m.name), val),
        test: subset(m, &format!("{}_test", m.name), test),
    })
}

pub const SMALL_BASELINE: usize = 250;
pub const LARGE_BASELINE: usize = 500;

/// Nested baselines of 250 and 500 records.
pub fn build_baselines(filtered: &DatasetManifest, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    build_baselines_sized(filtered, SMALL_BASELINE, LARGE_BASELINE, seed)
}

/// The smaller baseline is a prefix of the same seeded permutation as the larger.
pub fn build_baselines_sized(filtered: &DatasetManifest, small: usize, large: usize, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if small > large {
        return Err(Error::Size(format!("small baseline {small} exceeds large baseline {large}")));
    }
    if filtered.len() < large {
        return Err(Error::Size(format!("{} filtered records, need {large}", filtered.len())));
    }
    let ids = shuffled_ids(filtered, seed);
    Ok((subset(filtered, &format!("baseline_{small}"), &ids[..small]), subset(filtered, &format!("baseline_{large}"), &ids[..large])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFailure {
    pub source_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shortfall {
    pub target: usize,
    pub produced: usize,
    pub failures: Vec<SourceFailure>,
}

#[derive(Debug, Clone)]
pub struct PoolBuild {
    pub manifest: DatasetManifest,
    pub shortfall: Option<Shortfall>,
}

/// `variants` synthetic records per base record. A failing source costs its
/// variants and is listed in the shortfall; records keep base order.
pub fn build_synthetic_pool(base: &DatasetManifest, synth: &Synthesizer, variants: usize, workers: usize) -> Result<PoolBuild> {
    let threads = match synth.max_parallelism() {
        Some(cap) => workers.clamp(1, cap.max(1)),
        None => workers.max(1),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Configuration(format!("thread pool: {e}")))?;
    let results: Vec<Result<Vec<ImageRecord>>> =
        pool.install(|| base.records.par_iter().map(|r| synth.synthesize(r, variants)).collect());

    let mut manifest = DatasetManifest::new(format!("{}_pool", base.name), base.class_names.clone());
    let mut failures = Vec::new();
    for (src, res) in base.records.iter().zip(results) {
        match res {
            Ok(recs) => manifest.records.extend(recs),
            Err(e) => {
                warn!("{}: generation failed: {e}", src.id);
                failures.push(SourceFailure { source_id: src.id.clone(), reason: e.to_string() });
            }
        }
    }
    let target = base.len() * variants;
    let shortfall = (manifest.len() < target).then(|| Shortfall { target, produced: manifest.len(), failures });
    if let Some(s) = &shortfall {
        warn!("synthetic pool short by {} of {}", s.target - s.produced, s.target);
    }
    Ok(PoolBuild { manifest, shortfall })
}

/// Base records verbatim followed by the selected pool records, in selection order.
pub fn mix(base: &DatasetManifest, pool: &DatasetManifest, selected: &[String]) -> Result<DatasetManifest> {
    if selected.len() > pool.len() {
        return Err(Error::Size(format!("{} selected from a pool of {}", selected.len(), pool.len())));
    }
    let idx = pool.index();
    let mut out = base.clone();
    out.name = format!("{}_plus_{}", base.name, selected.len());
    let mut seen = BTreeSet::new();
    for id in selected {
        let r = idx.get(id.as_str()).ok_or_else(|| Error::Input(format!("{id} is not in the pool")))?;
        if !seen.insert(id.as_str()) {
            return Err(Error::Input(format!("{id} selected twice")));
        }
        out.records.push((*r).clone());
    }
    Ok(out)
}

/// Duplicates base records round-robin (in a seeded order) up to `total`.
/// Copies keep the source path and get ids `<id>#dup<k>`.
pub fn build_ablation(base: &DatasetManifest, total: usize, seed: u64) -> Result<DatasetManifest> {
    if total < base.len() {
        return Err(Error::Size(format!("ablation size {total} is below the base size {}", base.len())));
    }
    let mut out = base.clone();
    out.name = format!("{}_ablation_{total}", base.name);
    if base.is_empty() {
        return if total == 0 { Ok(out) } else { Err(Error::Size("cannot duplicate an empty base".into())) };
    }
    let order = shuffled_ids(base, seed);
    let idx = base.index();
    let mut k = 0usize;
    while out.len() < total {
        let round = k / order.len() + 1;
        let mut r = idx[order[k % order.len()].as_str()].clone();
        r.id = format!("{}#dup{round}", r.id);
        out.records.push(r);
        k += 1;
    }
    Ok(out)
}

/// Writes `count` procedural single-person images under `root/images` and
/// returns their manifest (paths relative to `root`).
pub fn write_toy_dataset(root: &Path, count: usize, size: (u32, u32), seed: u64) -> Result<DatasetManifest> {
    let mut m = DatasetManifest::new("toy", vec![PERSON.into()]);
    for i in 0..count {
        let scene = procedural_scene(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), size.0, size.1);
        let rel = PathBuf::from("images").join(format!("toy_{i:04}.png"));
        raster::save_rgb(&scene.image, &root.join(&rel))?;
        let mut r = ImageRecord::real(format!("toy_{i:04}"), rel, size.0, size.1);
        r.caption = scene.caption;
        r.annotations.push(Annotation { class_id: 0, bbox: scene.person });
        m.records.push(r);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::validate_manifest;

    fn person(area: f64) -> Annotation {
        let s = area.sqrt();
        Annotation { class_id: 0, bbox: BBox { cx: 0.5, cy: 0.5, w: s, h: s } }
    }

    fn manifest_of(n: usize) -> DatasetManifest {
        let mut m = DatasetManifest::new("src", vec!["person".into()]);
        for i in 0..n {
            let mut r = ImageRecord::real(format!("r{i:04}"), format!("img/r{i:04}.png"), 64, 64);
            r.annotations.push(person(0.3));
            m.records.push(r);
        }
        m
    }

    #[test]
    fn filter_examples() {
        let mut m = DatasetManifest::new("c", vec!["bicycle".into(), "person".into()]);
        let mut one = ImageRecord::real("one", "one.png", 10, 10);
        one.annotations = vec![Annotation { class_id: 1, ..person(0.5) }, Annotation { class_id: 0, ..person(0.1) }];
        let mut small = ImageRecord::real("small", "small.png", 10, 10);
        small.annotations = vec![Annotation { class_id: 1, ..person(0.03) }];
        let mut two = ImageRecord::real("two", "two.png", 10, 10);
        two.annotations = vec![Annotation { class_id: 1, ..person(0.3) }, Annotation { class_id: 1, ..person(0.4) }];
        m.records = vec![one, small, two];
        let f = filter_source(&m, &SourceFilterSpec::default()).unwrap();
        assert_eq!(f.ids(), vec!["one".to_string()]);
        assert_eq!(f.records[0].annotations, vec![person(0.5)]);
        assert_eq!(f.class_names, vec!["person".to_string()]);
        assert_eq!(filter_source(&f, &SourceFilterSpec::default()).unwrap(), f);
        let bad = SourceFilterSpec { min_area: 0.9, max_area: 0.1, ..Default::default() };
        assert!(filter_source(&m, &bad).is_err());
    }

    #[test]
    fn flickr_sentence_and_annotation() {
        let (caption, phrases) = parse_flickr_sentence(
            "[/EN#1/people A woman] in [/EN#2/clothing a yellow shirt] talks to [/EN#3/people/other two kids] .",
        );
        assert_eq!(caption, "A woman in a yellow shirt talks to two kids .");
        assert_eq!(phrases.len(), 3);
        assert_eq!(phrases[2].types, vec!["people".to_string(), "other".to_string()]);
        let xml = r#"<annotation><size><width>100</width><height>50</height><depth>3</depth></size>
            <object><name>1</name><bndbox><xmin>0</xmin><ymin>0</ymin><xmax>49</xmax><ymax>49</ymax></bndbox></object>
            <object><name>2</name><bndbox><xmin>10</xmin><ymin>10</ymin><xmax>20</xmax><ymax>20</ymax></bndbox></object>
            <object><name>3</name><bndbox><xmin>60</xmin><ymin>0</ymin><xmax>69</xmax><ymax>9</ymax></bndbox></object>
            <object><name>3</name><bndbox><xmin>80</xmin><ymin>0</ymin><xmax>89</xmax><ymax>9</ymax></bndbox></object>
            <object><name>4</name><nobndbox>1</nobndbox></object></annotation>"#;
        let regions = parse_flickr_regions(xml).unwrap();
        let only_woman = annotate_flickr(&phrases[..2], &regions, "people");
        assert_eq!(only_woman.len(), 1);
        assert!((only_woman[0].bbox.cx - 0.25).abs() < 1e-12 && (only_woman[0].bbox.h - 1.0).abs() < 1e-12);
        let clothing = annotate_flickr(&phrases[1..2], &regions, "people");
        assert!(clothing.is_empty());
        // the people phrase linked to two boxes yields two annotations, which the
        // single-instance filter then rejects
        let kids = annotate_flickr(&phrases[2..], &regions, "people");
        assert_eq!(kids.len(), 2);
        let mut m = DatasetManifest::new("f", vec!["person".into()]);
        let mut r = ImageRecord::real("k", "k.jpg", 100, 50);
        r.annotations = kids;
        m.records.push(r);
        let loose = SourceFilterSpec { min_area: 0.001, ..Default::default() };
        assert!(filter_source(&m, &loose).unwrap().is_empty());
        let missing = [EntityPhrase { entity_id: "9".into(), types: vec!["people".into()], phrase: "x".into() }];
        assert!(annotate_flickr(&missing, &regions, "people").is_empty());
    }

    #[test]
    fn splits_partition() {
        let m = manifest_of(100);
        let s = split_real(&m, &SplitSpec::default(), 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        let mut all: Vec<String> = [s.train.ids(), s.val.ids(), s.test.ids()].concat();
        all.sort();
        assert_eq!(all, m.ids());
        assert_eq!(split_real(&m, &SplitSpec::default(), 4).unwrap(), s);
    }

    #[test]
    fn baselines_nested() {
        let m = manifest_of(600);
        let (a, b) = build_baselines(&m, 7).unwrap();
        assert_eq!((a.len(), b.len()), (250, 500));
        let big: BTreeSet<String> = b.ids().into_iter().collect();
        assert!(a.ids().iter().all(|i| big.contains(i)));
        assert_eq!(build_baselines(&m, 7).unwrap(), (a, b));
        assert!(matches!(build_baselines(&manifest_of(400), 7), Err(Error::Size(_))));
    }

    #[test]
    fn ablation_counts() {
        let base = manifest_of(250);
        let a = build_ablation(&base, 500, 1).unwrap();
        let mut counts: BTreeMap<PathBuf, usize> = BTreeMap::new();
        for r in &a.records {
            *counts.entry(r.path.clone()).or_default() += 1;
        }
        assert!(counts.values().all(|&c| c == 2));
        let a = build_ablation(&base, 375, 1).unwrap();
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        let mut counts: BTreeMap<PathBuf, usize> = BTreeMap::new();
        for r in &a.records {
            *counts.entry(r.path.clone()).or_default() += 1;
        }
        for c in counts.values() {
            *hist.entry(*c).or_default() += 1;
        }
        assert_eq!(hist, BTreeMap::from([(1, 125), (2, 125)]));
        assert!(validate_manifest(&a).is_valid());
        assert_eq!(a.counts().synthetic, 0);
        assert_eq!(build_ablation(&base, 250, 1).unwrap().records, base.records);
        assert!(build_ablation(&base, 100, 1).is_err());
    }

    #[test]
    fn mix_errors() {
        let base = manifest_of(3);
        let pool = manifest_of(2);
        assert!(mix(&base, &pool, &["nope".into()]).is_err());
        assert!(mix(&base, &pool, &["a".into(), "b".into(), "c".into()]).is_err());
        assert_eq!(mix(&base, &pool, &[]).unwrap().records, base.records);
    }
}
