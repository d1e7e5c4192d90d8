//! Augmentation presets forwarded to the trainer adapter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEVELS: [&str; 3] = ["low", "medium", "high"];

/// Keys holding probabilities or fractions that must stay in [0, 1].
const UNIT_KEYS: [&str; 6] = ["hsv_h", "hsv_s", "hsv_v", "mosaic", "copy_paste", "mixup"];

/// Every key a preset carries; overrides outside this set are rejected.
pub const KEYS: [&str; 10] = ["scale", "translate", "hsv_h", "hsv_s", "hsv_v", "mosaic", "shear", "degrees", "copy_paste", "mixup"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPreset {
    pub name: String,
    pub params: BTreeMap<String, f64>,
}

impl AugmentationPreset {
    pub fn get(&self, key: &str) -> f64 {
        self.params.get(key).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in &self.params {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::config(format!("trainer.presets.{}.{k}", self.name), "unknown augmentation parameter"));
            }
            if !v.is_finite() || (UNIT_KEYS.contains(&k.as_str()) && !(0.0..=1.0).contains(v)) {
                return Err(Error::config(format!("trainer.presets.{}.{k}", self.name), format!("{v} out of range")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("preset serializes");
        s.push('\n');
        s
    }
}

/// low: scale, translation, HSV and mosaic only. medium adds shear 5 and
/// rotation 10 degrees with copy-paste 0.10. high raises copy-paste to 0.20
/// and enables mixup at 0.20.
pub fn preset(level: &str) -> Result<AugmentationPreset> {
    let mut p: BTreeMap<String, f64> = [
        ("scale", 0.5),
        ("translate", 0.1),
        ("hsv_h", 0.015),
        ("hsv_s", 0.7),
        ("hsv_v", 0.4),
        ("mosaic", 1.0),
        ("shear", 0.0),
        ("degrees", 0.0),
        ("copy_paste", 0.0),
        ("mixup", 0.0),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    match level {
        "low" => {}
        "medium" | "high" => {
            p.insert("shear".into(), 5.0);
            p.insert("degrees".into(), 10.0);
            p.insert("copy_paste".into(), 0.10);
            if level == "high" {
                p.insert("copy_paste".into(), 0.20);
                p.insert("mixup".into(), 0.20);
            }
        }
        other => return Err(Error::config("matrix.augmentation", format!("unknown level {other:?}; expected low, medium or high"))),
    }
    Ok(AugmentationPreset { name: level.to_string(), params: p })
}

/// The built-in preset with configured overrides applied.
pub fn preset_with(level: &str, overrides: &BTreeMap<String, BTreeMap<String, f64>>) -> Result<AugmentationPreset> {
    let mut p = preset(level)?;
    if let Some(o) = overrides.get(level) {
        for (k, v) in o {
            p.params.insert(k.clone(), *v);
        }
    }
    p.validate()?;
    Ok(p)
}
