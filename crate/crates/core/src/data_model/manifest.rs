//! Dataset manifest: JSON schema, loading, and invariant validation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::TaxonomyTree;

/// Axis-aligned box in pixel coordinates, x_min < x_max and y_min < y_max.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.x_min, self.y_min, self.x_max, self.y_max];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bbox coordinate".into()));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::Validation(vec![format!(
                "degenerate box [{}, {}, {}, {}]",
                self.x_min, self.y_min, self.x_max, self.y_max
            )]));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// W/H aspect ratio.
    pub fn aspect(&self) -> f64 {
        self.width() / self.height()
    }
}

// ---- raw JSON schema --------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    /// Level names below the root, coarse to fine, the last being the leaf
    /// level (e.g. ["order", "family", "genus", "species"]).
    pub taxonomy: Vec<String>,
    pub classes: Vec<ClassEntry>,
    pub images: Vec<ImageEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Ancestor names above the leaf, coarse to fine; the class `name` is
    /// the leaf itself.
    pub path: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub w: f64,
    pub h: f64,
    #[serde(default)]
    pub captions: Vec<String>,
    #[serde(default)]
    pub boxes: Vec<BoxEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxEntry {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_id: String,
}

// ---- validated manifest ------------------------------------------------

#[derive(Debug, Clone)]
pub struct ClassInfo {
    pub id: String,
    pub name: String,
    pub description: String,
    pub path: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: String,
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub w: f64,
    pub h: f64,
    pub captions: Vec<String>,
    pub annotations: Vec<Annotation>,
}

/// A manifest whose invariants have all been checked.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub level_names: Vec<String>,
    pub tree: TaxonomyTree,
    pub classes: BTreeMap<String, ClassInfo>, // keyed by class id
    pub images: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn class_by_id(&self, id: &str) -> Result<&ClassInfo> {
        self.classes
            .get(id)
            .ok_or_else(|| Error::UnknownClass(id.to_string()))
    }

    /// Class id for a leaf name.
    pub fn class_id_of_leaf(&self, leaf: &str) -> Result<&str> {
        self.classes
            .values()
            .find(|c| c.name == leaf)
            .map(|c| c.id.as_str())
            .ok_or_else(|| Error::UnknownLeaf(leaf.to_string()))
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    let raw: ManifestFile =
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    validate_manifest(raw)
}

/// Validates a parsed manifest; violations are collected and reported
/// together rather than failing on the first.
pub fn validate_manifest(raw: ManifestFile) -> Result<DatasetManifest> {
    let mut violations: Vec<String> = Vec::new();

    if raw.taxonomy.is_empty() {
        return Err(Error::Validation(vec![
            "taxonomy must name at least the leaf level".into(),
        ]));
    }
    let expected_path_len = raw.taxonomy.len() - 1;

    let mut classes: BTreeMap<String, ClassInfo> = BTreeMap::new();
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    for c in &raw.classes {
        if c.path.len() != expected_path_len {
            violations.push(format!(
                "class '{}': path depth {} does not match taxonomy depth {}",
                c.id,
                c.path.len(),
                expected_path_len
            ));
            continue;
        }
        if classes.contains_key(&c.id) {
            violations.push(format!("duplicate class id '{}'", c.id));
            continue;
        }
        classes.insert(
            c.id.clone(),
            ClassInfo {
                id: c.id.clone(),
                name: c.name.clone(),
                description: c.description.clone(),
                path: c.path.clone(),
            },
        );
        rows.push((c.name.clone(), c.path.clone()));
    }
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }

    let tree = match TaxonomyTree::build(&rows) {
        Ok(t) => t,
        Err(e) => return Err(Error::Validation(vec![format!("taxonomy: {e}")])),
    };

    let captions_present = raw.images.iter().any(|img| !img.captions.is_empty());
    let mut images = Vec::with_capacity(raw.images.len());
    for img in &raw.images {
        if !(img.w.is_finite() && img.h.is_finite() && img.w > 0.0 && img.h > 0.0) {
            violations.push(format!("image '{}': bad dimensions {}x{}", img.id, img.w, img.h));
        }
        if captions_present && img.captions.is_empty() {
            violations.push(format!(
                "image '{}': no caption in a caption-bearing manifest",
                img.id
            ));
        }
        let mut annotations = Vec::with_capacity(img.boxes.len());
        for b in &img.boxes {
            if !classes.contains_key(&b.class_id) {
                violations.push(format!(
                    "image '{}': annotation references unknown class '{}'",
                    img.id, b.class_id
                ));
                continue;
            }
            let bbox = BBox {
                x_min: b.x_min,
                y_min: b.y_min,
                x_max: b.x_max,
                y_max: b.y_max,
            };
            if bbox.validate().is_err() {
                violations.push(format!(
                    "image '{}': degenerate box [{}, {}, {}, {}]",
                    img.id, b.x_min, b.y_min, b.x_max, b.y_max
                ));
                continue;
            }
            if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > img.w || b.y_max > img.h {
                violations.push(format!(
                    "image '{}': box [{}, {}, {}, {}] outside {}x{} bounds",
                    img.id, b.x_min, b.y_min, b.x_max, b.y_max, img.w, img.h
                ));
                continue;
            }
            annotations.push(Annotation {
                bbox,
                class_id: b.class_id.clone(),
            });
        }
        images.push(ImageRecord {
            id: img.id.clone(),
            w: img.w,
            h: img.h,
            captions: img.captions.clone(),
            annotations,
        });
    }

    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(DatasetManifest {
        level_names: raw.taxonomy,
        tree,
        classes,
        images,
    })
}

#[cfg(test)]
pub(crate) fn minimal_manifest_json() -> serde_json::Value {
    serde_json::json!({
        "taxonomy": ["genus", "species"],
        "classes": [
            {"id": "c1", "name": "sp-a", "description": "small", "path": ["gen-x"]}
        ],
        "images": [
            {"id": "img1", "w": 100.0, "h": 80.0, "captions": ["a bird"],
             "boxes": [{"x_min": 10.0, "y_min": 10.0, "x_max": 50.0, "y_max": 40.0, "class_id": "c1"}]}
        ]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_value(v: serde_json::Value) -> Result<DatasetManifest> {
        let raw: ManifestFile = serde_json::from_value(v).unwrap();
        validate_manifest(raw)
    }

    #[test]
    fn minimal_manifest_loads() {
        let m = load_value(minimal_manifest_json()).unwrap();
        assert_eq!(m.images.len(), 1);
        assert_eq!(m.tree.leaf_count(), 1);
        assert_eq!(m.images[0].annotations.len(), 1);
    }

    #[test]
    fn inverted_box_is_reported_with_image_id() {
        let mut v = minimal_manifest_json();
        v["images"][0]["boxes"][0]["x_min"] = serde_json::json!(60.0);
        let err = load_value(v).unwrap_err();
        match err {
            Error::Validation(violations) => {
                assert!(violations.iter().any(|s| s.contains("img1")), "{violations:?}");
            }
            other => panic!("expected Validation, got {other}"),
        }
    }

    #[test]
    fn unknown_class_is_reported() {
        let mut v = minimal_manifest_json();
        v["images"][0]["boxes"][0]["class_id"] = serde_json::json!("nope");
        let err = load_value(v).unwrap_err();
        match err {
            Error::Validation(violations) => {
                assert!(violations.iter().any(|s| s.contains("nope")));
            }
            other => panic!("expected Validation, got {other}"),
        }
    }

    #[test]
    fn out_of_bounds_box_and_missing_caption_collected_together() {
        let mut v = minimal_manifest_json();
        v["images"][0]["boxes"][0]["x_max"] = serde_json::json!(150.0);
        v["images"].as_array_mut().unwrap().push(serde_json::json!({
            "id": "img2", "w": 10.0, "h": 10.0, "captions": [], "boxes": []
        }));
        let err = load_value(v).unwrap_err();
        match err {
            Error::Validation(violations) => {
                assert_eq!(violations.len(), 2, "{violations:?}");
            }
            other => panic!("expected Validation, got {other}"),
        }
    }

    #[test]
    fn captionless_manifest_is_valid() {
        let mut v = minimal_manifest_json();
        v["images"][0]["captions"] = serde_json::json!([]);
        assert!(load_value(v).is_ok());
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Parse(_))));
    }
}
