//! Dataset statistics broken down by split, mirroring the benchmark's
//! summary table: per-level node counts, image counts, images per class,
//! captions, box sizes and aspect ratios.

use std::collections::{BTreeMap, BTreeSet};

use super::manifest::DatasetManifest;
use super::split::SplitAssignment;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatsColumn {
    /// Distinct nodes touched per level 1..=L by the column's classes.
    pub level_counts: Vec<usize>,
    pub images: usize,
    pub img_per_class_min: usize,
    pub img_per_class_max: usize,
    pub img_per_class_mean: f64,
    pub captions: usize,
    pub box_area_min: f64,
    pub box_area_max: f64,
    pub box_aspect_min: f64,
    pub box_aspect_max: f64,
}

#[derive(Debug, Clone)]
pub struct StatsReport {
    pub level_names: Vec<String>,
    pub total: StatsColumn,
    pub seen: StatsColumn,
    pub unseen: StatsColumn,
    /// Images carrying boxes from both splits; counted in both columns.
    pub mixed_images: Vec<String>,
}

fn column_for(manifest: &DatasetManifest, class_names: &BTreeSet<String>) -> StatsColumn {
    let depth = manifest.tree.depth();
    let mut col = StatsColumn {
        level_counts: vec![0; depth],
        ..Default::default()
    };
    if class_names.is_empty() {
        return col;
    }

    let mut touched: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); depth];
    for name in class_names {
        if let Ok(path) = manifest.tree.path(name) {
            for (level, id) in path.iter().enumerate().skip(1) {
                touched[level - 1].insert(id.0);
            }
        }
    }
    col.level_counts = touched.iter().map(|s| s.len()).collect();

    let id_to_name: BTreeMap<&str, &str> = manifest
        .classes
        .values()
        .map(|c| (c.id.as_str(), c.name.as_str()))
        .collect();

    let mut per_class_images: BTreeMap<&str, usize> = BTreeMap::new();
    let mut areas: Vec<f64> = Vec::new();
    let mut aspects: Vec<f64> = Vec::new();
    for img in &manifest.images {
        let mut classes_here: BTreeSet<&str> = BTreeSet::new();
        let mut in_column = false;
        for ann in &img.annotations {
            let leaf = id_to_name[ann.class_id.as_str()];
            if class_names.contains(leaf) {
                in_column = true;
                classes_here.insert(leaf);
                areas.push(ann.bbox.area());
                aspects.push(ann.bbox.aspect());
            }
        }
        if in_column {
            col.images += 1;
            col.captions += img.captions.len();
            for leaf in classes_here {
                *per_class_images.entry(leaf).or_default() += 1;
            }
        }
    }

    let counts: Vec<usize> = class_names
        .iter()
        .map(|n| per_class_images.get(n.as_str()).copied().unwrap_or(0))
        .collect();
    col.img_per_class_min = counts.iter().copied().min().unwrap_or(0);
    col.img_per_class_max = counts.iter().copied().max().unwrap_or(0);
    col.img_per_class_mean = if counts.is_empty() {
        0.0
    } else {
        counts.iter().sum::<usize>() as f64 / counts.len() as f64
    };

    if !areas.is_empty() {
        col.box_area_min = areas.iter().cloned().fold(f64::INFINITY, f64::min);
        col.box_area_max = areas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        col.box_aspect_min = aspects.iter().cloned().fold(f64::INFINITY, f64::min);
        col.box_aspect_max = aspects.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    col
}

pub fn dataset_stats(manifest: &DatasetManifest, split: &SplitAssignment) -> StatsReport {
    let all: BTreeSet<String> = manifest
        .tree
        .leaf_names()
        .iter()
        .map(|s| s.to_string())
        .collect();

    let id_to_name: BTreeMap<&str, &str> = manifest
        .classes
        .values()
        .map(|c| (c.id.as_str(), c.name.as_str()))
        .collect();
    let mut mixed = Vec::new();
    for img in &manifest.images {
        let mut has_seen = false;
        let mut has_unseen = false;
        for ann in &img.annotations {
            let leaf = id_to_name[ann.class_id.as_str()];
            has_seen |= split.is_seen(leaf);
            has_unseen |= split.is_unseen(leaf);
        }
        if has_seen && has_unseen {
            mixed.push(img.id.clone());
        }
    }

    StatsReport {
        level_names: manifest.level_names.clone(),
        total: column_for(manifest, &all),
        seen: column_for(manifest, &split.seen),
        unseen: column_for(manifest, &split.unseen),
        mixed_images: mixed,
    }
}

fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

impl StatsReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\ttotal\tseen\tunseen\n");
        let cols = [&self.total, &self.seen, &self.unseen];
        for (i, name) in self.level_names.iter().enumerate() {
            out.push_str(&format!(
                "#{name}\t{}\t{}\t{}\n",
                cols[0].level_counts.get(i).unwrap_or(&0),
                cols[1].level_counts.get(i).unwrap_or(&0),
                cols[2].level_counts.get(i).unwrap_or(&0),
            ));
        }
        out.push_str(&format!(
            "#images\t{}\t{}\t{}\n",
            cols[0].images, cols[1].images, cols[2].images
        ));
        let range_row = |f: &dyn Fn(&StatsColumn) -> (f64, f64)| {
            cols.iter()
                .map(|c| {
                    let (lo, hi) = f(c);
                    format!("[{}, {}]", fmt_num(lo), fmt_num(hi))
                })
                .collect::<Vec<_>>()
                .join("\t")
        };
        out.push_str(&format!(
            "img/cls range\t{}\n",
            range_row(&|c| (c.img_per_class_min as f64, c.img_per_class_max as f64))
        ));
        out.push_str(&format!(
            "img/cls avg\t{}\t{}\t{}\n",
            fmt_num(self.total.img_per_class_mean),
            fmt_num(self.seen.img_per_class_mean),
            fmt_num(self.unseen.img_per_class_mean),
        ));
        out.push_str(&format!(
            "#captions\t{}\t{}\t{}\n",
            cols[0].captions, cols[1].captions, cols[2].captions
        ));
        out.push_str(&format!(
            "box-size range\t{}\n",
            range_row(&|c| (c.box_area_min, c.box_area_max))
        ));
        out.push_str(&format!(
            "box W/H range\t{}\n",
            range_row(&|c| (c.box_aspect_min, c.box_aspect_max))
        ));
        out.push_str(&format!("mixed-split images\t{}\t-\t-\n", self.mixed_images.len()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::manifest::{validate_manifest, ManifestFile};

    fn fixture() -> (DatasetManifest, SplitAssignment) {
        let v = serde_json::json!({
            "taxonomy": ["genus", "species"],
            "classes": [
                {"id": "c1", "name": "a", "description": "", "path": ["g1"]},
                {"id": "c2", "name": "b", "description": "", "path": ["g1"]},
                {"id": "c3", "name": "c", "description": "", "path": ["g2"]},
            ],
            "images": [
                {"id": "i1", "w": 100.0, "h": 100.0, "captions": ["x", "y"],
                 "boxes": [{"x_min": 0.0, "y_min": 0.0, "x_max": 5.0, "y_max": 1.0, "class_id": "c1"}]},
                {"id": "i2", "w": 100.0, "h": 100.0, "captions": ["z"],
                 "boxes": [{"x_min": 0.0, "y_min": 0.0, "x_max": 10.0, "y_max": 20.0, "class_id": "c2"},
                            {"x_min": 1.0, "y_min": 1.0, "x_max": 3.0, "y_max": 9.0, "class_id": "c3"}]},
                {"id": "i3", "w": 50.0, "h": 50.0, "captions": ["w"],
                 "boxes": [{"x_min": 0.0, "y_min": 0.0, "x_max": 4.0, "y_max": 2.0, "class_id": "c1"}]},
            ]
        });
        let raw: ManifestFile = serde_json::from_value(v).unwrap();
        let manifest = validate_manifest(raw).unwrap();
        let split = SplitAssignment {
            seen: ["a", "b"].iter().map(|s| s.to_string()).collect(),
            unseen: ["c"].iter().map(|s| s.to_string()).collect(),
        };
        (manifest, split)
    }

    #[test]
    fn hand_computed_fixture_counts() {
        let (manifest, split) = fixture();
        let report = dataset_stats(&manifest, &split);

        assert_eq!(report.total.level_counts, vec![2, 3]);
        assert_eq!(report.seen.level_counts, vec![1, 2]);
        assert_eq!(report.unseen.level_counts, vec![1, 1]);

        assert_eq!(report.total.images, 3);
        assert_eq!(report.seen.images, 3);
        assert_eq!(report.unseen.images, 1);
        assert_eq!(report.mixed_images, vec!["i2".to_string()]);

        // class a appears in 2 images, b in 1, c in 1
        assert_eq!(report.total.img_per_class_min, 1);
        assert_eq!(report.total.img_per_class_max, 2);
        assert!((report.total.img_per_class_mean - 4.0 / 3.0).abs() < 1e-12);

        assert_eq!(report.total.captions, 4);
        assert_eq!(report.unseen.captions, 1);

        // areas: 5, 200, 16, 8 → total range [5, 200]
        assert_eq!(report.total.box_area_min, 5.0);
        assert_eq!(report.total.box_area_max, 200.0);
        // aspects: 5.0, 0.5, 2.0, 0.25
        assert_eq!(report.total.box_aspect_min, 0.25);
        assert_eq!(report.total.box_aspect_max, 5.0);
    }

    #[test]
    fn empty_unseen_split_is_all_zero() {
        let (manifest, _) = fixture();
        let split = SplitAssignment {
            seen: ["a", "b", "c"].iter().map(|s| s.to_string()).collect(),
            unseen: BTreeSet::new(),
        };
        let report = dataset_stats(&manifest, &split);
        assert_eq!(report.unseen.images, 0);
        assert_eq!(report.unseen.level_counts, vec![0, 0]);
        assert_eq!(report.unseen.captions, 0);
        assert_eq!(report.unseen.box_area_max, 0.0);
        assert!(report.mixed_images.is_empty());
    }

    #[test]
    fn extreme_box_sizes_reported_exactly() {
        let v = serde_json::json!({
            "taxonomy": ["genus", "species"],
            "classes": [{"id": "c1", "name": "a", "description": "", "path": ["g"]}],
            "images": [
                {"id": "i1", "w": 9559765.0, "h": 4000.0, "captions": ["t"],
                 "boxes": [{"x_min": 0.0, "y_min": 0.0, "x_max": 5.0, "y_max": 1.0, "class_id": "c1"},
                            {"x_min": 0.0, "y_min": 0.0, "x_max": 9559765.0, "y_max": 1.0, "class_id": "c1"}]}
            ]
        });
        let raw: ManifestFile = serde_json::from_value(v).unwrap();
        let manifest = validate_manifest(raw).unwrap();
        let split = SplitAssignment {
            seen: ["a".to_string()].into_iter().collect(),
            unseen: BTreeSet::new(),
        };
        let report = dataset_stats(&manifest, &split);
        assert_eq!(report.total.box_area_min, 5.0);
        assert_eq!(report.total.box_area_max, 9_559_765.0);
        let tsv = report.to_tsv();
        assert!(tsv.contains("[5, 9559765]"), "{tsv}");
    }

    #[test]
    fn seen_plus_unseen_images_cover_total_when_no_mixing() {
        let (manifest, _) = fixture();
        // Put b and c (which share image i2) in the same split: no mixing.
        let split = SplitAssignment {
            seen: ["a"].iter().map(|s| s.to_string()).collect(),
            unseen: ["b", "c"].iter().map(|s| s.to_string()).collect(),
        };
        let report = dataset_stats(&manifest, &split);
        assert!(report.mixed_images.is_empty());
        assert_eq!(report.seen.images + report.unseen.images, report.total.images);
    }
}
