//! Detection evaluation: IoU, greedy matching, Recall@k, class-wise
//! average precision, and seen/unseen/harmonic-mean reporting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_model::{BBox, SplitAssignment};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub class_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub bbox: BBox,
    pub class_id: String,
}

/// Scored, boxed, leaf-labeled predictions plus the ground truth they are
/// judged against.
#[derive(Debug, Clone, Default)]
pub struct DetectionSet {
    pub predictions: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

impl DetectionSet {
    pub fn validate(&self) -> Result<()> {
        for p in &self.predictions {
            p.bbox.validate()?;
            if !p.score.is_finite() {
                return Err(Error::NonFinite(format!(
                    "score for image {}",
                    p.image_id
                )));
            }
        }
        for g in &self.ground_truth {
            g.bbox.validate()?;
        }
        Ok(())
    }

    /// Restriction to a class subset, predictions and ground truth alike.
    fn restrict(&self, classes: &BTreeSet<String>) -> DetectionSet {
        DetectionSet {
            predictions: self
                .predictions
                .iter()
                .filter(|p| classes.contains(&p.class_id))
                .cloned()
                .collect(),
            ground_truth: self
                .ground_truth
                .iter()
                .filter(|g| classes.contains(&g.class_id))
                .cloned()
                .collect(),
        }
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Stable descending sort by score, ties kept in input order.
fn sort_by_score_desc<T, F: Fn(&T) -> f64>(items: &mut [(usize, T)], score: F) {
    items.sort_by(|a, b| {
        score(&b.1)
            .partial_cmp(&score(&a.1))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
}

/// Recall@k in percent: keep the top-k predictions per image by score, then
/// match greedily by descending score; a prediction matches at most one
/// ground-truth box (highest-IoU unmatched one at or above the threshold,
/// same class unless class-agnostic).
pub fn recall_at_k(dets: &DetectionSet, k: usize, iou_thresh: f64, class_aware: bool) -> f64 {
    if dets.ground_truth.is_empty() {
        return 0.0;
    }

    // top-k per image
    let mut by_image: BTreeMap<&str, Vec<(usize, &Detection)>> = BTreeMap::new();
    for (idx, p) in dets.predictions.iter().enumerate() {
        by_image.entry(&p.image_id).or_default().push((idx, p));
    }
    let mut kept: Vec<(usize, &Detection)> = Vec::new();
    for preds in by_image.values_mut() {
        sort_by_score_desc(preds, |p| p.score);
        kept.extend(preds.iter().take(k).copied());
    }
    sort_by_score_desc(&mut kept, |p| p.score);

    let mut matched = vec![false; dets.ground_truth.len()];
    for (_, p) in &kept {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in dets.ground_truth.iter().enumerate() {
            if matched[gi] || g.image_id != p.image_id {
                continue;
            }
            if class_aware && g.class_id != p.class_id {
                continue;
            }
            let v = iou(&p.bbox, &g.bbox);
            if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
        }
    }
    100.0 * matched.iter().filter(|m| **m).count() as f64 / dets.ground_truth.len() as f64
}

/// Average precision for one class in percent, all-point interpolation.
fn average_precision(
    preds: &[(usize, &Detection)],
    gts: &[(usize, &GroundTruth)],
    iou_thresh: f64,
) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<(usize, &Detection)> = preds.to_vec();
    sort_by_score_desc(&mut order, |p| p.score);

    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(order.len());
    for (_, p) in &order {
        let mut best: Option<(usize, f64)> = None;
        for (slot, (_, g)) in gts.iter().enumerate() {
            if matched[slot] || g.image_id != p.image_id {
                continue;
            }
            let v = iou(&p.bbox, &g.bbox);
            if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((slot, v));
            }
        }
        if let Some((slot, _)) = best {
            matched[slot] = true;
            tp.push(true);
        } else {
            tp.push(false);
        }
    }

    // precision-recall points, then the monotone envelope
    let total = gts.len() as f64;
    let mut acc_tp = 0.0;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp.len()); // (recall, precision)
    for (i, is_tp) in tp.iter().enumerate() {
        if *is_tp {
            acc_tp += 1.0;
        }
        points.push((acc_tp / total, acc_tp / (i as f64 + 1.0)));
    }
    let mut envelope = points.clone();
    let mut best = 0.0;
    for p in envelope.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in envelope {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    100.0 * ap
}

/// Mean AP in percent over classes with at least one ground-truth instance.
pub fn mean_ap(dets: &DetectionSet, iou_thresh: f64) -> f64 {
    let classes: BTreeSet<&str> = dets
        .ground_truth
        .iter()
        .map(|g| g.class_id.as_str())
        .collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for class in &classes {
        let preds: Vec<(usize, &Detection)> = dets
            .predictions
            .iter()
            .enumerate()
            .filter(|(_, p)| p.class_id == *class)
            .collect();
        let gts: Vec<(usize, &GroundTruth)> = dets
            .ground_truth
            .iter()
            .enumerate()
            .filter(|(_, g)| g.class_id == *class)
            .collect();
        total += average_precision(&preds, &gts, iou_thresh);
    }
    total / classes.len() as f64
}

/// 2su/(s+u); undefined when both are zero.
pub fn harmonic_mean(s: f64, u: f64) -> Result<f64> {
    if s < 0.0 || u < 0.0 {
        return Err(Error::Config(format!(
            "harmonic mean needs nonnegative inputs, got {s}, {u}"
        )));
    }
    if s == 0.0 && u == 0.0 {
        return Err(Error::BothZero);
    }
    Ok(2.0 * s * u / (s + u))
}

/// Which class pools the test set is allowed to contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSetting {
    /// Unseen classes only.
    FgZsd,
    /// Both seen and unseen classes, reported separately plus HM.
    FgGzsd,
}

impl std::str::FromStr for EvalSetting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fg-zsd" | "fgzsd" | "zsd" => Ok(EvalSetting::FgZsd),
            "fg-gzsd" | "fggzsd" | "gzsd" => Ok(EvalSetting::FgGzsd),
            other => Err(Error::Config(format!("unknown setting '{other}'"))),
        }
    }
}

pub const RECALL_IOUS: [f64; 3] = [0.4, 0.5, 0.6];
pub const MAP_IOU: f64 = 0.5;

/// Metrics for one split column.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SplitMetrics {
    /// Recall@100 (percent) at IoU 0.4 / 0.5 / 0.6.
    pub recall_at_100: [f64; 3],
    /// mAP (percent) at IoU 0.5.
    pub map: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: EvalSetting,
    pub seen: Option<SplitMetrics>,
    pub unseen: SplitMetrics,
    /// Harmonic mean of seen and unseen mAP, when both are reported.
    pub harmonic_mean_map: Option<f64>,
}

fn split_metrics(dets: &DetectionSet, class_aware: bool) -> SplitMetrics {
    let mut recall = [0.0; 3];
    for (slot, thresh) in RECALL_IOUS.iter().enumerate() {
        recall[slot] = recall_at_k(dets, 100, *thresh, class_aware);
    }
    SplitMetrics {
        recall_at_100: recall,
        map: mean_ap(dets, MAP_IOU),
    }
}

/// FG-ZSD: unseen-only metrics (seen ground truth is a setting mismatch).
/// FG-GZSD: seen and unseen metrics plus the harmonic mean of the mAPs.
pub fn evaluate(
    dets: &DetectionSet,
    split: &SplitAssignment,
    setting: EvalSetting,
    class_aware: bool,
) -> Result<EvalReport> {
    dets.validate()?;
    let seen_classes: BTreeSet<String> = split.seen.iter().cloned().collect();
    let unseen_classes: BTreeSet<String> = split.unseen.iter().cloned().collect();
    for g in &dets.ground_truth {
        if !seen_classes.contains(&g.class_id) && !unseen_classes.contains(&g.class_id) {
            return Err(Error::UnknownClass(g.class_id.clone()));
        }
    }

    match setting {
        EvalSetting::FgZsd => {
            if let Some(g) = dets
                .ground_truth
                .iter()
                .find(|g| seen_classes.contains(&g.class_id))
            {
                return Err(Error::SettingMismatch(format!(
                    "seen-class ground truth '{}' in image {} under fg-zsd",
                    g.class_id, g.image_id
                )));
            }
            let unseen = split_metrics(&dets.restrict(&unseen_classes), class_aware);
            Ok(EvalReport {
                setting,
                seen: None,
                unseen,
                harmonic_mean_map: None,
            })
        }
        EvalSetting::FgGzsd => {
            let seen = split_metrics(&dets.restrict(&seen_classes), class_aware);
            let unseen = split_metrics(&dets.restrict(&unseen_classes), class_aware);
            let hm = if seen.map == 0.0 && unseen.map == 0.0 {
                None
            } else {
                Some(harmonic_mean(seen.map, unseen.map)?)
            };
            Ok(EvalReport {
                setting,
                seen: Some(seen),
                unseen,
                harmonic_mean_map: hm,
            })
        }
    }
}

impl EvalReport {
    /// TSV with one metric column per reported split.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        match (&self.seen, self.setting) {
            (Some(seen), _) => {
                out.push_str("metric\tS\tU\n");
                for (i, t) in RECALL_IOUS.iter().enumerate() {
                    out.push_str(&format!(
                        "Recall@100 IoU={t}\t{:.2}\t{:.2}\n",
                        seen.recall_at_100[i], self.unseen.recall_at_100[i]
                    ));
                }
                out.push_str(&format!(
                    "mAP IoU={MAP_IOU}\t{:.2}\t{:.2}\n",
                    seen.map, self.unseen.map
                ));
                match self.harmonic_mean_map {
                    Some(hm) => out.push_str(&format!("HM mAP\t{hm:.3}\t{hm:.3}\n")),
                    None => out.push_str("HM mAP\t-\t-\n"),
                }
            }
            (None, _) => {
                out.push_str("metric\tU\n");
                for (i, t) in RECALL_IOUS.iter().enumerate() {
                    out.push_str(&format!(
                        "Recall@100 IoU={t}\t{:.2}\n",
                        self.unseen.recall_at_100[i]
                    ));
                }
                out.push_str(&format!("mAP IoU={MAP_IOU}\t{:.2}\n", self.unseen.map));
            }
        }
        out
    }
}

// ---- detections file IO --------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DetectionLine {
    image_id: String,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    class_id: String,
    score: f64,
}

/// Writes predictions as JSON-lines {image_id, x_min, y_min, x_max, y_max,
/// class_id, score}.
pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in dets {
        let line = DetectionLine {
            image_id: d.image_id.clone(),
            x_min: d.bbox.x_min,
            y_min: d.bbox.y_min,
            x_max: d.bbox.x_max,
            y_max: d.bbox.y_max,
            class_id: d.class_id.clone(),
            score: d.score,
        };
        serde_json::to_writer(&mut file, &line).map_err(|e| Error::Parse(e.to_string()))?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (no, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: DetectionLine = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("line {}: {e}", no + 1)))?;
        out.push(Detection {
            image_id: raw.image_id,
            bbox: BBox::new(raw.x_min, raw.y_min, raw.x_max, raw.y_max)?,
            class_id: raw.class_id,
            score: raw.score,
        });
    }
    Ok(out)
}
