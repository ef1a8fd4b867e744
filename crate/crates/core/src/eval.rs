//! COCO-style average precision over IoU thresholds 0.50:0.05:0.95.
//!
//! Per image and class, detections are matched greedily in confidence order to
//! the unmatched ground truth of highest IoU at or above the threshold. Equal
//! confidences are ordered by input index, so results never depend on sort
//! stability. Precision is integrated at 101 recall points.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou_xyxy, Xyxy};
use crate::error::{bail, Result};

/// Detections kept per image and class.
pub const MAX_DETECTIONS: usize = 100;

/// A scored box in pixel `xyxy`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class: usize,
    pub bbox: Xyxy,
    pub score: f64,
}

/// Ground truth of one image in pixel `xyxy`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageTruth {
    pub image_id: u64,
    pub classes: Vec<usize>,
    pub boxes: Vec<Xyxy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Mean over thresholds per class; `None` when the class has no ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub per_class_ap50: Vec<Option<f64>>,
}

pub fn iou_thresholds() -> [f64; 10] {
    core::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

fn valid_box(b: &Xyxy) -> bool {
    b.iter().all(|v| v.is_finite()) && b[0] < b[2] && b[1] < b[3]
}

/// AP for one class at one threshold from `(score, tp)` pairs already in rank order.
fn integrate(ranked: &[bool], npos: usize) -> f64 {
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / npos as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    let mut j = 0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        while j < recall.len() && recall[j] < r {
            j += 1;
        }
        if j < recall.len() {
            sum += precision[j];
        }
    }
    sum / 101.0
}

/// Per-class AP at each threshold: `out[class][threshold]`.
fn class_threshold_ap(dets: &[Detection], truths: &[ImageTruth], num_classes: usize, thresholds: &[f64]) -> Vec<Option<Vec<f64>>> {
    let mut out = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let npos: usize = truths.iter().map(|t| t.classes.iter().filter(|&&k| k == c).count()).sum();
        if npos == 0 {
            out.push(None);
            continue;
        }
        // rank within each image, capped, then merge globally
        let mut kept: Vec<(usize, usize)> = Vec::new(); // (detection index, image slot)
        for (slot, t) in truths.iter().enumerate() {
            let mut mine: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == c && dets[i].image_id == t.image_id).collect();
            mine.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
            mine.truncate(MAX_DETECTIONS);
            kept.extend(mine.into_iter().map(|i| (i, slot)));
        }
        let mut per_t = Vec::with_capacity(thresholds.len());
        for &thr in thresholds {
            let mut hits: Vec<(usize, bool)> = Vec::with_capacity(kept.len());
            let mut used: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.boxes.len()]).collect();
            for &(i, slot) in &kept {
                let t = &truths[slot];
                let mut best = None;
                let mut best_iou = thr;
                for (k, (&gc, gb)) in t.classes.iter().zip(&t.boxes).enumerate() {
                    if gc != c || used[slot][k] {
                        continue;
                    }
                    let v = iou_xyxy(dets[i].bbox, *gb);
                    if v >= best_iou && best.is_none_or(|_| v > best_iou) {
                        best_iou = v;
                        best = Some(k);
                    }
                }
                if let Some(k) = best {
                    used[slot][k] = true;
                }
                hits.push((i, best.is_some()));
            }
            hits.sort_by(|a, b| dets[b.0].score.total_cmp(&dets[a.0].score).then(a.0.cmp(&b.0)));
            let ranked: Vec<bool> = hits.iter().map(|h| h.1).collect();
            per_t.push(integrate(&ranked, npos));
        }
        out.push(Some(per_t));
    }
    out
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// AP, AP50, AP75 and per-class AP, macro-averaged over classes that have ground truth.
/// Detections on images absent from `truths` are ignored.
pub fn average_precision(dets: &[Detection], truths: &[ImageTruth], num_classes: usize) -> Result<Metrics> {
    for d in dets {
        if !(d.score.is_finite() && (0.0..=1.0).contains(&d.score)) {
            bail!(Validation, "detection confidence {} outside [0, 1]", d.score);
        }
        if !valid_box(&d.bbox) {
            bail!(Validation, "detection box {:?} is not a valid xyxy box", d.bbox);
        }
    }
    for t in truths {
        if t.classes.len() != t.boxes.len() {
            bail!(Shape, "image {}: {} classes for {} boxes", t.image_id, t.classes.len(), t.boxes.len());
        }
        if let Some(&c) = t.classes.iter().find(|&&c| c >= num_classes) {
            bail!(Validation, "image {}: class {c} outside {num_classes} classes", t.image_id);
        }
    }
    let thresholds = iou_thresholds();
    let table = class_threshold_ap(dets, truths, num_classes, &thresholds);
    let per_class_ap: Vec<Option<f64>> = table.iter().map(|r| r.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64)).collect();
    let at = |k: usize| -> Vec<Option<f64>> { table.iter().map(|r| r.as_ref().map(|v| v[k])).collect() };
    let per_class_ap50 = at(0);
    Ok(Metrics {
        ap: macro_mean(per_class_ap.iter().copied()),
        ap50: macro_mean(per_class_ap50.iter().copied()),
        ap75: macro_mean(at(5).into_iter()),
        per_class_ap,
        per_class_ap50,
    })
}

/// AP of one class at one IoU threshold.
pub fn class_ap_at(dets: &[Detection], truths: &[ImageTruth], class: usize, threshold: f64) -> Option<f64> {
    let mut table = class_threshold_ap(dets, truths, class + 1, &[threshold]);
    table.pop().flatten().map(|v| v[0])
}

#[cfg(test)]
mod tests;
