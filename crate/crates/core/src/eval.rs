//! Localization metrics: point-localization AP with pixel tolerance, per-class
//! saliency AP, inter-phase prediction distance and the image-centre baseline.
//!
//! Average precision is the threshold-sweep sum `Σ (R_t − R_{t−1}) · P_t` over
//! distinct confidence values in descending order, so tied scores enter
//! together. Without ties it equals the mean of precision at each true-positive
//! rank, taken over all positives.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::bilinear_resize;
use crate::tensor::Tensor;

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        (self.bottom - self.top + 1) * (self.right - self.left + 1)
    }

    /// Whether `(row, col)` lies in the box grown by `tolerance` on every side.
    pub fn contains_within(&self, row: usize, col: usize, tolerance: usize) -> bool {
        row + tolerance >= self.top
            && row <= self.bottom + tolerance
            && col + tolerance >= self.left
            && col <= self.right + tolerance
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let top = self.top.max(other.top);
        let left = self.left.max(other.left);
        let bottom = self.bottom.min(other.bottom);
        let right = self.right.min(other.right);
        if top > bottom || left > right {
            return 0.0;
        }
        let inter = ((bottom - top + 1) * (right - left + 1)) as f64;
        inter / (self.area() as f64 + other.area() as f64 - inter)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPrediction {
    pub image_id: usize,
    pub class_id: usize,
    pub row: usize,
    pub col: usize,
    pub confidence: f64,
}

/// Ground-truth boxes of one image; a class is present iff it has a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTruth {
    pub image_id: usize,
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<(usize, BBox)>,
}

impl ImageTruth {
    pub fn has_class(&self, class: usize) -> bool {
        self.boxes.iter().any(|(c, _)| *c == class)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// (recall, precision) at each distinct threshold, highest threshold first.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Threshold-sweep AP of scored items against `total_positives`.
///
/// Returns AP 0 and an empty curve when there are no positives.
pub fn average_precision(scored: &[(f64, bool)], total_positives: usize) -> PrCurve {
    if total_positives == 0 {
        return PrCurve {
            points: Vec::new(),
            ap: 0.0,
        };
    }
    let mut order: Vec<&(f64, bool)> = scored.iter().collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let npos = total_positives as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut points = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let score = order[i].0;
        while i < order.len() && order[i].0 == score {
            if order[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / npos;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
    }
    PrCurve { points, ap }
}

/// Upscales `heatmap` to the image size and returns the argmax `(row, col)`
/// (first in row-major order on ties) with the maximal value as confidence.
pub fn predict_point(heatmap: &Tensor, image_h: usize, image_w: usize) -> Result<((usize, usize), f64)> {
    let up = bilinear_resize(heatmap, image_h, image_w)?;
    let mut best = 0;
    for (i, &v) in up.data().iter().enumerate() {
        if v > up.data()[best] {
            best = i;
        }
    }
    Ok(((best / image_w, best % image_w), up.data()[best] as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub per_class_ap: Vec<f64>,
    pub map: f64,
}

/// Point-localization AP.
///
/// A prediction is correct iff its class is present in the image and the point
/// falls inside some box of that class dilated by `tolerance` pixels. Wrong
/// points count as false positives; the recall denominator is the number of
/// present (image, class) pairs.
pub fn localization_ap(
    predictions: &[PointPrediction],
    truths: &[ImageTruth],
    class_count: usize,
    tolerance: usize,
) -> Result<LocalizationReport> {
    let by_id: BTreeMap<usize, &ImageTruth> = truths.iter().map(|t| (t.image_id, t)).collect();
    let mut seen = HashSet::new();
    let mut scored = vec![Vec::new(); class_count];
    for p in predictions {
        if !seen.insert((p.image_id, p.class_id)) {
            return Err(Error::invalid(
                "localization_ap",
                format!("duplicate prediction for image {} class {}", p.image_id, p.class_id),
            ));
        }
        if p.class_id >= class_count {
            return Err(Error::invalid("localization_ap", format!("class {} out of range", p.class_id)));
        }
        let truth = by_id.get(&p.image_id).ok_or_else(|| {
            Error::invalid("localization_ap", format!("no ground truth for image {}", p.image_id))
        })?;
        let correct = truth
            .boxes
            .iter()
            .any(|(c, b)| *c == p.class_id && b.contains_within(p.row, p.col, tolerance));
        scored[p.class_id].push((p.confidence, correct));
    }
    let per_class_ap: Vec<f64> = (0..class_count)
        .map(|c| {
            let positives = truths.iter().filter(|t| t.has_class(c)).count();
            average_precision(&scored[c], positives).ap
        })
        .collect();
    let map = per_class_ap.iter().sum::<f64>() / class_count as f64;
    Ok(LocalizationReport { per_class_ap, map })
}

/// Pixel-ranking AP of one heat map against a binary ground-truth mask of the
/// same size; `None` when the mask is empty.
pub fn saliency_ap(heatmap: &Tensor, gt_mask: &Tensor) -> Result<Option<PrCurve>> {
    if heatmap.shape() != gt_mask.shape() {
        return Err(Error::shape("saliency_ap", gt_mask.shape(), heatmap.shape()));
    }
    let mut acc = SaliencyAccumulator::default();
    if !acc.add(heatmap, gt_mask)? {
        return Ok(None);
    }
    Ok(Some(acc.finish()))
}

/// Pools (pixel score, foreground) pairs across images into one ranking.
#[derive(Clone, Debug, Default)]
pub struct SaliencyAccumulator {
    scored: Vec<(f64, bool)>,
    positives: usize,
    skipped: usize,
}

impl SaliencyAccumulator {
    /// Adds one (image, present class) pair; returns false and skips it when
    /// the mask has no foreground.
    pub fn add(&mut self, heatmap: &Tensor, gt_mask: &Tensor) -> Result<bool> {
        if heatmap.shape() != gt_mask.shape() {
            return Err(Error::shape("saliency_ap", gt_mask.shape(), heatmap.shape()));
        }
        let fg = gt_mask.data().iter().filter(|&&v| v != 0.0).count();
        if fg == 0 {
            log::warn!("skipping saliency pair with an empty ground-truth mask");
            self.skipped += 1;
            return Ok(false);
        }
        self.positives += fg;
        self.scored.extend(
            heatmap
                .data()
                .iter()
                .zip(gt_mask.data())
                .map(|(&h, &g)| (h as f64, g != 0.0)),
        );
        Ok(true)
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn finish(&self) -> PrCurve {
        average_precision(&self.scored, self.positives)
    }
}

/// Mean Euclidean distance between predictions matched on (image, class).
pub fn mean_pairwise_distance(a: &[PointPrediction], b: &[PointPrediction]) -> Result<f64> {
    let index: BTreeMap<(usize, usize), &PointPrediction> =
        b.iter().map(|p| ((p.image_id, p.class_id), p)).collect();
    let mut total = 0.0;
    let mut matched = 0usize;
    for p in a {
        if let Some(q) = index.get(&(p.image_id, p.class_id)) {
            let dr = p.row as f64 - q.row as f64;
            let dc = p.col as f64 - q.col as f64;
            total += (dr * dr + dc * dc).sqrt();
            matched += 1;
        }
    }
    if matched == 0 {
        return Err(Error::invalid("mean_pairwise_distance", "no (image, class) pairs in common"));
    }
    Ok(total / matched as f64)
}

/// Confidence assigned to a centre-baseline prediction.
#[derive(Clone, Debug, PartialEq)]
pub enum CenterConfidence {
    /// Fraction of images containing the class.
    ClassPrior,
    /// Per-image class probabilities, indexed like `truths` then by class.
    Scores(Vec<Vec<f64>>),
}

/// Predicts the image centre for every (image, class) pair.
pub fn center_predictions(
    truths: &[ImageTruth],
    class_count: usize,
    confidence: &CenterConfidence,
) -> Result<Vec<PointPrediction>> {
    let prior: Vec<f64> = (0..class_count)
        .map(|c| truths.iter().filter(|t| t.has_class(c)).count() as f64 / truths.len().max(1) as f64)
        .collect();
    let mut out = Vec::with_capacity(truths.len() * class_count);
    for (i, t) in truths.iter().enumerate() {
        for c in 0..class_count {
            let conf = match confidence {
                CenterConfidence::ClassPrior => prior[c],
                CenterConfidence::Scores(s) => *s.get(i).and_then(|r| r.get(c)).ok_or_else(|| {
                    Error::invalid("center_baseline", format!("missing score for image {} class {c}", t.image_id))
                })?,
            };
            out.push(PointPrediction {
                image_id: t.image_id,
                class_id: c,
                row: t.height / 2,
                col: t.width / 2,
                confidence: conf,
            });
        }
    }
    Ok(out)
}

pub fn center_baseline(
    truths: &[ImageTruth],
    class_count: usize,
    confidence: &CenterConfidence,
    tolerance: usize,
) -> Result<LocalizationReport> {
    localization_ap(&center_predictions(truths, class_count, confidence)?, truths, class_count, tolerance)
}
