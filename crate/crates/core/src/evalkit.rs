//! Detection metrics: polygon IoU by supersampled rasterization and greedy
//! one-to-one matching into recall, precision and F-measure.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::{Point2, Polygon};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no ground-truth images to evaluate")]
    NoGroundTruth,
    #[error("predictions for image {0:?} have no ground truth")]
    UnknownImage(String),
    #[error("IoU threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
}

pub const DEFAULT_IOU_THRESH: f64 = 0.5;
/// Samples per pixel along each axis.
pub const SUPERSAMPLE: usize = 2;

/// Inside intervals of `poly` along the horizontal line at `y`.
fn spans_at(poly: &Polygon, y: f64) -> Vec<(f64, f64)> {
    poly.crossings(y).chunks_exact(2).map(|p| (p[0], p[1])).collect()
}

fn inside(spans: &[(f64, f64)], x: f64) -> bool {
    spans.iter().any(|&(a, b)| x > a && x < b)
}

/// Intersection over union sampled on a grid of half-pixel cells spanning
/// both bounding boxes. Returns 0 for an empty union.
pub fn polygon_iou(a: &Polygon, b: &Polygon) -> f64 {
    let (alo, ahi) = a.bbox();
    let (blo, bhi) = b.bbox();
    if ahi.x <= blo.x || bhi.x <= alo.x || ahi.y <= blo.y || bhi.y <= alo.y {
        return 0.0;
    }
    let lo = Point2::new(alo.x.min(blo.x), alo.y.min(blo.y));
    let hi = Point2::new(ahi.x.max(bhi.x), ahi.y.max(bhi.y));
    let step = 1.0 / SUPERSAMPLE as f64;
    let nx = ((hi.x - lo.x) / step).ceil() as usize;
    let ny = ((hi.y - lo.y) / step).ceil() as usize;
    let (mut inter, mut union) = (0usize, 0usize);
    for j in 0..ny {
        let y = lo.y + (j as f64 + 0.5) * step;
        let (sa, sb) = (spans_at(a, y), spans_at(b, y));
        if sa.is_empty() && sb.is_empty() {
            continue;
        }
        for i in 0..nx {
            let x = lo.x + (i as f64 + 0.5) * step;
            let (ia, ib) = (inside(&sa, x), inside(&sb, x));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn fmeasure(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Greedy matching in descending IoU order, ties by (gt, pred) index.
/// Returns matched `(gt, pred)` pairs.
pub fn match_greedy(gts: &[Polygon], preds: &[Polygon], iou_thresh: f64) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for (gi, g) in gts.iter().enumerate() {
        for (pi, p) in preds.iter().enumerate() {
            let iou = polygon_iou(g, p);
            if iou >= iou_thresh {
                cands.push((iou, gi, pi));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut gt_used, mut pred_used) = (vec![false; gts.len()], vec![false; preds.len()]);
    let mut out = Vec::new();
    for (_, gi, pi) in cands {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            out.push((gi, pi));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval {
    pub id: String,
    pub gt: usize,
    pub predictions: usize,
    pub matched: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub recall: f64,
    pub precision: f64,
    pub fmeasure: f64,
    pub matched: usize,
    pub gt_count: usize,
    pub pred_count: usize,
    pub per_image: Vec<ImageEval>,
}

/// Scores predictions against ground truth, both keyed by image id. Images
/// without a prediction entry count as having no detections.
pub fn evaluate(
    preds: &BTreeMap<String, Vec<Polygon>>,
    gts: &BTreeMap<String, Vec<Polygon>>,
    iou_thresh: f64,
) -> Result<EvalReport, EvalError> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(EvalError::BadThreshold(iou_thresh));
    }
    if gts.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }
    if let Some(id) = preds.keys().find(|k| !gts.contains_key(*k)) {
        return Err(EvalError::UnknownImage(id.clone()));
    }
    let empty = Vec::new();
    let per_image: Vec<ImageEval> = gts
        .iter()
        .map(|(id, g)| {
            let p = preds.get(id).unwrap_or(&empty);
            ImageEval {
                id: id.clone(),
                gt: g.len(),
                predictions: p.len(),
                matched: match_greedy(g, p, iou_thresh).len(),
            }
        })
        .collect();
    let matched = per_image.iter().map(|e| e.matched).sum();
    let gt_count = per_image.iter().map(|e| e.gt).sum();
    let pred_count = per_image.iter().map(|e| e.predictions).sum();
    Ok(EvalReport::from_counts(matched, gt_count, pred_count, per_image))
}

impl EvalReport {
    pub fn from_counts(matched: usize, gt_count: usize, pred_count: usize, per_image: Vec<ImageEval>) -> Self {
        let ratio = |a: usize, b: usize| if b > 0 { a as f64 / b as f64 } else { 0.0 };
        let recall = ratio(matched, gt_count);
        let precision = ratio(matched, pred_count);
        Self { recall, precision, fmeasure: fmeasure(precision, recall), matched, gt_count, pred_count, per_image }
    }

    /// `key=value` lines with metrics to four decimals.
    pub fn to_text(&self) -> String {
        format!(
            "recall={:.4}\nprecision={:.4}\nfmeasure={:.4}\nmatched={}\ngt={}\npredictions={}\n",
            self.recall, self.precision, self.fmeasure, self.matched, self.gt_count, self.pred_count
        )
    }

    pub fn per_image_csv(&self) -> String {
        let mut s = String::from("image,gt,predictions,matched\n");
        for e in &self.per_image {
            let _ = writeln!(s, "{},{},{},{}", e.id, e.gt, e.predictions, e.matched);
        }
        s
    }
}
