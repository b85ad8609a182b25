//! Segmentation IoU, detection AP and depth accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box in normalized image coordinates; `(x, y)` is the center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub class_id: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default = "one")]
    pub confidence: f64,
}

fn one() -> f64 {
    1.0
}

impl BBox {
    pub fn new(class_id: usize, x: f64, y: f64, w: f64, h: f64) -> Self {
        Self {
            class_id,
            x,
            y,
            w,
            h,
            confidence: 1.0,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        let (x0, y0, x1, y1) = self.corners();
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Pixel confusion counts, `counts[gt][pred]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8], ignore: Option<u8>) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "class_iou",
                format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()),
            ));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(g) == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.num_classes || g >= self.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "class id {} out of range for {} classes",
                    p.max(g),
                    self.num_classes
                )));
            }
            self.counts[g * self.num_classes + p] += 1;
        }
        Ok(())
    }

    /// Per-class IoU for every class seen in prediction or ground truth.
    pub fn report(&self) -> IouReport {
        let n = self.num_classes;
        let mut per_class = BTreeMap::new();
        for c in 0..n {
            let tp = self.get(c, c);
            let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
            let fp: u64 = (0..n).filter(|&g| g != c).map(|g| self.get(g, c)).sum();
            let denom = tp + fp + fn_;
            if denom > 0 {
                per_class.insert(c, tp as f64 / denom as f64);
            }
        }
        let mean = if per_class.is_empty() {
            0.0
        } else {
            per_class.values().sum::<f64>() / per_class.len() as f64
        };
        IouReport { per_class, mean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: BTreeMap<usize, f64>,
    pub mean: f64,
}

pub fn class_iou_report(pred: &[u8], gt: &[u8], num_classes: usize, ignore: Option<u8>) -> Result<IouReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt, ignore)?;
    Ok(cm.report())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Classes with at least one ground-truth box.
    pub per_class: BTreeMap<usize, f64>,
    pub mean: f64,
}

/// Area under the all-point interpolated precision/recall curve for one
/// class. `hits` lists predictions in rank order. Recall rises by `1/num_gt`
/// at each hit, so the area is the interpolated precision at every hit
/// divided by `num_gt`.
fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += usize::from(hit);
            tp as f64 / (i + 1) as f64
        })
        .collect();
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    hits.iter()
        .zip(&precision)
        .filter(|(hit, _)| **hit)
        .map(|(_, p)| p / num_gt as f64)
        .sum()
}

/// Per-class AP and mAP. Predictions are ranked by confidence; ties keep
/// image order, then order within each image's list.
pub fn detection_ap(preds: &[Vec<BBox>], gts: &[Vec<BBox>], iou_threshold: f64) -> Result<ApReport> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction lists for {} images",
            preds.len(),
            gts.len()
        )));
    }
    let mut num_gt: BTreeMap<usize, usize> = BTreeMap::new();
    for b in gts.iter().flatten() {
        *num_gt.entry(b.class_id).or_default() += 1;
    }
    let mut per_class = BTreeMap::new();
    for (&class, &n) in &num_gt {
        let mut ranked: Vec<(usize, &BBox)> = preds
            .iter()
            .enumerate()
            .flat_map(|(i, ps)| ps.iter().filter(|p| p.class_id == class).map(move |p| (i, p)))
            .collect();
        ranked.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
        let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|&(img, p)| {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gts[img].iter().enumerate() {
                    if g.class_id != class || matched[img][j] {
                        continue;
                    }
                    let iou = box_iou(p, g);
                    if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((j, iou));
                    }
                }
                match best {
                    Some((j, _)) => {
                        matched[img][j] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        per_class.insert(class, average_precision(&hits, n));
    }
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(ApReport { per_class, mean })
}

pub const DEPTH_FLOOR: f64 = 1e-3;

/// Fraction of pixels with `max(p/g, g/p) < threshold`, both floored at 1e-3.
pub fn depth_accuracy(pred: &[f32], gt: &[f32], threshold: f64) -> Result<f64> {
    let (hits, total) = depth_hits(pred, gt, threshold)?;
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

pub(crate) fn depth_hits(pred: &[f32], gt: &[f32], threshold: f64) -> Result<(u64, u64)> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "depth_accuracy",
            format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()),
        ));
    }
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(&p, &g)| {
            let p = (p as f64).max(DEPTH_FLOOR);
            let g = (g as f64).max(DEPTH_FLOOR);
            (p / g).max(g / p) < threshold
        })
        .count();
    Ok((hits as u64, pred.len() as u64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            conf_threshold: 0.25,
            nms_iou: 0.45,
        }
    }
}

/// Turns a `[5+C, S, S]` head output into boxes. Confidence is the cell's
/// objectness, the class is the arg-max class score; overlapping boxes of
/// one class are suppressed greedily. Output stays in row-major cell order.
pub fn decode_detections(grid: &Tensor<f32>, opts: DecodeOptions) -> Result<Vec<BBox>> {
    let shape = grid.shape();
    if shape.len() != 3 || shape[0] < 6 || shape[1] != shape[2] {
        return Err(Error::shape(
            "decode_detections",
            format!("expected [5+C,S,S], got {shape:?}"),
        ));
    }
    let (c, s) = (shape[0] - 5, shape[1]);
    let plane = s * s;
    let d = grid.data();
    let mut candidates = Vec::new();
    for r in 0..s {
        for col in 0..s {
            let p = r * s + col;
            let conf = d[p] as f64;
            if conf < opts.conf_threshold {
                continue;
            }
            let mut class_id = 0;
            for k in 1..c {
                if d[(5 + k) * plane + p] > d[(5 + class_id) * plane + p] {
                    class_id = k;
                }
            }
            let (x, y, w, h) = crate::architectures::detection::decode_cell(
                d[plane + p] as f64,
                d[2 * plane + p] as f64,
                d[3 * plane + p] as f64,
                d[4 * plane + p] as f64,
                r,
                col,
                s,
            );
            let bbox = BBox {
                class_id,
                x: x.clamp(0.0, 1.0),
                y: y.clamp(0.0, 1.0),
                w: w.clamp(1e-6, 1.0),
                h: h.clamp(1e-6, 1.0),
                confidence: conf.min(1.0),
            };
            candidates.push(bbox);
        }
    }
    Ok(nms(&candidates, opts.nms_iou))
}

/// Greedy per-class suppression; survivors are returned in input order.
pub fn nms(boxes: &[BBox], iou: f64) -> Vec<BBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].confidence.total_cmp(&boxes[a].confidence));
    let mut keep = vec![false; boxes.len()];
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| boxes[k].class_id == boxes[i].class_id && box_iou(&boxes[k], &boxes[i]) > iou);
        if !suppressed {
            keep[i] = true;
            kept.push(i);
        }
    }
    boxes.iter().zip(keep).filter(|(_, k)| *k).map(|(b, _)| *b).collect()
}

/// Evaluation summary. Absent tasks are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: BTreeMap<String, f64>,
    pub mean_iou: Option<f64>,
    pub per_class_ap: BTreeMap<String, f64>,
    pub mean_ap: Option<f64>,
    pub depth_accuracy: Option<f64>,
    pub motion_iou: Option<f64>,
    pub losses: BTreeMap<String, f64>,
}

impl MetricsReport {
    /// Column names for [`MetricsReport::csv_row`].
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["model".to_string()];
        cols.extend(self.per_class_iou.keys().map(|k| format!("iou_{k}")));
        cols.push("mean_iou".into());
        cols.extend(self.per_class_ap.keys().map(|k| format!("ap_{k}")));
        cols.extend(["mean_ap", "depth_accuracy", "motion_iou"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self, model: &str) -> String {
        let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut cols = vec![model.to_string()];
        cols.extend(self.per_class_iou.values().map(|v| f(Some(*v))));
        cols.push(f(self.mean_iou));
        cols.extend(self.per_class_ap.values().map(|v| f(Some(*v))));
        cols.push(f(self.mean_ap));
        cols.push(f(self.depth_accuracy));
        cols.push(f(self.motion_iou));
        cols.join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basic_cases() {
        let a = BBox::new(0, 0.5, 0.5, 0.2, 0.2);
        assert_eq!(box_iou(&a, &a), 1.0);
        let b = BBox::new(0, 0.1, 0.1, 0.1, 0.1);
        assert_eq!(box_iou(&a, &b), 0.0);
    }

    #[test]
    fn corner_boxes_one_seventh() {
        // Four-unit frame: (0,0,2,2) and (1,1,2,2) as top-left + size.
        let a = BBox::new(0, 1.0 / 4.0, 1.0 / 4.0, 0.5, 0.5);
        let b = BBox::new(0, 2.0 / 4.0, 2.0 / 4.0, 0.5, 0.5);
        assert!((box_iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn identical_masks_score_one() {
        let m = [0u8, 1, 2, 1, 0, 0];
        let r = class_iou_report(&m, &m, 4, None).unwrap();
        assert_eq!(r.per_class.len(), 3);
        assert!(r.per_class.values().all(|&v| v == 1.0));
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn all_background_vs_half_road() {
        let pred = [0u8; 8];
        let gt = [0u8, 0, 0, 0, 1, 1, 1, 1];
        let r = class_iou_report(&pred, &gt, 3, None).unwrap();
        assert_eq!(r.per_class[&1], 0.0);
        assert_eq!(r.per_class[&0], 0.5);
    }

    #[test]
    fn ignored_pixels_skipped_and_shape_checked() {
        let r = class_iou_report(&[1, 0], &[255, 0], 2, Some(255)).unwrap();
        assert_eq!(r.per_class.len(), 1);
        assert!(class_iou_report(&[0], &[0, 0], 2, None).is_err());
    }

    #[test]
    fn ap_single_match_and_empty() {
        let gt = vec![vec![BBox::new(0, 0.5, 0.5, 0.2, 0.2)]];
        let hit = vec![vec![BBox::new(0, 0.5, 0.5, 0.2, 0.2).with_confidence(0.9)]];
        assert_eq!(detection_ap(&hit, &gt, 0.5).unwrap().mean, 1.0);
        assert_eq!(detection_ap(&[vec![]], &gt, 0.5).unwrap().mean, 0.0);
    }

    #[test]
    fn ap_duplicate_is_false_positive() {
        let gt = vec![vec![BBox::new(0, 0.5, 0.5, 0.2, 0.2)]];
        let p = BBox::new(0, 0.5, 0.5, 0.2, 0.2);
        let preds = vec![vec![p.with_confidence(0.4), p.with_confidence(0.9)]];
        // Rank 1 hits (recall 1, precision 1); rank 2 is a duplicate.
        assert_eq!(detection_ap(&preds, &gt, 0.5).unwrap().mean, 1.0);
        let miss = BBox::new(0, 0.1, 0.1, 0.05, 0.05);
        let preds = vec![vec![miss.with_confidence(0.9), p.with_confidence(0.5)]];
        assert!((detection_ap(&preds, &gt, 0.5).unwrap().mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn depth_accuracy_cases() {
        let g = [0.2f32, 0.5, 0.9];
        assert_eq!(depth_accuracy(&g, &g, 1.25).unwrap(), 1.0);
        let p: Vec<f32> = g.iter().map(|v| v * 2.0).collect();
        assert_eq!(depth_accuracy(&p, &g, 1.25).unwrap(), 0.0);
    }

    fn grid_with(cells: &[(usize, usize, f32, usize)], s: usize, c: usize) -> Tensor<f32> {
        let plane = s * s;
        let mut d = vec![0.0f32; (5 + c) * plane];
        for &(r, col, conf, class) in cells {
            let p = r * s + col;
            d[p] = conf;
            d[plane + p] = 0.5;
            d[2 * plane + p] = 0.5;
            d[3 * plane + p] = 0.5;
            d[4 * plane + p] = 0.5;
            d[(5 + class) * plane + p] = 1.0;
        }
        Tensor::new(vec![5 + c, s, s], d).unwrap()
    }

    #[test]
    fn decode_empty_and_single() {
        let g = grid_with(&[], 4, 2);
        assert!(decode_detections(&g, DecodeOptions::default()).unwrap().is_empty());
        let g = grid_with(&[(1, 2, 0.9, 1)], 4, 2);
        let boxes = decode_detections(&g, DecodeOptions::default()).unwrap();
        assert_eq!(boxes.len(), 1);
        let b = boxes[0];
        assert_eq!(b.class_id, 1);
        assert!((b.x - 2.5 / 4.0).abs() < 1e-7 && (b.y - 1.5 / 4.0).abs() < 1e-7);
        assert!((b.w - 0.25).abs() < 1e-7);
    }

    #[test]
    fn nms_suppresses_lower_confidence_overlap() {
        let a = BBox::new(0, 0.5, 0.5, 0.4, 0.4).with_confidence(0.8);
        // Shifted so the overlap IoU is 0.6: widths 0.4, shift d gives (0.4-d)/(0.4+d)=0.6.
        let b = BBox::new(0, 0.5 + 0.1, 0.5, 0.4, 0.4).with_confidence(0.7);
        assert!((box_iou(&a, &b) - 0.6).abs() < 1e-12);
        let kept = nms(&[b, a], 0.45);
        assert_eq!(kept, vec![a]);
        let other = BBox { class_id: 1, ..b };
        assert_eq!(nms(&[other, a], 0.45).len(), 2);
    }
}
