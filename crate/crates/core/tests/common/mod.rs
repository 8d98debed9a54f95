//! Independent reference implementations used as test oracles. Nothing here
//! calls into the code under test except for plain data types.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use wsod_core::data::{BBox, GtBox, ImageRecord};
use wsod_core::evald::{Detection, GroundTruth};
use wsod_core::numkit::Matrix;

pub fn to_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn random_rows<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

/// `x·w + b` by explicit triple loop.
pub fn affine_oracle(x: &[Vec<f64>], w: &[Vec<f64>], b: &[f64]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; b.len()]; x.len()];
    for i in 0..x.len() {
        for j in 0..b.len() {
            let mut acc = 0.0;
            for k in 0..w.len() {
                acc += x[i][k] * w[k][j];
            }
            out[i][j] = acc + b[j];
        }
    }
    out
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Straight-line combined scores: softmax over proposals of the detection
/// scores times softmax over classes of the classification scores.
pub fn p_comb_oracle(det: &[Vec<f64>], cls: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let r = det.len();
    let c = det[0].len();
    let mut p_det = vec![vec![0.0; c]; r];
    for j in 0..c {
        let col: Vec<f64> = det.iter().map(|row| row[j]).collect();
        for (i, p) in softmax(&col).into_iter().enumerate() {
            p_det[i][j] = p;
        }
    }
    let p_cls: Vec<Vec<f64>> = cls.iter().map(|row| softmax(row)).collect();
    (0..r)
        .map(|i| (0..c).map(|j| p_det[i][j] * p_cls[i][j]).collect())
        .collect()
}

/// `−(1/R) Σ_i w_i log softmax(s_i)[t_i]` evaluated directly.
pub fn weighted_ce_oracle(scores: &[Vec<f64>], targets: &[(usize, f64)]) -> f64 {
    let r = scores.len() as f64;
    scores
        .iter()
        .zip(targets)
        .map(|(s, &(t, w))| -w * softmax(s)[t].ln())
        .sum::<f64>()
        / r
}

/// IoU by counting cells of a `1/res` grid covering both boxes.
pub fn raster_iou(a: &BBox, b: &BBox, res: f64) -> f64 {
    let x0 = a.x1.min(b.x1);
    let y0 = a.y1.min(b.y1);
    let x1 = a.x2.max(b.x2);
    let y1 = a.y2.max(b.y2);
    let nx = ((x1 - x0) * res).ceil() as usize;
    let ny = ((y1 - y0) * res).ceil() as usize;
    let inside = |bb: &BBox, x: f64, y: f64| x >= bb.x1 && x < bb.x2 && y >= bb.y1 && y < bb.y2;
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..ny {
        let y = y0 + (i as f64 + 0.5) / res;
        for j in 0..nx {
            let x = x0 + (j as f64 + 0.5) / res;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Plain-formula IoU used inside the evaluation oracle.
pub fn iou_formula(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Brute-force single-class AP. Every detection (by descending score) is
/// checked against every GT of its image; among unmatched GTs at or above
/// the threshold the best-overlapping one is taken. The PR curve is then
/// integrated point by point: each true positive contributes `1/num_gt`
/// times the best precision achieved at any rank at or below it.
pub fn ap_oracle(dets: &[Detection], gts: &[GroundTruth], thresh: f64) -> (f64, usize) {
    let n = gts.len();
    let mut ranked: Vec<&Detection> = dets.iter().collect();
    ranked.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    let mut used = vec![false; n];
    let mut is_tp = Vec::new();
    for d in &ranked {
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image_id != d.image_id {
                continue;
            }
            let o = iou_formula(&d.bbox, &gt.bbox);
            if o >= thresh && best.is_none_or(|(bo, _)| o > bo) {
                best = Some((o, g));
            }
        }
        if let Some((_, g)) = best {
            used[g] = true;
        }
        is_tp.push(best.is_some());
    }
    let tp_count = is_tp.iter().filter(|&&t| t).count();
    if n == 0 {
        return (0.0, tp_count);
    }
    let precision_at = |k: usize| {
        let tp = is_tp[..=k].iter().filter(|&&t| t).count();
        tp as f64 / (k + 1) as f64
    };
    let mut sum = 0.0;
    for k in 0..is_tp.len() {
        if is_tp[k] {
            sum += (k..is_tp.len()).map(precision_at).fold(0.0, f64::max);
        }
    }
    (sum / n as f64, tp_count)
}

/// Brute-force CorLoc: per class, the share of images containing it whose
/// single best-scored detection hits one of its boxes.
pub fn corloc_oracle(
    dets: &[Detection],
    gts: &[GroundTruth],
    num_classes: usize,
    thresh: f64,
) -> f64 {
    let mut per_class = Vec::new();
    for c in 0..num_classes {
        let images: BTreeSet<&str> = gts
            .iter()
            .filter(|g| g.class_id == c)
            .map(|g| g.image_id.as_str())
            .collect();
        if images.is_empty() {
            continue;
        }
        let mut hits = 0;
        for img in &images {
            let mut top: Option<&Detection> = None;
            for d in dets.iter().filter(|d| d.class_id == c && d.image_id == *img) {
                if top.is_none_or(|t| d.confidence > t.confidence) {
                    top = Some(d);
                }
            }
            if let Some(t) = top {
                if gts.iter().any(|g| {
                    g.class_id == c && g.image_id == *img && iou_formula(&t.bbox, &g.bbox) >= thresh
                }) {
                    hits += 1;
                }
            }
        }
        per_class.push(hits as f64 / images.len() as f64);
    }
    if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

/// Mean AP over classes with at least one GT, plus per-class TP counts.
pub fn map_oracle(
    dets: &[Detection],
    gts: &[GroundTruth],
    num_classes: usize,
    thresh: f64,
) -> (f64, Vec<usize>) {
    let mut aps = Vec::new();
    let mut tps = Vec::new();
    for c in 0..num_classes {
        let cd: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).cloned().collect();
        let cg: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == c).cloned().collect();
        let (ap, tp) = ap_oracle(&cd, &cg, thresh);
        tps.push(tp);
        if !cg.is_empty() {
            aps.push(ap);
        }
    }
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    (map, tps)
}

pub fn random_box<R: Rng>(rng: &mut R, size: f64) -> BBox {
    let x = rng.random_range(0.0..size * 0.7);
    let y = rng.random_range(0.0..size * 0.7);
    let w = rng.random_range(size * 0.1..size * 0.3);
    let h = rng.random_range(size * 0.1..size * 0.3);
    BBox::new(x, y, x + w, y + h)
}

/// Box overlapping `b` substantially: each edge nudged by up to `frac` of
/// the box extent.
pub fn nudge<R: Rng>(rng: &mut R, b: &BBox, frac: f64) -> BBox {
    let (w, h) = (b.x2 - b.x1, b.y2 - b.y1);
    let mut j = |v: f64, e: f64| v + rng.random_range(-frac..frac) * e;
    let nb = BBox::new(j(b.x1, w), j(b.y1, h), j(b.x2, w), j(b.y2, h));
    if nb.x2 > nb.x1 && nb.y2 > nb.y1 {
        nb
    } else {
        *b
    }
}

/// Minimal annotated record around a set of GT boxes.
pub fn record_with_gt(id: &str, gts: Vec<GtBox>, size: u32) -> ImageRecord {
    let proposals = vec![BBox::new(0.0, 0.0, 1.0, 1.0)];
    ImageRecord {
        image_id: id.to_string(),
        width: size,
        height: size,
        proposals,
        rgb_features: Matrix::zeros(1, 1),
        depth_features: Matrix::zeros(1, 1),
        proposal_depths: vec![0.5],
        caption: None,
        labels: Some(gts.iter().map(|g| g.class_id).collect()),
        gt_boxes: Some(gts),
        depth_map_file: None,
        depth_map: None,
    }
}

/// Random evaluation scenario: up to `max_images` images, `max_gts` GTs and
/// `max_dets` detections each, over `num_classes` classes. Detections mix
/// near-duplicates of GTs with random boxes; scores are distinct.
pub fn random_scenario<R: Rng>(
    rng: &mut R,
    num_classes: usize,
    max_images: usize,
    max_dets: usize,
    max_gts: usize,
) -> (Vec<ImageRecord>, Vec<Detection>) {
    let size = 100.0;
    let n_img = rng.random_range(1..=max_images);
    let mut records = Vec::new();
    let mut dets = Vec::new();
    let mut scores: BTreeMap<u64, ()> = BTreeMap::new();
    for n in 0..n_img {
        let id = format!("img{n}");
        let n_gt = rng.random_range(0..=max_gts);
        let gts: Vec<GtBox> = (0..n_gt)
            .map(|_| GtBox {
                bbox: random_box(rng, size),
                class_id: rng.random_range(0..num_classes),
            })
            .collect();
        let n_det = rng.random_range(0..=max_dets);
        for _ in 0..n_det {
            let (bbox, class_id) = if !gts.is_empty() && rng.random_bool(0.6) {
                let g = &gts[rng.random_range(0..gts.len())];
                let frac = *[0.02, 0.1, 0.25].get(rng.random_range(0..3)).unwrap();
                let class = if rng.random_bool(0.85) {
                    g.class_id
                } else {
                    rng.random_range(0..num_classes)
                };
                let b = nudge(rng, &g.bbox, frac);
                let clamp = |v: f64| v.clamp(0.0, size);
                (BBox::new(clamp(b.x1), clamp(b.y1), clamp(b.x2), clamp(b.y2)), class)
            } else {
                (random_box(rng, size), rng.random_range(0..num_classes))
            };
            // distinct confidences keep the ranking unambiguous
            let confidence = loop {
                let s: f64 = rng.random_range(0.0..1.0);
                if scores.insert(s.to_bits(), ()).is_none() {
                    break s;
                }
            };
            dets.push(Detection {
                image_id: id.clone(),
                class_id,
                bbox,
                confidence,
            });
        }
        records.push(record_with_gt(&id, gts, size as u32));
    }
    (records, dets)
}

pub fn ground_truth(records: &[ImageRecord]) -> Vec<GroundTruth> {
    records
        .iter()
        .flat_map(|r| {
            r.gt_boxes.iter().flatten().map(move |g| GroundTruth {
                image_id: r.image_id.clone(),
                class_id: g.class_id,
                bbox: g.bbox,
            })
        })
        .collect()
}
