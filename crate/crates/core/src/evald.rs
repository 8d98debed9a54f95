//! Detection evaluation: IoU, class-wise NMS, greedy matching, all-points
//! interpolated AP over an IoU grid, area-bucketed AP, and CorLoc.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, ImageRecord};
use crate::error::{Error, Result};

/// IoU grid 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class_id: usize,
    #[serde(rename = "box", with = "box_array")]
    pub bbox: BBox,
    #[serde(rename = "score")]
    pub confidence: f64,
}

mod box_array {
    use super::BBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        b.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        <[f64; 4]>::deserialize(d).map(BBox::from_array)
    }
}

/// Writes detections as JSON Lines, one object per line.
pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut out = String::new();
    for d in dets {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let d: Detection = serde_json::from_str(l).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
            d.bbox
                .check()
                .map_err(|m| Error::validation(&d.image_id, "box", m))?;
            if !(d.confidence.is_finite()) {
                return Err(Error::validation(&d.image_id, "score", "not finite"));
            }
            Ok(d)
        })
        .collect()
}

/// One ground-truth box as seen by the evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Intersection over union, continuous coordinates; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Indices of `dets` in descending confidence, ties kept in input order.
fn by_confidence(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Greedy NMS, independently per (image, class). A detection is dropped when
/// its IoU with an already kept one exceeds `thresh`. Output is ordered by
/// descending confidence.
pub fn nms(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<usize> = Vec::new();
    let mut kept_by_group: HashMap<(&str, usize), Vec<usize>> = HashMap::new();
    for i in by_confidence(dets) {
        let d = &dets[i];
        let group = kept_by_group
            .entry((d.image_id.as_str(), d.class_id))
            .or_default();
        if group.iter().all(|&k| iou(&dets[k].bbox, &d.bbox) <= thresh) {
            group.push(i);
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    TruePositive,
    FalsePositive,
    /// Excluded from the PR curve (matched an out-of-bucket GT, or an
    /// unmatched detection outside the area bucket).
    Ignored,
}

/// Greedy matching for one class. Detections are visited by descending
/// confidence; each takes the unmatched GT of its image with the highest
/// IoU if that IoU reaches `iou_thresh`. With `area`, GTs outside
/// `[lo, hi)` are ignored rather than counted. Returns the outcome per
/// visited detection (in visit order) and the number of counted GTs.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
    area: Option<(f64, f64)>,
) -> (Vec<MatchOutcome>, usize) {
    let in_bucket = |b: &BBox| area.is_none_or(|(lo, hi)| b.area() >= lo && b.area() < hi);
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (g, gt) in gts.iter().enumerate() {
        by_image.entry(gt.image_id.as_str()).or_default().push(g);
    }
    let counted = gts.iter().filter(|g| in_bucket(&g.bbox)).count();
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for i in by_confidence(dets) {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        // counted GTs first, ignored ones only as a fallback
        for pass_counted in [true, false] {
            for &g in by_image.get(d.image_id.as_str()).map_or(&[][..], |v| v) {
                if taken[g] || in_bucket(&gts[g].bbox) != pass_counted {
                    continue;
                }
                let o = iou(&d.bbox, &gts[g].bbox);
                if o >= iou_thresh && best.is_none_or(|(b, _)| o > b) {
                    best = Some((o, g));
                }
            }
            if best.is_some() {
                break;
            }
        }
        out.push(match best {
            Some((_, g)) => {
                taken[g] = true;
                if in_bucket(&gts[g].bbox) {
                    MatchOutcome::TruePositive
                } else {
                    MatchOutcome::Ignored
                }
            }
            None if in_bucket(&d.bbox) => MatchOutcome::FalsePositive,
            None => MatchOutcome::Ignored,
        });
    }
    (out, counted)
}

/// Area under the PR curve from a ranked TP/FP sequence.
///
/// `voc07` selects the 11-point variant; otherwise the all-points precision
/// envelope is integrated.
pub fn ap_from_outcomes(outcomes: &[MatchOutcome], num_gt: usize, voc07: bool) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for o in outcomes {
        match o {
            MatchOutcome::TruePositive => tp += 1,
            MatchOutcome::FalsePositive => fp += 1,
            MatchOutcome::Ignored => continue,
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    if voc07 {
        return (0..=10)
            .map(|t| {
                let t = t as f64 / 10.0;
                recall
                    .iter()
                    .zip(&precision)
                    .filter(|(r, _)| **r >= t)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 11.0;
    }
    // Recall only moves at true positives, by 1/num_gt each time.
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_r {
            ap += p;
        }
        prev_r = *r;
    }
    ap / num_gt as f64
}

/// Single-class AP at one IoU threshold.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> f64 {
    let (outcomes, n) = match_detections(dets, gts, iou_thresh, None);
    ap_from_outcomes(&outcomes, n, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorLoc {
    /// `None` for classes absent from every image.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Fraction of class-containing images whose top-scoring detection of that
/// class overlaps one of its GT boxes with IoU ≥ `iou_thresh`, averaged
/// over classes present in at least one image.
pub fn corloc(
    dets: &[Detection],
    gts: &[GroundTruth],
    num_classes: usize,
    iou_thresh: f64,
) -> CorLoc {
    let mut top: HashMap<(&str, usize), &Detection> = HashMap::new();
    for i in by_confidence(dets) {
        let d = &dets[i];
        top.entry((d.image_id.as_str(), d.class_id)).or_insert(d);
    }
    let mut present: BTreeMap<(usize, &str), Vec<&BBox>> = BTreeMap::new();
    for g in gts {
        present
            .entry((g.class_id, g.image_id.as_str()))
            .or_default()
            .push(&g.bbox);
    }
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for ((c, img), boxes) in &present {
        if *c >= num_classes {
            continue;
        }
        totals[*c] += 1;
        if let Some(d) = top.get(&(*img, *c)) {
            if boxes.iter().any(|b| iou(&d.bbox, b) >= iou_thresh) {
                hits[*c] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    CorLoc { per_class, mean }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Per-class per-image NMS before AP; `None` disables it.
    pub nms_thresh: Option<f64>,
    pub voc07: bool,
    /// Small/medium and medium/large boundaries, in square pixels.
    pub area_buckets: [f64; 2],
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            nms_thresh: Some(0.5),
            voc07: false,
            area_buckets: [32.0 * 32.0, 96.0 * 96.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub num_gt: usize,
    /// One entry per IoU threshold; `None` when the class has no GT.
    pub ap: Vec<Option<f64>>,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub corloc: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(rename = "0.5:0.95")]
    pub avg: f64,
    #[serde(rename = "0.5")]
    pub at50: f64,
    #[serde(rename = "0.75")]
    pub at75: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaSummary {
    pub small: Option<f64>,
    pub medium: Option<f64>,
    pub large: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub map: Summary,
    pub map_per_threshold: Vec<f64>,
    pub map_area: AreaSummary,
    pub corloc: Summary,
    pub corloc_per_threshold: Vec<f64>,
    pub per_class: Vec<ClassReport>,
}

/// Ground truth of every record that carries annotations.
pub fn collect_ground_truth(records: &[ImageRecord]) -> Vec<GroundTruth> {
    records
        .iter()
        .flat_map(|r| {
            r.gt_boxes.iter().flatten().map(|g| GroundTruth {
                image_id: r.image_id.clone(),
                class_id: g.class_id,
                bbox: g.bbox,
            })
        })
        .collect()
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Full evaluation of a detection set against annotated records.
pub fn evaluate(
    dets: &[Detection],
    records: &[ImageRecord],
    num_classes: usize,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let annotated: HashMap<&str, bool> = records
        .iter()
        .map(|r| (r.image_id.as_str(), r.gt_boxes.is_some()))
        .collect();
    for d in dets {
        match annotated.get(d.image_id.as_str()) {
            None => return Err(Error::UnknownImage(d.image_id.clone())),
            Some(false) => {
                return Err(Error::validation(
                    &d.image_id,
                    "gt_boxes",
                    "detections reference an image without ground truth",
                ))
            }
            Some(true) => {}
        }
        if d.class_id >= num_classes {
            return Err(Error::validation(
                &d.image_id,
                "class_id",
                format!("detection class {} out of range", d.class_id),
            ));
        }
        if let Err(m) = d.bbox.check() {
            return Err(Error::validation(&d.image_id, "box", m));
        }
        if !d.confidence.is_finite() {
            return Err(Error::validation(&d.image_id, "score", "non-finite confidence"));
        }
    }
    let gts = collect_ground_truth(records);
    let thresholds = iou_thresholds();
    let nmsed = match config.nms_thresh {
        Some(t) => nms(dets, t),
        None => dets.to_vec(),
    };

    let split = |all: &[Detection], c: usize| -> Vec<Detection> {
        all.iter().filter(|d| d.class_id == c).cloned().collect()
    };
    let [b_sm, b_ml] = config.area_buckets;
    let buckets = [(0.0, b_sm), (b_sm, b_ml), (b_ml, f64::INFINITY)];
    let mut per_class = Vec::with_capacity(num_classes);
    let mut area_aps: [Vec<f64>; 3] = Default::default();
    for c in 0..num_classes {
        let cd = split(&nmsed, c);
        let cg: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == c).cloned().collect();
        let mut rep = ClassReport {
            class_id: c,
            num_gt: cg.len(),
            ap: Vec::new(),
            tp: Vec::new(),
            fp: Vec::new(),
            corloc: Vec::new(),
        };
        for &t in &thresholds {
            let (outcomes, n) = match_detections(&cd, &cg, t, None);
            rep.tp.push(outcomes.iter().filter(|o| **o == MatchOutcome::TruePositive).count());
            rep.fp.push(outcomes.iter().filter(|o| **o == MatchOutcome::FalsePositive).count());
            rep.ap.push((n > 0).then(|| ap_from_outcomes(&outcomes, n, config.voc07)));
        }
        for (slot, &(lo, hi)) in area_aps.iter_mut().zip(&buckets) {
            let mut aps = Vec::new();
            for &t in &thresholds {
                let (outcomes, n) = match_detections(&cd, &cg, t, Some((lo, hi)));
                if n > 0 {
                    aps.push(ap_from_outcomes(&outcomes, n, config.voc07));
                }
            }
            if let Some(m) = mean_of(aps.into_iter()) {
                slot.push(m);
            }
        }
        per_class.push(rep);
    }

    // CorLoc uses the raw detections: it needs the single top proposal.
    let mut corloc_per_threshold = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        let cl = corloc(dets, &gts, num_classes, t);
        for (rep, v) in per_class.iter_mut().zip(&cl.per_class) {
            rep.corloc.push(*v);
        }
        corloc_per_threshold.push(cl.mean);
    }

    let map_per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|k| mean_of(per_class.iter().filter_map(|r| r.ap[k])).unwrap_or(0.0))
        .collect();
    let summarize = |v: &[f64]| Summary {
        avg: v.iter().sum::<f64>() / v.len() as f64,
        at50: v[0],
        at75: v[5],
    };
    let [s, m, l] = area_aps.map(|v| mean_of(v.into_iter()));
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        map: summarize(&map_per_threshold),
        map_area: AreaSummary {
            small: s,
            medium: m,
            large: l,
        },
        corloc: summarize(&corloc_per_threshold),
        map_per_threshold,
        corloc_per_threshold,
        per_class,
    })
}

/// Fixed-width table: one row per method, mAP at 0.5:0.95 / 0.5 / 0.75,
/// then area buckets S / M / L, all in percent.
pub fn format_table(rows: &[(String, &EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8);
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x));
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$} | {:>8} {:>6} {:>6} | {:>6} {:>6} {:>6} | {:>8}",
        "Method", "0.5:0.95", "0.5", "0.75", "S", "M", "L", "CorLoc"
    );
    let _ = writeln!(out, "{}", "-".repeat(width + 58));
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$} | {:>8} {:>6} {:>6} | {:>6} {:>6} {:>6} | {:>8}",
            name,
            pct(Some(r.map.avg)),
            pct(Some(r.map.at50)),
            pct(Some(r.map.at75)),
            pct(r.map_area.small),
            pct(r.map_area.medium),
            pct(r.map_area.large),
            pct(Some(r.corloc.at50)),
        );
    }
    out
}
