//! Depth priors estimated from box predictions.
//!
//! Every accepted prediction contributes the mean depth of its box once to
//! its class and once to each distinct (class, caption word) pair. Frozen
//! ranges are `[mean − std, mean + std]` (population std). For a new image,
//! the per-class range is the elementwise average of the word ranges for
//! the caption's words, falling back to the class-only range, and finally
//! to no filtering at all.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{distinct_tokens, proposal_depth, BBox, ImageRecord};
use crate::error::{Error, Result};
use crate::evald::{iou, Detection};
use crate::numkit::Scalar;

/// Count, sum and sum of squares of a value stream.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunningMoments<T = f64> {
    pub count: u64,
    pub sum: T,
    pub sum_sq: T,
}

impl<T: Scalar> RunningMoments<T> {
    pub fn new() -> Self {
        RunningMoments {
            count: 0,
            sum: T::zero(),
            sum_sq: T::zero(),
        }
    }

    pub fn push(&mut self, x: T) {
        self.count += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, other: &Self) {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> Option<T> {
        (self.count > 0).then(|| self.sum / T::lit(self.count as f64))
    }

    /// Population standard deviation; tiny negative variances clamp to 0.
    pub fn std(&self) -> Option<T> {
        let mean = self.mean()?;
        let var = self.sum_sq / T::lit(self.count as f64) - mean * mean;
        Some(var.max(T::zero()).sqrt())
    }

    /// Rebuilds moments from a stored `(count, mean, std)` summary.
    pub fn from_summary(count: u64, mean: T, std: T) -> Self {
        let n = T::lit(count as f64);
        RunningMoments {
            count,
            sum: mean * n,
            sum_sq: n * (std * std + mean * mean),
        }
    }
}

/// Closed depth interval; not clamped to [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub lo: f64,
    pub hi: f64,
}

impl DepthRange {
    pub fn contains(&self, d: f64) -> bool {
        self.lo <= d && d <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// `[μ − s, μ + s]`, or `None` below `min_count` samples.
pub fn freeze_range(m: &RunningMoments<f64>, min_count: u64) -> Option<DepthRange> {
    if m.count == 0 || m.count < min_count {
        return None;
    }
    let (mu, s) = (m.mean()?, m.std()?);
    Some(DepthRange {
        lo: mu - s,
        hi: mu + s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccumulateOutcome {
    Accepted,
    BelowThreshold,
    /// Box lies (partly) outside the image or covers no depth.
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorStats {
    pub by_class_word: BTreeMap<(usize, String), RunningMoments<f64>>,
    pub by_class: BTreeMap<usize, RunningMoments<f64>>,
    /// Minimum samples for a (class, word) range.
    pub min_count: u64,
    /// Minimum samples for a class-only range.
    pub min_count_class: u64,
}

impl Default for PriorStats {
    fn default() -> Self {
        PriorStats::new(2, 1)
    }
}

/// Mean depth of `bbox` in `record`: from the depth map when present,
/// otherwise from the proposal that matches the box (exactly, else by
/// highest IoU).
pub fn box_depth(record: &ImageRecord, bbox: &BBox) -> Option<f64> {
    if let Some(map) = &record.depth_map {
        return proposal_depth(map, bbox).ok();
    }
    if let Some(i) = record.proposals.iter().position(|p| p == bbox) {
        return Some(record.proposal_depths[i]);
    }
    record
        .proposals
        .iter()
        .enumerate()
        .map(|(i, p)| (iou(p, bbox), i))
        .filter(|(o, _)| *o > 0.0)
        .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(_, i)| record.proposal_depths[i])
}

impl PriorStats {
    pub fn new(min_count: u64, min_count_class: u64) -> Self {
        PriorStats {
            by_class_word: BTreeMap::new(),
            by_class: BTreeMap::new(),
            min_count,
            min_count_class,
        }
    }

    /// Adds one box prediction if its score clears `score_threshold`.
    pub fn accumulate(
        &mut self,
        bbox: &BBox,
        class_id: usize,
        score: f64,
        record: &ImageRecord,
        score_threshold: f64,
    ) -> AccumulateOutcome {
        if !(score > score_threshold) {
            return AccumulateOutcome::BelowThreshold;
        }
        if bbox.check().is_err() || !bbox.within(record.width as f64, record.height as f64) {
            return AccumulateOutcome::Skipped;
        }
        let Some(d) = box_depth(record, bbox) else {
            return AccumulateOutcome::Skipped;
        };
        self.add_depth(class_id, d, record.caption.as_deref());
        AccumulateOutcome::Accepted
    }

    /// Records depth `d` for a class, once per distinct caption token.
    pub fn add_depth(&mut self, class_id: usize, d: f64, caption: Option<&str>) {
        self.by_class.entry(class_id).or_default().push(d);
        for w in caption.map(distinct_tokens).unwrap_or_default() {
            self.by_class_word.entry((class_id, w)).or_default().push(d);
        }
    }

    /// Combines partial statistics (accumulation is a commutative monoid).
    pub fn merge(&mut self, other: &PriorStats) {
        for (k, m) in &other.by_class_word {
            self.by_class_word.entry(k.clone()).or_default().merge(m);
        }
        for (k, m) in &other.by_class {
            self.by_class.entry(*k).or_default().merge(m);
        }
    }

    pub fn class_range(&self, class_id: usize) -> Option<DepthRange> {
        freeze_range(self.by_class.get(&class_id)?, self.min_count_class)
    }

    pub fn word_range(&self, class_id: usize, word: &str) -> Option<DepthRange> {
        freeze_range(
            self.by_class_word.get(&(class_id, word.to_string()))?,
            self.min_count,
        )
    }

    /// Per-image allowable range for a class.
    pub fn image_range(&self, class_id: usize, caption: Option<&str>) -> Option<DepthRange> {
        let ranges: Vec<DepthRange> = caption
            .map(distinct_tokens)
            .unwrap_or_default()
            .iter()
            .filter_map(|w| self.word_range(class_id, w))
            .collect();
        if ranges.is_empty() {
            return self.class_range(class_id);
        }
        let n = ranges.len() as f64;
        Some(DepthRange {
            lo: ranges.iter().map(|r| r.lo).sum::<f64>() / n,
            hi: ranges.iter().map(|r| r.hi).sum::<f64>() / n,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let summary = |m: &RunningMoments<f64>| MomentSummary {
            count: m.count,
            mean: m.mean().unwrap_or(0.0),
            std: m.std().unwrap_or(0.0),
        };
        let file = PriorsFile {
            min_count: self.min_count,
            min_count_class: self.min_count_class,
            by_class: self
                .by_class
                .iter()
                .map(|(c, m)| (c.to_string(), summary(m)))
                .collect(),
            by_class_word: self
                .by_class_word
                .iter()
                .map(|((c, w), m)| (format!("{c}|{w}"), summary(m)))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PriorsFile = serde_json::from_str(text)?;
        let bad = |k: &str| Error::Config(format!("priors: malformed key `{k}`"));
        let mut stats = PriorStats::new(file.min_count, file.min_count_class);
        for (k, s) in file.by_class {
            let c: usize = k.parse().map_err(|_| bad(&k))?;
            stats.by_class.insert(c, RunningMoments::from_summary(s.count, s.mean, s.std));
        }
        for (k, s) in file.by_class_word {
            let (c, w) = k.split_once('|').ok_or_else(|| bad(&k))?;
            let c: usize = c.parse().map_err(|_| bad(&k))?;
            stats
                .by_class_word
                .insert((c, w.to_string()), RunningMoments::from_summary(s.count, s.mean, s.std));
        }
        Ok(stats)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct MomentSummary {
    count: u64,
    mean: f64,
    std: f64,
}

fn default_min_count_class() -> u64 {
    1
}

#[derive(Serialize, Deserialize)]
struct PriorsFile {
    min_count: u64,
    #[serde(default = "default_min_count_class")]
    min_count_class: u64,
    by_class: BTreeMap<String, MomentSummary>,
    by_class_word: BTreeMap<String, MomentSummary>,
}

/// R×C indicator of proposals whose depth lies in the image's class range.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMask {
    rows: usize,
    cols: usize,
    m: Vec<bool>,
    defined: Vec<bool>,
}

impl DepthMask {
    /// No filtering anywhere.
    pub fn all_ones(rows: usize, cols: usize) -> Self {
        DepthMask {
            rows,
            cols,
            m: vec![true; rows * cols],
            defined: vec![false; cols],
        }
    }

    /// Mask from explicit per-class ranges (`None` = undefined class).
    pub fn from_ranges(depths: &[f64], ranges: &[Option<DepthRange>]) -> Self {
        let (rows, cols) = (depths.len(), ranges.len());
        let mut m = vec![true; rows * cols];
        for (c, r) in ranges.iter().enumerate() {
            if let Some(r) = r {
                for (i, &d) in depths.iter().enumerate() {
                    m[i * cols + c] = r.contains(d);
                }
            }
        }
        DepthMask {
            rows,
            cols,
            m,
            defined: ranges.iter().map(Option::is_some).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, c: usize) -> bool {
        self.m[i * self.cols + c]
    }

    pub fn is_defined(&self, c: usize) -> bool {
        self.defined[c]
    }

    pub fn defined_classes(&self) -> Vec<usize> {
        (0..self.cols).filter(|&c| self.defined[c]).collect()
    }
}

/// Depth mask for one record under frozen priors.
pub fn depth_mask(record: &ImageRecord, stats: &PriorStats, num_classes: usize) -> DepthMask {
    let ranges: Vec<Option<DepthRange>> = (0..num_classes)
        .map(|c| stats.image_range(c, record.caption.as_deref()))
        .collect();
    DepthMask::from_ranges(&record.proposal_depths, &ranges)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub score_threshold: f64,
    pub min_count: u64,
    pub min_count_class: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            score_threshold: 0.5,
            min_count: 2,
            min_count_class: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCoverage {
    pub class_id: usize,
    pub count: u64,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Fraction of accepted depths inside the frozen class range.
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub accepted: usize,
    pub below_threshold: usize,
    pub skipped: usize,
    pub classes: Vec<ClassCoverage>,
}

/// Full accumulate/freeze pass over a prediction set.
pub fn estimate_priors(
    records: &[ImageRecord],
    predictions: &[Detection],
    num_classes: usize,
    config: &PriorConfig,
) -> Result<(PriorStats, CoverageReport)> {
    let index: HashMap<&str, &ImageRecord> =
        records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut stats = PriorStats::new(config.min_count, config.min_count_class);
    let mut depths: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    let (mut accepted, mut below, mut skipped) = (0, 0, 0);
    for p in predictions {
        let rec = index
            .get(p.image_id.as_str())
            .ok_or_else(|| Error::UnknownImage(p.image_id.clone()))?;
        if p.class_id >= num_classes {
            return Err(Error::validation(
                &p.image_id,
                "class_id",
                format!("prediction class {} out of range", p.class_id),
            ));
        }
        match stats.accumulate(&p.bbox, p.class_id, p.confidence, rec, config.score_threshold) {
            AccumulateOutcome::Accepted => {
                accepted += 1;
                depths[p.class_id].push(box_depth(rec, &p.bbox).expect("accepted box has depth"));
            }
            AccumulateOutcome::BelowThreshold => below += 1,
            AccumulateOutcome::Skipped => skipped += 1,
        }
    }
    let classes = (0..num_classes)
        .map(|c| {
            let m = stats.by_class.get(&c).copied().unwrap_or_default();
            let range = stats.class_range(c);
            ClassCoverage {
                class_id: c,
                count: m.count,
                mean: m.mean(),
                std: m.std(),
                coverage: range.map(|r| {
                    depths[c].iter().filter(|&&d| r.contains(d)).count() as f64
                        / depths[c].len() as f64
                }),
            }
        })
        .collect();
    Ok((
        stats,
        CoverageReport {
            accepted,
            below_threshold: below,
            skipped,
            classes,
        },
    ))
}
