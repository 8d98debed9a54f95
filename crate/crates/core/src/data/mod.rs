//! Dataset model: boxes, vocabularies, per-image proposal records and depth
//! maps, plus JSONL ingestion, caption label extraction and a synthetic
//! generator that stands in for a backbone + depth network.

mod io;
mod labels;
pub mod synthetic;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub use io::{load_dataset, load_depth_map, load_vocabulary, parse_record, save_dataset, save_vocabulary};
pub use labels::{distinct_tokens, extract_labels, tokenize};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticDataset};

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Finite, non-negative, positive extent.
    pub fn check(&self) -> std::result::Result<(), &'static str> {
        let c = [self.x1, self.y1, self.x2, self.y2];
        if c.iter().any(|v| !v.is_finite()) {
            return Err("non-finite coordinate");
        }
        if c.iter().any(|&v| v < 0.0) {
            return Err("negative coordinate");
        }
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err("degenerate box");
        }
        Ok(())
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x2 <= width && self.y2 <= height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

/// Ordered class list with a token lookup over names and synonyms.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVocabulary {
    entries: Vec<ClassEntry>,
    lookup: HashMap<String, usize>,
}

impl ClassVocabulary {
    pub fn new(mut entries: Vec<ClassEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.id);
        let mut lookup = HashMap::new();
        for (pos, e) in entries.iter_mut().enumerate() {
            if e.id != pos {
                return Err(Error::Config(format!(
                    "vocabulary ids must be dense and unique in [0, C); found id {} at position {pos}",
                    e.id
                )));
            }
            e.name = e.name.to_lowercase();
            for s in &mut e.synonyms {
                *s = s.to_lowercase();
            }
            if tokenize(&e.name) != [e.name.clone()] {
                return Err(Error::Config(format!(
                    "class name `{}` must be a single nonempty alphanumeric token",
                    e.name
                )));
            }
            if lookup.insert(e.name.clone(), e.id).is_some() {
                return Err(Error::Config(format!("duplicate class name `{}`", e.name)));
            }
        }
        for e in &entries {
            for s in &e.synonyms {
                match lookup.get(s) {
                    Some(&other) if other != e.id => {
                        return Err(Error::Config(format!(
                            "synonym `{s}` of `{}` collides with class {other}",
                            e.name
                        )))
                    }
                    _ => {
                        lookup.insert(s.clone(), e.id);
                    }
                }
            }
        }
        Ok(ClassVocabulary { entries, lookup })
    }

    /// Vocabulary from bare names, ids assigned in order.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .enumerate()
                .map(|(id, n)| ClassEntry {
                    id,
                    name: n.as_ref().to_string(),
                    synonyms: Vec::new(),
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(|e| e.name.as_str())
    }

    /// Class matched by a single (already lowercased) token.
    pub fn class_of_token(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }
}

/// Ground-truth box annotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Single-channel depth image, row-major, values in [0,1] (0 = nearest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let map = DepthMap {
            width,
            height,
            values,
        };
        map.check().map_err(|m| Error::Config(format!("depth map: {m}")))?;
        Ok(map)
    }

    pub fn check(&self) -> std::result::Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err("empty grid".into());
        }
        if self.values.len() != self.width * self.height {
            return Err(format!(
                "{} values for a {}x{} grid",
                self.values.len(),
                self.width,
                self.height
            ));
        }
        if let Some(v) = self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(format!("value {v} outside [0,1]"));
        }
        Ok(())
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Mean depth over the pixels whose centers `(j+0.5, i+0.5)` lie inside
/// the closed box.
pub fn proposal_depth(map: &DepthMap, bbox: &BBox) -> Result<f64> {
    let span = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
        let first = (lo - 0.5).ceil().max(0.0);
        let last = (hi - 0.5).floor().min(n as f64 - 1.0);
        (first <= last).then_some((first as usize, last as usize))
    };
    let (Some((c0, c1)), Some((r0, r1))) = (
        span(bbox.x1, bbox.x2, map.width),
        span(bbox.y1, bbox.y2, map.height),
    ) else {
        return Err(Error::DegenerateRegion);
    };
    let mut sum = 0.0;
    for r in r0..=r1 {
        sum += map.values[r * map.width + c0..=r * map.width + c1]
            .iter()
            .sum::<f64>();
    }
    Ok(sum / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64)
}

/// One training/evaluation image: proposals with their RGB and depth
/// features, per-proposal mean depth, and optional caption/labels/GT.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub proposals: Vec<BBox>,
    pub rgb_features: Matrix<f64>,
    pub depth_features: Matrix<f64>,
    pub proposal_depths: Vec<f64>,
    pub caption: Option<String>,
    pub labels: Option<BTreeSet<usize>>,
    pub gt_boxes: Option<Vec<GtBox>>,
    /// Sidecar depth map path as written in the dataset file.
    pub depth_map_file: Option<String>,
    pub depth_map: Option<DepthMap>,
}

impl ImageRecord {
    pub fn num_proposals(&self) -> usize {
        self.proposals.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.rgb_features.cols()
    }

    pub fn labels_or_empty(&self) -> BTreeSet<usize> {
        self.labels.clone().unwrap_or_default()
    }

    /// Checks every record invariant against a vocabulary of `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let id = self.image_id.as_str();
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation(id, "width/height", "must be positive"));
        }
        let r = self.proposals.len();
        if r == 0 {
            return Err(Error::validation(id, "proposals", "at least one proposal required"));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for (i, b) in self.proposals.iter().enumerate() {
            b.check()
                .map_err(|m| Error::validation(id, "proposals", format!("{m} at index {i}")))?;
            if !b.within(w, h) {
                return Err(Error::validation(
                    id,
                    "proposals",
                    format!("box {i} extends outside the {w}x{h} image"),
                ));
            }
        }
        for (field, m) in [
            ("rgb_features", &self.rgb_features),
            ("depth_features", &self.depth_features),
        ] {
            if m.rows() != r {
                return Err(Error::validation(
                    id,
                    field,
                    format!("feature/proposal count mismatch ({} rows, {r} proposals)", m.rows()),
                ));
            }
            if m.cols() == 0 {
                return Err(Error::validation(id, field, "empty feature vectors"));
            }
            if !m.is_finite() {
                return Err(Error::validation(id, field, "non-finite value"));
            }
        }
        if self.rgb_features.cols() != self.depth_features.cols() {
            return Err(Error::validation(
                id,
                "depth_features",
                "feature dimension differs from rgb_features",
            ));
        }
        if self.proposal_depths.len() != r {
            return Err(Error::validation(
                id,
                "proposal_depths",
                format!("{} values for {r} proposals", self.proposal_depths.len()),
            ));
        }
        if let Some(v) = self.proposal_depths.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(id, "proposal_depths", format!("{v} outside [0,1]")));
        }
        if let Some(labels) = &self.labels {
            if let Some(c) = labels.iter().find(|&&c| c >= num_classes) {
                return Err(Error::validation(id, "labels", format!("class {c} out of range")));
            }
        }
        if let Some(gts) = &self.gt_boxes {
            for (k, g) in gts.iter().enumerate() {
                g.bbox
                    .check()
                    .map_err(|m| Error::validation(id, "gt_boxes", format!("{m} at index {k}")))?;
                if g.class_id >= num_classes {
                    return Err(Error::validation(
                        id,
                        "gt_boxes",
                        format!("class {} out of range", g.class_id),
                    ));
                }
            }
        }
        Ok(())
    }
}
