//! Seeded synthetic proposal datasets.
//!
//! Each image holds one or more objects. Every object contributes a
//! "true object" proposal whose RGB and depth features carry a class
//! prototype and whose proposal depth lies in a class-specific band, shifted
//! to a sub-band picked by the caption's context word. Every object also
//! brings "context" confusers: proposals elsewhere in the image carrying a
//! class-correlated but non-object feature pattern, usually at a depth
//! outside the class band. The remaining proposals are noise distractors.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BBox, ClassEntry, ClassVocabulary, GtBox, ImageRecord};
use crate::error::{Error, Result};
use crate::evald::iou;
use crate::numkit::Matrix;

const DEFAULT_NAMES: &[&str] = &[
    "bird", "boat", "kite", "dog", "horse", "car", "chair", "cup", "zebra", "tv",
];

const WORD_POOL: &[&str] = &[
    "hand", "table", "street", "field", "sky", "ocean", "room", "park", "beach", "road",
    "garden", "river", "snow", "grass", "window", "shelf", "bench", "lake", "hill", "wall",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub num_images: usize,
    pub proposals_per_image: usize,
    pub feature_dim: usize,
    pub image_size: u32,
    /// Overrides the built-in names for the first classes.
    pub class_names: Vec<String>,
    /// Per-class `[lo, hi]`; generated evenly when empty.
    pub depth_bands: Vec<[f64; 2]>,
    /// Per-class context words; drawn from a built-in pool when empty.
    pub context_words: Vec<Vec<String>>,
    pub max_objects: usize,
    pub signal: f64,
    pub noise: f64,
    pub depth_noise: f64,
    pub confusers_per_object: usize,
    pub confuser_signal: f64,
    pub outside_band_prob: f64,
    /// Probability that a caption drops an object's name, and (independently)
    /// that it mentions an absent class.
    pub label_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 3,
            num_images: 100,
            proposals_per_image: 10,
            feature_dim: 16,
            image_size: 256,
            class_names: Vec::new(),
            depth_bands: Vec::new(),
            context_words: Vec::new(),
            max_objects: 2,
            signal: 3.0,
            noise: 1.0,
            depth_noise: 0.02,
            confusers_per_object: 1,
            confuser_signal: 3.0,
            outside_band_prob: 0.9,
            label_noise: 0.0,
        }
    }
}

impl SyntheticConfig {
    pub fn class_name(&self, c: usize) -> String {
        self.class_names
            .get(c)
            .cloned()
            .or_else(|| DEFAULT_NAMES.get(c).map(|s| s.to_string()))
            .unwrap_or_else(|| format!("class{c}"))
    }

    pub fn band(&self, c: usize) -> [f64; 2] {
        if let Some(b) = self.depth_bands.get(c) {
            return *b;
        }
        let span = if self.num_classes > 1 {
            0.7 * c as f64 / (self.num_classes - 1) as f64
        } else {
            0.35
        };
        [0.05 + span, 0.25 + span]
    }

    pub fn words(&self, c: usize) -> Vec<String> {
        if let Some(w) = self.context_words.get(c) {
            return w.clone();
        }
        (0..3)
            .map(|k| WORD_POOL[(3 * c + k) % WORD_POOL.len()].to_string())
            .collect()
    }

    /// Depth sub-band tied to context word `k` of class `c`.
    pub fn word_band(&self, c: usize, k: usize) -> [f64; 2] {
        let [lo, hi] = self.band(c);
        let n = self.words(c).len() as f64;
        let w = (hi - lo) / n;
        [lo + w * k as f64, lo + w * (k + 1) as f64]
    }

    pub fn vocabulary(&self) -> Result<ClassVocabulary> {
        ClassVocabulary::new(
            (0..self.num_classes)
                .map(|c| {
                    let name = self.class_name(c);
                    ClassEntry {
                        id: c,
                        synonyms: vec![format!("{name}s")],
                        name,
                    }
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic: {m}")));
        if self.num_classes == 0 || self.num_images == 0 || self.feature_dim == 0 {
            return bad("num_classes, num_images and feature_dim must be positive".into());
        }
        if self.proposals_per_image < 2 {
            return bad(format!(
                "proposals_per_image must be >= 2, got {}",
                self.proposals_per_image
            ));
        }
        if self.image_size < 16 {
            return bad("image_size must be >= 16".into());
        }
        if self.max_objects == 0 {
            return bad("max_objects must be >= 1".into());
        }
        for c in 0..self.num_classes {
            let [lo, hi] = self.band(c);
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || hi <= lo {
                return bad(format!("empty or invalid depth band [{lo}, {hi}] for class {c}"));
            }
            let words = self.words(c);
            if words.is_empty() || words.iter().any(|w| super::tokenize(w) != [w.clone()]) {
                return bad(format!("class {c} needs single-token context words"));
            }
        }
        for (name, p) in [
            ("outside_band_prob", self.outside_band_prob),
            ("label_noise", self.label_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0,1]"));
            }
        }
        for (name, v) in [
            ("signal", self.signal),
            ("noise", self.noise),
            ("depth_noise", self.depth_noise),
            ("confuser_signal", self.confuser_signal),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Ground truth about how each image was built, for diagnostics and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTruth {
    /// `(proposal index, class, context word index)` per object.
    pub objects: Vec<(usize, usize, usize)>,
    pub confusers: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub vocab: ClassVocabulary,
    pub records: Vec<ImageRecord>,
    pub truth: Vec<ImageTruth>,
}

impl SyntheticDataset {
    /// Fraction of true-object proposals whose depth lies in their class band.
    pub fn inside_band_fraction(&self, config: &SyntheticConfig) -> f64 {
        let (mut inside, mut total) = (0usize, 0usize);
        for (rec, t) in self.records.iter().zip(&self.truth) {
            for &(i, c, _) in &t.objects {
                let [lo, hi] = config.band(c);
                total += 1;
                if (lo..=hi).contains(&rec.proposal_depths[i]) {
                    inside += 1;
                }
            }
        }
        inside as f64 / total.max(1) as f64
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn feature(rng: &mut ChaCha8Rng, proto: Option<(&[f64], f64)>, noise: f64, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d)
        .map(|_| noise * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    if let Some((p, s)) = proto {
        for (x, &u) in v.iter_mut().zip(p) {
            *x += s * u;
        }
    }
    v
}

fn random_box(rng: &mut ChaCha8Rng, size: f64, avoid: &[BBox]) -> BBox {
    let mut best = None;
    for _ in 0..50 {
        let w = rng.random_range(0.15..0.4) * size;
        let h = rng.random_range(0.15..0.4) * size;
        let x = rng.random_range(0.0..size - w);
        let y = rng.random_range(0.0..size - h);
        let b = BBox::new(x, y, x + w, y + h);
        let overlap = avoid.iter().map(|a| iou(a, &b)).fold(0.0, f64::max);
        if overlap < 0.3 {
            return b;
        }
        if best.is_none_or(|(o, _)| overlap < o) {
            best = Some((overlap, b));
        }
    }
    best.expect("at least one attempt").1
}

/// Box near `gt`: each edge moved by at most 5% of the box extent.
fn jitter_box(rng: &mut ChaCha8Rng, gt: &BBox, size: f64) -> BBox {
    let (w, h) = (gt.width(), gt.height());
    let mut j = |v: f64, e: f64| (v + rng.random_range(-0.05..0.05) * e).clamp(0.0, size);
    let b = BBox::new(j(gt.x1, w), j(gt.y1, h), j(gt.x2, w), j(gt.y2, h));
    if b.check().is_ok() {
        b
    } else {
        *gt
    }
}

fn sample_outside(rng: &mut ChaCha8Rng, bands: &[[f64; 2]]) -> f64 {
    for _ in 0..100 {
        let d: f64 = rng.random_range(0.0..=1.0);
        if bands.iter().all(|[lo, hi]| d < *lo || d > *hi) {
            return d;
        }
    }
    rng.random_range(0.0..=1.0)
}

/// Deterministic synthetic dataset for a seed.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<SyntheticDataset> {
    config.validate()?;
    let vocab = config.vocabulary()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c_n, d) = (config.num_classes, config.feature_dim);
    let size = config.image_size as f64;

    let rgb_proto: Vec<Vec<f64>> = (0..c_n).map(|_| unit_vector(&mut rng, d)).collect();
    let depth_proto: Vec<Vec<f64>> = (0..c_n).map(|_| unit_vector(&mut rng, d)).collect();
    let ctx_proto: Vec<Vec<f64>> = (0..c_n).map(|_| unit_vector(&mut rng, d)).collect();
    let depth_jitter = Normal::new(0.0, config.depth_noise.max(0.0)).expect("finite sd");

    let mut records = Vec::with_capacity(config.num_images);
    let mut truth = Vec::with_capacity(config.num_images);
    let r_n = config.proposals_per_image;

    for n in 0..config.num_images {
        let k = rng
            .random_range(1..=config.max_objects.min(c_n))
            .min(r_n);
        let all: Vec<usize> = (0..c_n).collect();
        let classes: Vec<usize> = all.choose_multiple(&mut rng, k).copied().collect();

        // (box, rgb, depth features, proposal depth, role)
        enum Role {
            Object(usize, usize),
            Confuser,
            Distractor,
        }
        let mut props: Vec<(BBox, Vec<f64>, Vec<f64>, f64, Role)> = Vec::with_capacity(r_n);
        let mut gts = Vec::with_capacity(k);
        let mut words_used = Vec::with_capacity(k);

        for &c in &classes {
            let words = config.words(c);
            let wk = rng.random_range(0..words.len());
            let [lo, hi] = config.word_band(c, wk);
            let depth: f64 = rng.random_range(lo..=hi);
            let avoid: Vec<BBox> = gts.iter().map(|g: &GtBox| g.bbox).collect();
            let gt = random_box(&mut rng, size, &avoid);
            let prop = jitter_box(&mut rng, &gt, size);
            let pd = if config.depth_noise > 0.0 {
                (depth + depth_jitter.sample(&mut rng)).clamp(0.0, 1.0)
            } else {
                depth
            };
            let rgb = feature(&mut rng, Some((&rgb_proto[c], config.signal)), config.noise, d);
            let dep = feature(&mut rng, Some((&depth_proto[c], config.signal)), config.noise, d);
            props.push((prop, rgb, dep, pd, Role::Object(c, wk)));
            gts.push(GtBox {
                bbox: gt,
                class_id: c,
            });
            words_used.push((c, words[wk].clone()));
        }

        let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
        'confusers: for &c in &classes {
            for _ in 0..config.confusers_per_object {
                if props.len() >= r_n {
                    break 'confusers;
                }
                let b = random_box(&mut rng, size, &gt_boxes);
                let band = config.band(c);
                let pd = if rng.random_bool(config.outside_band_prob) {
                    sample_outside(&mut rng, &[band])
                } else {
                    rng.random_range(band[0]..=band[1])
                };
                let s = config.confuser_signal;
                let rgb = feature(&mut rng, Some((&ctx_proto[c], s)), config.noise, d);
                let dep = feature(&mut rng, Some((&ctx_proto[c], 0.5 * s)), config.noise, d);
                props.push((b, rgb, dep, pd, Role::Confuser));
            }
        }

        let bands: Vec<[f64; 2]> = classes.iter().map(|&c| config.band(c)).collect();
        while props.len() < r_n {
            let b = random_box(&mut rng, size, &gt_boxes);
            let pd = if rng.random_bool(config.outside_band_prob) {
                sample_outside(&mut rng, &bands)
            } else {
                rng.random_range(0.0..=1.0)
            };
            let rgb = feature(&mut rng, None, config.noise, d);
            let dep = feature(&mut rng, None, config.noise, d);
            props.push((b, rgb, dep, pd, Role::Distractor));
        }
        props.shuffle(&mut rng);

        let mut t = ImageTruth {
            objects: Vec::new(),
            confusers: Vec::new(),
        };
        for (i, p) in props.iter().enumerate() {
            match p.4 {
                Role::Object(c, wk) => t.objects.push((i, c, wk)),
                Role::Confuser => t.confusers.push(i),
                Role::Distractor => {}
            }
        }
        t.objects.sort_by_key(|&(_, c, _)| c);

        // caption with exact-match style corruption
        let mut tokens: Vec<String> = vec!["a".into(), "photo".into(), "of".into()];
        for (j, (c, word)) in words_used.iter().enumerate() {
            if j > 0 {
                tokens.push("and".into());
            }
            tokens.push("the".into());
            if rng.random_bool(config.label_noise) {
                tokens.push("thing".into());
            } else {
                tokens.push(config.class_name(*c));
            }
            tokens.extend(["is".to_string(), "near".into(), "the".into(), word.clone()]);
        }
        if rng.random_bool(config.label_noise) {
            let absent: Vec<usize> = (0..c_n).filter(|c| !classes.contains(c)).collect();
            if let Some(&c) = absent.choose(&mut rng) {
                tokens.extend(["with".to_string(), "a".into(), config.class_name(c)]);
            }
        }

        let (boxes, rgb, dep, pds): (Vec<BBox>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) =
            props.into_iter().fold(
                (Vec::new(), Vec::new(), Vec::new(), Vec::new()),
                |mut acc, p| {
                    acc.0.push(p.0);
                    acc.1.push(p.1);
                    acc.2.push(p.2);
                    acc.3.push(p.3);
                    acc
                },
            );
        records.push(ImageRecord {
            image_id: format!("syn{n:05}"),
            width: config.image_size,
            height: config.image_size,
            proposals: boxes,
            rgb_features: Matrix::from_rows(&rgb)?,
            depth_features: Matrix::from_rows(&dep)?,
            proposal_depths: pds,
            caption: Some(tokens.join(" ")),
            labels: Some(classes.iter().copied().collect::<BTreeSet<_>>()),
            gt_boxes: Some(gts),
            depth_map_file: None,
            depth_map: None,
        });
        truth.push(t);
    }

    Ok(SyntheticDataset {
        vocab,
        records,
        truth,
    })
}
