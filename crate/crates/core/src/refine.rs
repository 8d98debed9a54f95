//! Depth-filtered pseudo-box mining, OICR-style refinement branches, and
//! depth attention on combined scores.
//!
//! Mining: for every labeled class, candidates are the proposals whose depth
//! mask bit is set (all proposals when none is). The top-scoring candidate is
//! the seed; candidates overlapping the seed by at least `iou_thresh` and
//! scoring at least `score_ratio` times the seed's score join its cluster.
//! Refinement: each branch classifies proposals into C classes plus
//! background, trained with a seed-score-weighted cross-entropy against
//! targets derived from seed overlap.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::BBox;
use crate::error::{Error, Result};
use crate::evald::iou;
use crate::numkit::{
    affine, affine_backward, log_sum_exp, softmax_rows, Matrix, ParamTensor, Parameters, Scalar,
};
use crate::priors::DepthMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub iou_thresh: f64,
    pub score_ratio: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            iou_thresh: 0.5,
            score_ratio: 0.5,
        }
    }
}

/// Mined pseudo boxes for one labeled class.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoClass<T> {
    pub class_id: usize,
    pub seed: usize,
    pub seed_score: T,
    /// Seed plus its cluster, ascending proposal indices.
    pub members: Vec<usize>,
    /// Whether the depth filter left no candidate and mining fell back to
    /// every proposal.
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoBoxSet<T> {
    pub classes: Vec<PseudoClass<T>>,
}

impl<T> PseudoBoxSet<T> {
    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn seeds(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.classes.iter().map(|p| (p.class_id, p.seed))
    }
}

/// Mines pseudo boxes for every class in `labels` from `scores` (R×C).
/// `mask = None` disables depth filtering.
pub fn mine<T: Scalar>(
    proposals: &[BBox],
    scores: &Matrix<T>,
    mask: Option<&DepthMask>,
    labels: &BTreeSet<usize>,
    config: &MiningConfig,
) -> Result<PseudoBoxSet<T>> {
    let r = proposals.len();
    if scores.rows() != r {
        return Err(Error::shape(
            "mine",
            format!("{} score rows for {r} proposals", scores.rows()),
        ));
    }
    if let Some(m) = mask {
        if m.rows() != r || m.cols() != scores.cols() {
            return Err(Error::shape("mine", "mask shape differs from scores"));
        }
    }
    let mut out = PseudoBoxSet::default();
    for &c in labels {
        if c >= scores.cols() {
            return Err(Error::shape("mine", format!("label {c} outside score columns")));
        }
        let mut candidates: Vec<usize> = (0..r).filter(|&i| mask.is_none_or(|m| m.get(i, c))).collect();
        let fell_back = candidates.is_empty();
        if fell_back {
            candidates = (0..r).collect();
        }
        // first maximum wins ties
        let seed = candidates
            .iter()
            .copied()
            .reduce(|best, i| if scores[(i, c)] > scores[(best, c)] { i } else { best })
            .expect("at least one proposal");
        let seed_score = scores[(seed, c)];
        let cutoff = T::lit(config.score_ratio) * seed_score;
        let members = candidates
            .iter()
            .copied()
            .filter(|&i| {
                i == seed
                    || (iou(&proposals[i], &proposals[seed]) >= config.iou_thresh
                        && scores[(i, c)] >= cutoff)
            })
            .collect();
        out.classes.push(PseudoClass {
            class_id: c,
            seed,
            seed_score,
            members,
            fell_back,
        });
    }
    Ok(out)
}

/// One refinement branch: an affine head over C classes plus background
/// (the last column).
#[derive(Debug, Clone, PartialEq)]
pub struct RefineBranch<T> {
    pub w: ParamTensor<T>,
    pub b: ParamTensor<T>,
}

impl<T: Scalar> RefineBranch<T> {
    pub fn zeros(index: usize, feature_dim: usize, num_classes: usize) -> Self {
        RefineBranch {
            w: ParamTensor::zeros(format!("refine.{index}.w"), feature_dim, num_classes + 1),
            b: ParamTensor::zeros(format!("refine.{index}.b"), 1, num_classes + 1),
        }
    }

    pub fn random<R: Rng + ?Sized>(
        index: usize,
        feature_dim: usize,
        num_classes: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut b = Self::zeros(index, feature_dim, num_classes);
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in b.w.value.as_mut_slice() {
            *v = T::lit(normal.sample(rng));
        }
        b
    }

    pub fn background(&self) -> usize {
        self.w.shape().1 - 1
    }

    /// Raw branch scores, R×(C+1).
    pub fn scores(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        affine(features, &self.w.value, &self.b.value)
    }

    /// Class probabilities (row softmax over C+1).
    pub fn probabilities(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(softmax_rows(&self.scores(features)?))
    }
}

impl<T> Parameters<T> for RefineBranch<T> {
    fn params(&self) -> Vec<&ParamTensor<T>> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Per-proposal training target for a refinement branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target<T> {
    /// Class id, or `num_classes` for background.
    pub class: usize,
    pub weight: T,
}

/// Targets from seed overlap: a proposal takes the class of the seed it
/// overlaps most if that IoU reaches `iou_thresh`, else background. Its
/// weight is the score of that most-overlapping seed (1 with no seeds).
pub fn refinement_targets<T: Scalar>(
    proposals: &[BBox],
    pseudo: &PseudoBoxSet<T>,
    num_classes: usize,
    iou_thresh: f64,
) -> Vec<Target<T>> {
    proposals
        .iter()
        .map(|b| {
            let nearest = pseudo
                .classes
                .iter()
                .map(|p| (iou(b, &proposals[p.seed]), p))
                .reduce(|best, cur| if cur.0 > best.0 { cur } else { best });
            match nearest {
                Some((o, p)) if o >= iou_thresh => Target {
                    class: p.class_id,
                    weight: p.seed_score,
                },
                Some((_, p)) => Target {
                    class: num_classes,
                    weight: p.seed_score,
                },
                None => Target {
                    class: num_classes,
                    weight: T::one(),
                },
            }
        })
        .collect()
}

/// `−(1/R) Σ_i w_i log q_i[target_i]`; accumulates `scale ×` its gradient
/// into `branch` and returns the unscaled loss. Targets and weights are
/// treated as constants.
pub fn refinement_loss<T: Scalar>(
    features: &Matrix<T>,
    targets: &[Target<T>],
    branch: &mut RefineBranch<T>,
    scale: T,
) -> Result<T> {
    let s = branch.scores(features)?;
    if targets.len() != s.rows() {
        return Err(Error::shape(
            "refinement_loss",
            format!("{} targets for {} proposals", targets.len(), s.rows()),
        ));
    }
    let rn = T::lit(s.rows() as f64);
    let mut loss = T::zero();
    let mut g = Matrix::zeros(s.rows(), s.cols());
    for (i, t) in targets.iter().enumerate() {
        let row = s.row(i);
        let lse = log_sum_exp(row);
        loss -= t.weight * (row[t.class] - lse) / rn;
        for (k, (o, &v)) in g.row_mut(i).iter_mut().zip(row).enumerate() {
            let q = (v - lse).exp();
            let y = if k == t.class { T::one() } else { T::zero() };
            *o = scale * t.weight * (q - y) / rn;
        }
    }
    let grads = affine_backward(features, &branch.w.value, &g)?;
    branch.w.accumulate(&grads.w)?;
    branch.b.accumulate(&grads.b)?;
    Ok(loss)
}

/// Per-cell multipliers: `multiplier` where a defined class's mask is 0.
pub fn attention_factors<T: Scalar>(mask: &DepthMask, multiplier: T) -> Matrix<T> {
    let mut f = Matrix::filled(mask.rows(), mask.cols(), T::one());
    for c in (0..mask.cols()).filter(|&c| mask.is_defined(c)) {
        for i in 0..mask.rows() {
            if !mask.get(i, c) {
                f[(i, c)] = multiplier;
            }
        }
    }
    f
}

/// Scales combined scores of masked-out proposals by `multiplier` (0.5).
pub fn depth_attention<T: Scalar>(
    p_comb: &Matrix<T>,
    mask: &DepthMask,
    multiplier: T,
) -> Result<Matrix<T>> {
    p_comb.hadamard(&attention_factors(mask, multiplier))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::grad_check;
    use crate::priors::DepthRange;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn boxes(n: usize) -> Vec<BBox> {
        (0..n)
            .map(|i| BBox::new(20.0 * i as f64, 0.0, 20.0 * i as f64 + 10.0, 10.0))
            .collect()
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let scores = Matrix::from_rows(&[[0.1, 0.7], [0.9, 0.2], [0.4, 0.4]]).unwrap();
        let labels = BTreeSet::from([0, 1]);
        let cfg = MiningConfig::default();
        let plain = mine(&boxes(3), &scores, None, &labels, &cfg).unwrap();
        let ones = mine(&boxes(3), &scores, Some(&DepthMask::all_ones(3, 2)), &labels, &cfg).unwrap();
        assert_eq!(plain, ones);
    }

    #[test]
    fn filter_dominates_score() {
        let scores = Matrix::from_rows(&[[0.9], [0.5], [0.99]]).unwrap();
        let mask = DepthMask::from_ranges(&[0.1, 0.3, 0.9], &[Some(DepthRange { lo: 0.2, hi: 0.4 })]);
        let p = mine(&boxes(3), &scores, Some(&mask), &BTreeSet::from([0]), &MiningConfig::default())
            .unwrap();
        assert_eq!(p.classes[0].seed, 1);
        assert_eq!(p.classes[0].members, vec![1]);
        assert!(!p.classes[0].fell_back);
    }

    #[test]
    fn empty_candidates_fall_back() {
        let scores = Matrix::from_rows(&[[0.9], [0.5], [0.99]]).unwrap();
        let mask = DepthMask::from_ranges(&[0.1, 0.3, 0.9], &[Some(DepthRange { lo: 0.5, hi: 0.6 })]);
        let p = mine(&boxes(3), &scores, Some(&mask), &BTreeSet::from([0]), &MiningConfig::default())
            .unwrap();
        assert_eq!(p.classes[0].seed, 2);
        assert!(p.classes[0].fell_back);
    }

    #[test]
    fn cluster_membership() {
        let props = vec![
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(0.0, 0.0, 10.0, 9.0),
            BBox::new(0.0, 0.0, 10.0, 8.0),
            BBox::new(50.0, 50.0, 60.0, 60.0),
        ];
        let scores = Matrix::from_rows(&[[0.8], [0.5], [0.3], [0.7]]).unwrap();
        let p = mine(&props, &scores, None, &BTreeSet::from([0]), &MiningConfig::default()).unwrap();
        // 0.3 < 0.5·0.8 excludes proposal 2; proposal 3 does not overlap
        assert_eq!(p.classes[0].members, vec![0, 1]);
    }

    #[test]
    fn confident_branch_has_zero_loss() {
        let mut br = RefineBranch::<f64>::zeros(0, 1, 2);
        br.b.value = Matrix::row_vector(&[1000.0, 0.0, 0.0]);
        let x = Matrix::zeros(3, 1);
        let t = vec![Target { class: 0, weight: 1.0 }; 3];
        assert_eq!(refinement_loss(&x, &t, &mut br, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn uniform_branch_is_ln3() {
        let mut br = RefineBranch::<f64>::zeros(0, 2, 2);
        let x = Matrix::from_rows(&[[0.3, -0.2]]).unwrap();
        let l = refinement_loss(&x, &[Target { class: 1, weight: 1.0 }], &mut br, 1.0).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn targets_follow_seed_overlap() {
        let props = vec![
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(0.0, 0.0, 10.0, 9.0),
            BBox::new(50.0, 50.0, 60.0, 60.0),
            BBox::new(55.0, 50.0, 65.0, 60.0),
        ];
        let pseudo = PseudoBoxSet {
            classes: vec![PseudoClass {
                class_id: 1,
                seed: 0,
                seed_score: 0.7,
                members: vec![0],
                fell_back: false,
            }],
        };
        let t = refinement_targets(&props, &pseudo, 2, 0.5);
        assert_eq!(t[0], Target { class: 1, weight: 0.7 });
        assert_eq!(t[1], Target { class: 1, weight: 0.7 });
        assert_eq!(t[2], Target { class: 2, weight: 0.7 });
        let none = refinement_targets(&props, &PseudoBoxSet::<f64>::default(), 2, 0.5);
        assert!(none.iter().all(|t| *t == Target { class: 2, weight: 1.0 }));
    }

    #[test]
    fn refinement_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (r, d, c) = (6, 5, 3);
        let x = Matrix::from_vec(r, d, (0..r * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let targets: Vec<Target<f64>> = (0..r)
            .map(|i| Target {
                class: i % (c + 1),
                weight: rng.random_range(0.1..1.0),
            })
            .collect();
        let mut br = RefineBranch::random(0, d, c, 0.5, &mut rng);
        let err = grad_check(&mut br, 1e-6, |b| refinement_loss(&x, &targets, b, 1.0)).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn attention_cases() {
        let p = Matrix::from_rows(&[[0.3, 0.3], [0.2, 0.2]]).unwrap();
        let r = Some(DepthRange { lo: 0.2, hi: 0.4 });
        let mask = DepthMask::from_ranges(&[0.9, 0.3], &[r, None]);
        let out = depth_attention(&p, &mask, 0.5).unwrap();
        assert_eq!(out[(0, 0)], 0.15);
        assert_eq!(out[(1, 0)], 0.2);
        assert_eq!(out.column(1), p.column(1));
        let twice = depth_attention(&out, &mask, 0.5).unwrap();
        assert_eq!(twice[(0, 0)], 0.075);
        assert_eq!(depth_attention(&p, &DepthMask::all_ones(2, 2), 0.5).unwrap(), p);
    }
}
