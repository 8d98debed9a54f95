//! WSDDN-style multiple-instance detection head.
//!
//! Two affine maps produce detection and classification scores per
//! proposal; detection scores are normalized over proposals, classification
//! scores over classes, their product is summed per class and squashed into
//! an image-level prediction trained with binary cross-entropy.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numkit::{
    affine, affine_backward, log_prob, sigmoid, softmax_cols, softmax_cols_backward, softmax_rows,
    softmax_rows_backward, Matrix, ParamTensor, Parameters, Scalar,
};

/// Per-class detection and classification layers for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub w_det: ParamTensor<T>,
    pub b_det: ParamTensor<T>,
    pub w_cls: ParamTensor<T>,
    pub b_cls: ParamTensor<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn zeros(prefix: &str, feature_dim: usize, num_classes: usize) -> Self {
        HeadParams {
            w_det: ParamTensor::zeros(format!("{prefix}.w_det"), feature_dim, num_classes),
            b_det: ParamTensor::zeros(format!("{prefix}.b_det"), 1, num_classes),
            w_cls: ParamTensor::zeros(format!("{prefix}.w_cls"), feature_dim, num_classes),
            b_cls: ParamTensor::zeros(format!("{prefix}.b_cls"), 1, num_classes),
        }
    }

    /// Gaussian weights with standard deviation `std`, zero biases.
    pub fn random<R: Rng + ?Sized>(
        prefix: &str,
        feature_dim: usize,
        num_classes: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut h = Self::zeros(prefix, feature_dim, num_classes);
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in [&mut h.w_det.value, &mut h.w_cls.value] {
            for v in w.as_mut_slice() {
                *v = T::lit(normal.sample(rng));
            }
        }
        h
    }

    pub fn feature_dim(&self) -> usize {
        self.w_det.shape().0
    }

    pub fn num_classes(&self) -> usize {
        self.w_det.shape().1
    }

    pub fn set_zero(&mut self) {
        for p in self.params_mut() {
            p.value.fill(T::zero());
        }
    }
}

impl<T> Parameters<T> for HeadParams<T> {
    fn params(&self) -> Vec<&ParamTensor<T>> {
        vec![&self.w_det, &self.b_det, &self.w_cls, &self.b_cls]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![&mut self.w_det, &mut self.b_det, &mut self.w_cls, &mut self.b_cls]
    }
}

/// Detection and classification scores (R×C each).
pub fn score<T: Scalar>(
    features: &Matrix<T>,
    params: &HeadParams<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let det = affine(features, &params.w_det.value, &params.b_det.value)?;
    let cls = affine(features, &params.w_cls.value, &params.b_cls.value)?;
    Ok((det, cls))
}

/// Accumulates the gradients of [`score`] into `params`.
pub fn score_backward<T: Scalar>(
    features: &Matrix<T>,
    params: &mut HeadParams<T>,
    g_det: &Matrix<T>,
    g_cls: &Matrix<T>,
) -> Result<()> {
    let gd = affine_backward(features, &params.w_det.value, g_det)?;
    let gc = affine_backward(features, &params.w_cls.value, g_cls)?;
    params.w_det.accumulate(&gd.w)?;
    params.b_det.accumulate(&gd.b)?;
    params.w_cls.accumulate(&gc.w)?;
    params.b_cls.accumulate(&gc.b)?;
    Ok(())
}

/// Everything the forward pass of the head produces for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePack<T> {
    pub det_scores: Matrix<T>,
    pub cls_scores: Matrix<T>,
    pub p_det: Matrix<T>,
    pub p_cls: Matrix<T>,
    /// `p_det ⊙ p_cls`, before any attention reweighting.
    pub p_comb: Matrix<T>,
    pub p_hat: Vec<T>,
}

/// How per-class combined scores are turned into an image prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImageAggregation {
    /// `σ(Σ_i p_comb[i,c])`, confined to `[0.5, σ(1)]`.
    #[default]
    SigmoidOfSum,
    /// Plain `Σ_i p_comb[i,c]`, as in the original WSDDN head.
    Sum,
}

impl ImageAggregation {
    pub fn from_sigma_on_sum(on: bool) -> Self {
        if on {
            ImageAggregation::SigmoidOfSum
        } else {
            ImageAggregation::Sum
        }
    }

    /// Decision threshold halfway through the attainable prediction range.
    pub fn decision_threshold(self) -> f64 {
        match self {
            ImageAggregation::SigmoidOfSum => sigmoid(0.5),
            ImageAggregation::Sum => 0.5,
        }
    }
}

/// Normalizes raw scores and forms the combined score and image prediction.
pub fn probabilities<T: Scalar>(
    det_scores: Matrix<T>,
    cls_scores: Matrix<T>,
    aggregation: ImageAggregation,
) -> Result<ScorePack<T>> {
    let p_det = softmax_cols(&det_scores);
    let p_cls = softmax_rows(&cls_scores);
    let p_comb = p_det.hadamard(&p_cls)?;
    let p_hat = image_prediction(&p_comb, aggregation);
    Ok(ScorePack {
        det_scores,
        cls_scores,
        p_det,
        p_cls,
        p_comb,
        p_hat,
    })
}

/// Per-class image-level prediction from (possibly reweighted) combined scores.
pub fn image_prediction<T: Scalar>(p_comb: &Matrix<T>, aggregation: ImageAggregation) -> Vec<T> {
    let sums = p_comb.col_sums();
    match aggregation {
        ImageAggregation::SigmoidOfSum => sums.into_iter().map(sigmoid).collect(),
        ImageAggregation::Sum => sums,
    }
}

/// Binary cross-entropy over classes; returns the loss and `dL/dp̂`.
pub fn mil_loss<T: Scalar>(p_hat: &[T], labels: &BTreeSet<usize>) -> (T, Vec<T>) {
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(p_hat.len());
    for (c, &p) in p_hat.iter().enumerate() {
        if labels.contains(&c) {
            let (l, d) = log_prob(p);
            loss -= l;
            grad.push(-d);
        } else {
            let (l, d) = log_prob(T::one() - p);
            loss -= l;
            grad.push(d);
        }
    }
    (loss, grad)
}

/// Gradient of the loss with respect to the combined-score matrix that fed
/// [`image_prediction`], given `dL/dp̂`.
pub fn image_prediction_backward<T: Scalar>(
    p_hat: &[T],
    g_hat: &[T],
    rows: usize,
    aggregation: ImageAggregation,
) -> Matrix<T> {
    let g_sum: Vec<T> = match aggregation {
        ImageAggregation::SigmoidOfSum => p_hat
            .iter()
            .zip(g_hat)
            .map(|(&p, &g)| g * p * (T::one() - p))
            .collect(),
        ImageAggregation::Sum => g_hat.to_vec(),
    };
    let mut out = Matrix::zeros(rows, g_sum.len());
    for i in 0..rows {
        out.row_mut(i).copy_from_slice(&g_sum);
    }
    out
}

/// Gradients of the raw score matrices given `dL/dp_comb`.
pub fn probabilities_backward<T: Scalar>(
    pack: &ScorePack<T>,
    g_comb: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let g_pdet = g_comb.hadamard(&pack.p_cls)?;
    let g_pcls = g_comb.hadamard(&pack.p_det)?;
    Ok((
        softmax_cols_backward(&pack.p_det, &g_pdet)?,
        softmax_rows_backward(&pack.p_cls, &g_pcls)?,
    ))
}
