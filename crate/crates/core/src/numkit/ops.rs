//! Forward kernels and their hand-written backward passes.

use super::{Matrix, Scalar};
use crate::error::{Error, Result};

/// Lower/upper clamp applied to any probability before taking its log.
pub const PROB_CLAMP: f64 = 1e-7;

/// `out[i,c] = Σ_k x[i,k]·w[k,c] + b[c]`.
pub fn affine<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if x.cols() != w.rows() {
        return Err(Error::shape(
            "affine",
            format!("x is {:?}, w is {:?}", x.shape(), w.shape()),
        ));
    }
    if b.shape() != (1, w.cols()) {
        return Err(Error::shape(
            "affine",
            format!("bias is {:?}, expected (1, {})", b.shape(), w.cols()),
        ));
    }
    let (r, d, c) = (x.rows(), x.cols(), w.cols());
    let mut out = Matrix::zeros(r, c);
    for i in 0..r {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        oi.copy_from_slice(b.as_slice());
        for k in 0..d {
            let xik = xi[k];
            if xik == T::zero() {
                continue;
            }
            for (o, &wkc) in oi.iter_mut().zip(w.row(k)) {
                *o += xik * wkc;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`affine`] given the upstream gradient `g` (R×C).
pub struct AffineGrads<T> {
    pub x: Matrix<T>,
    pub w: Matrix<T>,
    pub b: Matrix<T>,
}

pub fn affine_backward<T: Scalar>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    g: &Matrix<T>,
) -> Result<AffineGrads<T>> {
    g.expect_shape((x.rows(), w.cols()), "affine_backward")?;
    let (r, d, c) = (x.rows(), x.cols(), w.cols());
    let mut gx = Matrix::zeros(r, d);
    let mut gw = Matrix::zeros(d, c);
    for i in 0..r {
        let gi = g.row(i);
        for k in 0..d {
            let xik = x[(i, k)];
            let wk = w.row(k);
            let mut acc = T::zero();
            for j in 0..c {
                acc += gi[j] * wk[j];
            }
            gx[(i, k)] = acc;
            for (gwkj, &gij) in gw.row_mut(k).iter_mut().zip(gi) {
                *gwkj += xik * gij;
            }
        }
    }
    Ok(AffineGrads {
        x: gx,
        w: gw,
        b: Matrix::row_vector(&g.col_sums()),
    })
}

fn softmax_slice<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> Vec<T> {
    let max = values.clone().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = values.map(|v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax down each column (normalized over rows).
pub fn softmax_cols<T: Scalar>(s: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(s.rows(), s.cols());
    for j in 0..s.cols() {
        let col = softmax_slice((0..s.rows()).map(|i| s[(i, j)]));
        for (i, v) in col.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

/// Softmax along each row (normalized over columns).
pub fn softmax_rows<T: Scalar>(s: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(s.rows(), s.cols());
    for i in 0..s.rows() {
        let row = softmax_slice(s.row(i).iter().copied());
        out.row_mut(i).copy_from_slice(&row);
    }
    out
}

/// Backward of [`softmax_cols`] given its output `p` and upstream `g`.
pub fn softmax_cols_backward<T: Scalar>(p: &Matrix<T>, g: &Matrix<T>) -> Result<Matrix<T>> {
    g.expect_shape(p.shape(), "softmax_cols_backward")?;
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for j in 0..p.cols() {
        let dot: T = (0..p.rows()).map(|i| p[(i, j)] * g[(i, j)]).sum();
        for i in 0..p.rows() {
            out[(i, j)] = p[(i, j)] * (g[(i, j)] - dot);
        }
    }
    Ok(out)
}

/// Backward of [`softmax_rows`] given its output `p` and upstream `g`.
pub fn softmax_rows_backward<T: Scalar>(p: &Matrix<T>, g: &Matrix<T>) -> Result<Matrix<T>> {
    g.expect_shape(p.shape(), "softmax_rows_backward")?;
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let (pi, gi) = (p.row(i), g.row(i));
        let dot: T = pi.iter().zip(gi).map(|(&a, &b)| a * b).sum();
        for (o, (&pv, &gv)) in out.row_mut(i).iter_mut().zip(pi.iter().zip(gi)) {
            *o = pv * (gv - dot);
        }
    }
    Ok(out)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = T::lit(PROB_CLAMP);
    p.max(eps).min(T::one() - eps)
}

/// `ln(clamp(p))` and its derivative with respect to `p` (zero where clamped).
pub fn log_prob<T: Scalar>(p: T) -> (T, T) {
    let c = clamp_prob(p);
    let d = if c == p { T::one() / p } else { T::zero() };
    (c.ln(), d)
}

/// Numerically stable `ln Σ exp(v)`.
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> T {
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let s: T = values.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}
