//! Shared (Siamese) projection of pooled RGB and depth features and the
//! symmetric temperature-scaled NCE loss between the two modalities.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numkit::{affine, affine_backward, log_sum_exp, Matrix, ParamTensor, Parameters, Scalar};

pub const RHO_MIN: f64 = 0.01;
pub const RHO_MAX: f64 = 1.0;
const NORM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams<T> {
    pub w_proj: ParamTensor<T>,
    pub b_proj: ParamTensor<T>,
    /// Learnable temperature, stored as a 1×1 tensor.
    pub rho: ParamTensor<T>,
}

impl<T: Scalar> ProjectionParams<T> {
    pub fn new(feature_dim: usize, proj_dim: usize, rho: T) -> Self {
        ProjectionParams {
            w_proj: ParamTensor::zeros("projection.w", feature_dim, proj_dim),
            b_proj: ParamTensor::zeros("projection.b", 1, proj_dim),
            rho: ParamTensor::new("projection.rho", Matrix::row_vector(&[rho])),
        }
    }

    pub fn random<R: Rng + ?Sized>(
        feature_dim: usize,
        proj_dim: usize,
        rho: T,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::new(feature_dim, proj_dim, rho);
        let normal = Normal::new(0.0, (1.0 / feature_dim as f64).sqrt()).expect("finite std");
        for v in p.w_proj.value.as_mut_slice() {
            *v = T::lit(normal.sample(rng));
        }
        p
    }

    pub fn rho(&self) -> T {
        self.rho.value.as_slice()[0]
    }

    /// Keeps the temperature inside `[RHO_MIN, RHO_MAX]`.
    pub fn clamp_rho(&mut self) {
        let r = &mut self.rho.value.as_mut_slice()[0];
        *r = r.max(T::lit(RHO_MIN)).min(T::lit(RHO_MAX));
    }
}

impl<T> Parameters<T> for ProjectionParams<T> {
    fn params(&self) -> Vec<&ParamTensor<T>> {
        vec![&self.w_proj, &self.b_proj, &self.rho]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![&mut self.w_proj, &mut self.b_proj, &mut self.rho]
    }
}

/// Intermediate values of [`project`] needed by its backward pass.
#[derive(Debug, Clone)]
pub struct Projection<T> {
    pub input: Matrix<T>,
    pub norms: Vec<T>,
    /// Unit-norm output rows.
    pub embedding: Matrix<T>,
}

/// Affine projection followed by row-wise L2 normalization.
pub fn project<T: Scalar>(pooled: &Matrix<T>, params: &ProjectionParams<T>) -> Result<Projection<T>> {
    let z = affine(pooled, &params.w_proj.value, &params.b_proj.value)?;
    let mut embedding = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    for i in 0..z.rows() {
        let n = z.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(n > T::lit(NORM_TOL)) {
            return Err(Error::Normalization {
                row: i,
                norm: n.to_f64().unwrap_or(f64::NAN),
            });
        }
        for v in embedding.row_mut(i) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok(Projection {
        input: pooled.clone(),
        norms,
        embedding,
    })
}

/// Accumulates projection-weight gradients from `dL/d embedding`.
pub fn project_backward<T: Scalar>(
    proj: &Projection<T>,
    params: &mut ProjectionParams<T>,
    g_emb: &Matrix<T>,
) -> Result<()> {
    g_emb.expect_shape(proj.embedding.shape(), "project_backward")?;
    let mut g_z = Matrix::zeros(g_emb.rows(), g_emb.cols());
    for i in 0..g_emb.rows() {
        let y = proj.embedding.row(i);
        let g = g_emb.row(i);
        let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in g_z.row_mut(i).iter_mut().zip(y).zip(g) {
            *o = (gv - yv * dot) / proj.norms[i];
        }
    }
    let grads = affine_backward(&proj.input, &params.w_proj.value, &g_z)?;
    params.w_proj.accumulate(&grads.w)?;
    params.b_proj.accumulate(&grads.b)?;
    Ok(())
}

/// `⟨a, b⟩ / ρ` for unit vectors.
pub fn similarity<T: Scalar>(a: &[T], b: &[T], rho: T) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>() / rho
}

/// Loss value and gradients of [`nce_loss`].
#[derive(Debug, Clone)]
pub struct NceOutput<T> {
    pub loss: T,
    pub g_rgb: Matrix<T>,
    pub g_depth: Matrix<T>,
    pub g_rho: T,
}

/// Symmetric NCE between aligned rows of `rgb` and `depth`.
///
/// Row `i` of each matrix is a positive pair; every other row of the other
/// modality is a negative. The denominator holds the positive once plus the
/// negatives; `include_positive_in_sum` adds the positive a second time.
pub fn nce_loss<T: Scalar>(
    rgb: &Matrix<T>,
    depth: &Matrix<T>,
    rho: T,
    include_positive_in_sum: bool,
) -> Result<NceOutput<T>> {
    rgb.expect_shape(depth.shape(), "nce_loss")?;
    let b = rgb.rows();
    if b == 0 {
        return Err(Error::shape("nce_loss", "empty batch"));
    }
    let bt = T::lit(b as f64);
    // s[i][j] = S(I_i, D_j)
    let mut s = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            s[(i, j)] = similarity(rgb.row(i), depth.row(j), rho);
        }
    }
    let half = T::lit(0.5);
    let mut loss = T::zero();
    let mut g_s = Matrix::<T>::zeros(b, b);
    // direction 0: each RGB row against all depth columns; 1: transposed
    for dir in 0..2 {
        for a in 0..b {
            let logits: Vec<T> = (0..b)
                .map(|k| if dir == 0 { s[(a, k)] } else { s[(k, a)] })
                .collect();
            let mut terms = logits.clone();
            if include_positive_in_sum {
                terms.push(logits[a]);
            }
            let lse = log_sum_exp(&terms);
            loss += (lse - logits[a]) * half / bt;
            for (k, &l) in logits.iter().enumerate() {
                let mut w = (l - lse).exp();
                if include_positive_in_sum && k == a {
                    w += w;
                }
                if k == a {
                    w -= T::one();
                }
                let cell = if dir == 0 { (a, k) } else { (k, a) };
                g_s[cell] += w * half / bt;
            }
        }
    }
    let mut g_rgb = Matrix::zeros(b, rgb.cols());
    let mut g_depth = Matrix::zeros(b, rgb.cols());
    let mut g_rho = T::zero();
    for i in 0..b {
        for j in 0..b {
            let g = g_s[(i, j)];
            // S = G / ρ  ⇒  dS/dρ = −S/ρ
            g_rho -= g * s[(i, j)] / rho;
            let gg = g / rho;
            for (o, &d) in g_rgb.row_mut(i).iter_mut().zip(depth.row(j)) {
                *o += gg * d;
            }
            for (o, &r) in g_depth.row_mut(j).iter_mut().zip(rgb.row(i)) {
                *o += gg * r;
            }
        }
    }
    Ok(NceOutput {
        loss,
        g_rgb,
        g_depth,
        g_rho,
    })
}

/// Pools, projects both modalities through the shared projection, evaluates
/// the NCE loss and accumulates gradients into `params` scaled by `weight`.
pub fn nce_step<T: Scalar>(
    pooled_rgb: &Matrix<T>,
    pooled_depth: &Matrix<T>,
    params: &mut ProjectionParams<T>,
    include_positive_in_sum: bool,
    weight: T,
) -> Result<T> {
    let pr = project(pooled_rgb, params)?;
    let pd = project(pooled_depth, params)?;
    let out = nce_loss(&pr.embedding, &pd.embedding, params.rho(), include_positive_in_sum)?;
    project_backward(&pr, params, &out.g_rgb.scale(weight))?;
    project_backward(&pd, params, &out.g_depth.scale(weight))?;
    params.rho.grad.as_mut_slice()[0] += weight * out.g_rho;
    Ok(out.loss)
}
