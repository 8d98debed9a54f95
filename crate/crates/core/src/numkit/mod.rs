//! Small dense numeric kernel: matrices, softmax/sigmoid primitives with
//! explicit backward passes, SGD with momentum, and finite-difference checks.
//!
//! Everything is generic over [`Scalar`] (implemented for `f32` and `f64`);
//! the training pipeline itself runs in `f64`.

mod matrix;
mod ops;
mod optim;

pub mod checkpoint;
pub mod gradcheck;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

pub use gradcheck::grad_check;
pub use matrix::Matrix;
pub use ops::{
    affine, affine_backward, clamp_prob, log_prob, log_sum_exp, sigmoid, softmax_cols,
    softmax_cols_backward, softmax_rows, softmax_rows_backward, AffineGrads, PROB_CLAMP,
};
pub use optim::{sgd_step, ParamTensor, Parameters};

/// Floating-point scalar used by every numeric kernel.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal; never fails for `f32`/`f64`.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal fits the scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
