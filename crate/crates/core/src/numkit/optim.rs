use super::{Matrix, Scalar};
use crate::error::{Error, Result};

/// A learnable matrix with its gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
    velocity: Matrix<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, value: Matrix<T>) -> Self {
        let (r, c) = value.shape();
        ParamTensor {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
            velocity: Matrix::zeros(r, c),
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Matrix::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate(&mut self, g: &Matrix<T>) -> Result<()> {
        self.grad.add_assign(g)
    }

    pub fn velocity(&self) -> &Matrix<T> {
        &self.velocity
    }
}

/// Anything that owns a fixed, ordered set of parameter tensors.
pub trait Parameters<T> {
    fn params(&self) -> Vec<&ParamTensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>>;

    fn zero_grad(&mut self)
    where
        T: Scalar,
    {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_values(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

impl<T> Parameters<T> for ParamTensor<T> {
    fn params(&self) -> Vec<&ParamTensor<T>> {
        vec![self]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![self]
    }
}

impl<T> Parameters<T> for Vec<ParamTensor<T>> {
    fn params(&self) -> Vec<&ParamTensor<T>> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        self.iter_mut().collect()
    }
}

/// One SGD-with-momentum step over every tensor of `model`:
/// `v ← momentum·v − lr·grad; value ← value + v`, then gradients are zeroed.
///
/// All gradients are checked before any value moves, so a failed step
/// leaves the parameters untouched.
pub fn sgd_step<T: Scalar, P: Parameters<T> + ?Sized>(
    model: &mut P,
    lr: T,
    momentum: T,
) -> Result<()> {
    if !(lr > T::zero()) || !(momentum >= T::zero() && momentum < T::one()) {
        return Err(Error::Config(format!(
            "sgd needs lr > 0 and momentum in [0,1), got lr={lr}, momentum={momentum}"
        )));
    }
    let mut params = model.params_mut();
    if let Some(bad) = params.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::Optimizer {
            param: bad.name.clone(),
        });
    }
    for p in params.iter_mut() {
        let ParamTensor {
            value,
            grad,
            velocity,
            ..
        } = &mut **p;
        for ((x, v), &g) in value
            .as_mut_slice()
            .iter_mut()
            .zip(velocity.as_mut_slice())
            .zip(grad.as_slice())
        {
            *v = momentum * *v - lr * g;
            *x += *v;
        }
        grad.fill(T::zero());
    }
    Ok(())
}
