use super::{Parameters, Scalar};
use crate::error::{Error, Result};

/// Compares analytic gradients against central differences.
///
/// `loss` must return the scalar loss and accumulate its analytic gradient
/// into the parameters' `grad` buffers (they are zeroed before every call).
/// Returns the maximum over all coordinates of `|a − n| / max(1, |a|, |n|)`.
pub fn grad_check<T, P, F>(model: &mut P, eps: T, mut loss: F) -> Result<T>
where
    T: Scalar,
    P: Parameters<T> + ?Sized,
    F: FnMut(&mut P) -> Result<T>,
{
    if !(eps >= T::lit(1e-6) && eps <= T::lit(1e-4)) {
        return Err(Error::Check(format!("eps {eps} outside [1e-6, 1e-4]")));
    }
    model.zero_grad();
    let base = loss(model)?;
    if !base.is_finite() {
        return Err(Error::Check("loss is not finite".into()));
    }
    let analytic: Vec<Vec<T>> = model
        .params()
        .iter()
        .map(|p| p.grad.as_slice().to_vec())
        .collect();

    let mut worst = T::zero();
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = model.params()[pi].value.as_slice()[k];
            let mut eval_at = |x: T, model: &mut P| -> Result<T> {
                model.params_mut()[pi].value.as_mut_slice()[k] = x;
                model.zero_grad();
                let v = loss(model)?;
                if !v.is_finite() {
                    return Err(Error::Check(format!(
                        "loss is not finite at `{}`[{k}]",
                        model.params()[pi].name
                    )));
                }
                Ok(v)
            };
            let plus = eval_at(orig + eps, model)?;
            let minus = eval_at(orig - eps, model)?;
            model.params_mut()[pi].value.as_mut_slice()[k] = orig;
            let numeric = (plus - minus) / (eps + eps);
            let denom = T::one().max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    // leave the analytic gradient in place for the caller
    model.zero_grad();
    loss(model)?;
    Ok(worst)
}
