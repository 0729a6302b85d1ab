use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Central-difference gradient of a scalar function, one coordinate at a
/// time: `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("finite-difference step {eps} must be positive")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                what: format!("finite-difference evaluation at coordinate {i}"),
            });
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over all coordinates.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
