use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_difference_gradient<S, F>(mut f: F, x: &Tensor<S>, h: S) -> Result<Tensor<S>>
where
    S: Scalar,
    F: FnMut(&Tensor<S>) -> Result<S>,
{
    let mut buf = x.to_vec();
    let mut out = Vec::with_capacity(buf.len());
    for i in 0..buf.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let plus = f(&Tensor::new(x.shape(), buf.clone())?)?;
        buf[i] = orig - h;
        let minus = f(&Tensor::new(x.shape(), buf.clone())?)?;
        buf[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "finite difference evaluation at coordinate {i}"
            )));
        }
        out.push((plus - minus) / (h + h));
    }
    Tensor::new(x.shape(), out)
}
