use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`] given its input; the subgradient at 0 is taken as 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |x, g| if x > T::zero() { g } else { T::zero() })
}
