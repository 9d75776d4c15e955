use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `N×H×W×C → N×C` spatial mean.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = x.dims4("global_avg_pool input")?;
    let mut out = Tensor::zeros(&[n, c]);
    let inv = T::one() / T::cast((h * w) as f64);
    for b in 0..n {
        let dst = &mut out.data_mut()[b * c..(b + 1) * c];
        for px in x.data()[b * h * w * c..(b + 1) * h * w * c].chunks_exact(c) {
            for (d, &v) in dst.iter_mut().zip(px) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    Ok(out)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    grad_out.expect_shape(&[n, c], "global_avg_pool grad_out")?;
    let inv = T::one() / T::cast((h * w) as f64);
    Ok(Tensor::from_fn(input_shape, |idx| {
        let b = idx / (h * w * c);
        grad_out.data()[b * c + idx % c] * inv
    }))
}
