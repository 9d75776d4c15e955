use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::layers::ConvLayer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Params;

/// Coordinate of index `i` on an axis of length `n`, scaled to `[-1, 1]`.
fn coord<T: Scalar>(i: usize, n: usize) -> T {
    if n <= 1 {
        T::zero()
    } else {
        T::cast(-1.0 + 2.0 * i as f64 / (n - 1) as f64)
    }
}

/// Appends a row-coordinate and a column-coordinate channel.
pub fn coordconv_augment<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = input.dims4("coordconv input")?;
    let mut data = Vec::with_capacity(n * h * w * (c + 2));
    for idx in 0..n * h * w {
        data.extend_from_slice(&input.data()[idx * c..(idx + 1) * c]);
        data.push(coord((idx / w) % h, h));
        data.push(coord(idx % w, w));
    }
    Tensor::from_vec(&[n, h, w, c + 2], data)
}

/// Drops the gradient of the two coordinate channels.
pub fn coordconv_strip_grad<T: Scalar>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c2] = grad.dims4("coordconv grad")?;
    if c2 < 2 {
        return Err(shape_err!("coordconv gradient needs at least 2 channels, got {}", c2));
    }
    let c = c2 - 2;
    let data = grad.data().chunks_exact(c2).flat_map(|px| px[..c].iter().copied()).collect();
    Tensor::from_vec(&[n, h, w, c], data)
}

/// Convolution over the coordinate-augmented input.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordConvLayer<T> {
    /// Filters over `Cin + 2` channels.
    pub conv: ConvLayer<T>,
}

impl<T: Scalar> CoordConvLayer<T> {
    pub fn init<R: Rng + ?Sized>(fh: usize, fw: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        CoordConvLayer { conv: ConvLayer::init(fh, fw, cin + 2, cout, rng) }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.forward(&coordconv_augment(input)?)
    }

    pub fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let (gi, conv) = self.conv.backward(&coordconv_augment(input)?, grad_out)?;
        Ok((coordconv_strip_grad(&gi)?, CoordConvLayer { conv }))
    }
}

impl<T> Params<T> for CoordConvLayer<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        self.conv.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.conv.params_mut()
    }
}
