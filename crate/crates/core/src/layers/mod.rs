//! Reference layers: convolution, classic locally connected, spatially varying
//! bias, batch normalization, ReLU, global average pooling, dense and the
//! CoordConv input augmentation.

mod activation;
mod batchnorm;
mod bias;
mod conv;
mod coordconv;
mod dense;
mod local;
mod pool;

pub use activation::{relu, relu_backward};
pub use batchnorm::{BatchNorm, BatchNormCache, BatchNormGrads, BN_EPSILON, BN_MOMENTUM};
pub use bias::SpatialBias;
pub use conv::{he_bound, ConvLayer};
pub use coordconv::{coordconv_augment, coordconv_strip_grad, CoordConvLayer};
pub use dense::Dense;
pub use local::LocalLayer;
pub use pool::{global_avg_pool, global_avg_pool_backward};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `O_{i,j} = I_{i,j} ⋆ F + bias`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    layer.forward(input)
}

/// `O_{i,j} = I_{i,j} ⋆ F^{(i,j)} + bias`.
pub fn local_forward<T: Scalar>(input: &Tensor<T>, layer: &LocalLayer<T>) -> Result<Tensor<T>> {
    layer.forward(input)
}

/// `out[n,i,j,c] = in[n,i,j,c] + b_row[i] + b_col[j] + b_channel[c]`.
pub fn spatial_bias_add<T: Scalar>(input: &Tensor<T>, bias: &SpatialBias<T>) -> Result<Tensor<T>> {
    bias.forward(input)
}
