//! Low-rank locally connected layers.
//!
//! A layer holds `K` filter banks and, for every output position, a softmax
//! mixture over them. Training evaluates `K` convolutions and mixes their
//! outputs; [`LrlcLayer::lower_to_local`] folds the mixture into one bank per
//! position for inference.

mod basis;
mod layer;
mod weights;

pub use basis::FilterBasis;
pub(crate) use basis::{mix_backward, mix_forward};
pub use layer::{init_structured, lower_weights, LoweredLrlc, LrlcCache, LrlcLayer, LrlcSpec};
pub use weights::{combine_logits, normalize_weights, softmax_backward, CombiningWeights, WeightMode};

use crate::error::Result;
use crate::layers::LocalLayer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn lrlc_forward<T: Scalar>(input: &Tensor<T>, layer: &LrlcLayer<T>) -> Result<Tensor<T>> {
    layer.forward(input)
}

/// The locally connected part of the lowered layer; the spatial bias is in
/// [`LoweredLrlc::bias`].
pub fn lower_to_local<T: Scalar>(layer: &LrlcLayer<T>) -> Result<LocalLayer<T>> {
    Ok(layer.lower_to_local()?.local)
}
