//! Low-rank locally connected (LRLC) layers and the small neural-network
//! toolkit needed to train and inspect them.
//!
//! The crate is `no_std` (with `alloc`). Everything here is a pure function of
//! parameters and inputs; file formats, datasets and the experiment runner live
//! in the `lrlc` companion crate.
//!
//! # Layout conventions
//!
//! - Activations are `N×H×W×C`, row-major.
//! - Filter banks are `h×w×Cin×Cout`.
//! - All spatial operators use SAME zero padding and stride 1.
//!
//! Gradients are explicit: every trainable operator exposes a `backward` that
//! returns the gradient with respect to its input together with a gradient
//! container of the same type as the parameters (see [`Params`]). The
//! [`gradcheck`] module certifies each of them against central differences.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod container;
pub mod cost;
pub mod dynamic;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod lrlc;
pub mod model;
pub mod optim;
pub mod patches;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{matmul, Tensor};

use alloc::vec::Vec;

/// A container of trainable tensors with a stable ordering.
///
/// Gradient containers returned by `backward` implement this trait with the
/// same ordering as the parameters they mirror, so optimizers can zip the two.
pub trait Params<T> {
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }
}

#[cfg(test)]
pub(crate) mod testutil;
