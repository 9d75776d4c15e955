use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::Tensor;
use crate::Params;

/// Affine map `y = x·W + b` on the last axis. Applied to an `N×H×W×C` tensor
/// it is a 1×1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `Cin×Cout`.
    pub weight: Tensor<T>,
    /// `Cout`.
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let cout = match weight.shape() {
            [_, cout] => *cout,
            s => return Err(shape_err!("dense weight must be Cin×Cout, got {:?}", s)),
        };
        bias.expect_shape(&[cout], "dense bias")?;
        Ok(Dense { weight, bias })
    }

    pub fn zeros(cin: usize, cout: usize) -> Self {
        Dense { weight: Tensor::zeros(&[cin, cout]), bias: Tensor::zeros(&[cout]) }
    }

    /// Uniform weights in `±bound`, zero bias.
    pub fn init<R: Rng + ?Sized>(cin: usize, cout: usize, bound: f64, rng: &mut R) -> Self {
        Dense { weight: Tensor::uniform(&[cin, cout], -bound, bound, rng), bias: Tensor::zeros(&[cout]) }
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(1)
    }

    fn rows(&self, x: &Tensor<T>) -> Result<usize> {
        match x.shape().last() {
            Some(&c) if c == self.in_features() => Ok(x.numel() / c.max(1)),
            _ => Err(shape_err!("dense expects last axis {}, got {:?}", self.in_features(), x.shape())),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let m = self.rows(x)?;
        let (k, n) = (self.in_features(), self.out_features());
        let mut shape: Vec<usize> = x.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::from_fn(&shape, |i| self.bias.data()[i % n]);
        gemm(
            T::one(),
            x.data(),
            MatView::row_major(m, k),
            self.weight.data(),
            MatView::row_major(k, n),
            T::one(),
            out.data_mut(),
            MatView::row_major(m, n),
        );
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let m = self.rows(x)?;
        let (k, n) = (self.in_features(), self.out_features());
        if grad_out.numel() != m * n {
            return Err(shape_err!("dense grad_out {:?} for input {:?}", grad_out.shape(), x.shape()));
        }
        let mut grads = Dense::zeros(k, n);
        gemm(
            T::one(),
            x.data(),
            MatView::transposed(m, k),
            grad_out.data(),
            MatView::row_major(m, n),
            T::zero(),
            grads.weight.data_mut(),
            MatView::row_major(k, n),
        );
        for row in grad_out.data().chunks_exact(n) {
            for (g, &v) in grads.bias.data_mut().iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut grad_in = Tensor::zeros(x.shape());
        gemm(
            T::one(),
            grad_out.data(),
            MatView::row_major(m, n),
            self.weight.data(),
            MatView::transposed(k, n),
            T::zero(),
            grad_in.data_mut(),
            MatView::row_major(m, k),
        );
        Ok((grad_in, grads))
    }
}

impl<T> Params<T> for Dense<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
