use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Params;

/// Additive bias `B[i,j,c] = row[i] + col[j] + channel[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialBias<T> {
    pub row: Tensor<T>,
    pub col: Tensor<T>,
    pub channel: Tensor<T>,
}

impl<T: Scalar> SpatialBias<T> {
    pub fn new(row: Tensor<T>, col: Tensor<T>, channel: Tensor<T>) -> Result<Self> {
        for (t, what) in [(&row, "row"), (&col, "column"), (&channel, "channel")] {
            if t.ndim() != 1 {
                return Err(shape_err!("{what} bias must be a vector, got {:?}", t.shape()));
            }
        }
        Ok(SpatialBias { row, col, channel })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        SpatialBias { row: Tensor::zeros(&[h]), col: Tensor::zeros(&[w]), channel: Tensor::zeros(&[c]) }
    }

    /// `(H, W, C)`.
    pub fn extents(&self) -> (usize, usize, usize) {
        (self.row.numel(), self.col.numel(), self.channel.numel())
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let [_, h, w, c] = x.dims4("spatial bias input")?;
        if (h, w, c) != self.extents() {
            return Err(shape_err!("spatial bias {:?} applied to {:?}", self.extents(), x.shape()));
        }
        Ok(())
    }

    /// Adds the bias in place.
    pub fn add_to(&self, x: &mut Tensor<T>) -> Result<()> {
        self.check(x)?;
        let (h, w, c) = self.extents();
        let (row, col, ch) = (self.row.data(), self.col.data(), self.channel.data());
        for (idx, px) in x.data_mut().chunks_exact_mut(c).enumerate() {
            let (i, j) = ((idx / w) % h, idx % w);
            let rc = row[i] + col[j];
            for (v, &b) in px.iter_mut().zip(ch) {
                *v += rc + b;
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = input.clone();
        self.add_to(&mut out)?;
        Ok(out)
    }

    /// Parameter gradients for an output gradient (the input gradient is `grad_out` itself).
    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<Self> {
        self.check(grad_out)?;
        let (h, w, c) = self.extents();
        let mut g = SpatialBias::zeros(h, w, c);
        for (idx, px) in grad_out.data().chunks_exact(c).enumerate() {
            let (i, j) = ((idx / w) % h, idx % w);
            let mut s = T::zero();
            for (gc, &v) in g.channel.data_mut().iter_mut().zip(px) {
                *gc += v;
                s += v;
            }
            g.row.data_mut()[i] += s;
            g.col.data_mut()[j] += s;
        }
        Ok(g)
    }
}

impl<T> Params<T> for SpatialBias<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.row, &self.col, &self.channel]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.row, &mut self.col, &mut self.channel]
    }
}
