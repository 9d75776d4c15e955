use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::patches::PatchGeometry;
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::Tensor;
use crate::Params;

/// He-style uniform bound `sqrt(6 / fan_in)`.
pub fn he_bound(fan_in: usize) -> f64 {
    libm::sqrt(6.0 / fan_in.max(1) as f64)
}

/// Per-example im2col scratch shared by every convolution-shaped operator.
pub(crate) struct Im2Col<T> {
    pub geom: PatchGeometry,
    cols: Vec<T>,
    dcols: Vec<T>,
}

impl<T: Scalar> Im2Col<T> {
    pub fn new(geom: PatchGeometry) -> Self {
        let len = geom.positions() * geom.patch_len();
        Im2Col { geom, cols: vec![T::zero(); len], dcols: Vec::new() }
    }

    pub fn load(&mut self, image: &[T]) {
        self.geom.im2col(image, &mut self.cols);
    }

    /// `out ← cols · filters + beta·out`, `filters` being `patch_len × cout`.
    pub fn apply(&self, filters: &[T], cout: usize, out: &mut [T], beta: T) {
        let (p, k) = (self.geom.positions(), self.geom.patch_len());
        gemm(
            T::one(),
            &self.cols,
            MatView::row_major(p, k),
            filters,
            MatView::row_major(k, cout),
            beta,
            out,
            MatView::row_major(p, cout),
        );
    }

    /// `grad_filters += colsᵀ · grad_out`.
    pub fn filter_grad(&self, grad_out: &[T], cout: usize, grad_filters: &mut [T]) {
        let (p, k) = (self.geom.positions(), self.geom.patch_len());
        gemm(
            T::one(),
            &self.cols,
            MatView::transposed(p, k),
            grad_out,
            MatView::row_major(p, cout),
            T::one(),
            grad_filters,
            MatView::row_major(k, cout),
        );
    }

    /// `dcols (+)= grad_out · filtersᵀ`; overwrites when `accumulate` is false.
    pub fn cols_grad(&mut self, grad_out: &[T], filters: &[T], cout: usize, accumulate: bool) {
        let (p, k) = (self.geom.positions(), self.geom.patch_len());
        if self.dcols.len() != p * k {
            self.dcols = vec![T::zero(); p * k];
        }
        gemm(
            T::one(),
            grad_out,
            MatView::row_major(p, cout),
            filters,
            MatView::transposed(k, cout),
            if accumulate { T::one() } else { T::zero() },
            &mut self.dcols,
            MatView::row_major(p, k),
        );
    }

    /// Scatters the accumulated `dcols` onto an image gradient.
    pub fn scatter(&self, grad_image: &mut [T]) {
        self.geom.col2im_add(&self.dcols, grad_image);
    }
}

/// Convolution with a single shared filter bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    /// `h×w×Cin×Cout`.
    pub filters: Tensor<T>,
    /// `Cout`.
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(filters: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [fh, fw, _, cout] = match filters.shape() {
            &[a, b, c, d] => [a, b, c, d],
            s => return Err(shape_err!("conv filters must be h×w×Cin×Cout, got {:?}", s)),
        };
        PatchGeometry::new(1, 1, 1, fh, fw)?;
        bias.expect_shape(&[cout], "conv bias")?;
        Ok(ConvLayer { filters, bias })
    }

    pub fn zeros(fh: usize, fw: usize, cin: usize, cout: usize) -> Self {
        ConvLayer { filters: Tensor::zeros(&[fh, fw, cin, cout]), bias: Tensor::zeros(&[cout]) }
    }

    /// Fan-in-scaled uniform filters and zero bias.
    pub fn init<R: Rng + ?Sized>(fh: usize, fw: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        let b = he_bound(fh * fw * cin);
        ConvLayer { filters: Tensor::uniform(&[fh, fw, cin, cout], -b, b, rng), bias: Tensor::zeros(&[cout]) }
    }

    /// `(h, w, Cin, Cout)`.
    pub fn extents(&self) -> (usize, usize, usize, usize) {
        let s = self.filters.shape();
        (s[0], s[1], s[2], s[3])
    }

    fn geometry(&self, input: &Tensor<T>) -> Result<(PatchGeometry, usize)> {
        let [_, h, w, c] = input.dims4("conv input")?;
        let (fh, fw, cin, _) = self.extents();
        if c != cin {
            return Err(shape_err!("conv expects {} input channels, got {}", cin, c));
        }
        Ok((PatchGeometry::new(h, w, c, fh, fw)?, input.dim(0)))
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (geom, n) = self.geometry(input)?;
        let (_, _, _, cout) = self.extents();
        let (p, img) = (geom.positions(), geom.image_len());
        let mut out = Tensor::zeros(&[n, geom.height, geom.width, cout]);
        let mut scratch = Im2Col::new(geom);
        for b in 0..n {
            scratch.load(&input.data()[b * img..(b + 1) * img]);
            let dst = &mut out.data_mut()[b * p * cout..(b + 1) * p * cout];
            scratch.apply(self.filters.data(), cout, dst, T::zero());
            for row in dst.chunks_exact_mut(cout) {
                for (v, &bias) in row.iter_mut().zip(self.bias.data()) {
                    *v += bias;
                }
            }
        }
        Ok(out)
    }

    /// Returns the input gradient and the parameter gradients.
    pub fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let (geom, n) = self.geometry(input)?;
        let (_, _, _, cout) = self.extents();
        grad_out.expect_shape(&[n, geom.height, geom.width, cout], "conv grad_out")?;
        let (p, img) = (geom.positions(), geom.image_len());
        let mut grads = ConvLayer::zeros(geom.filter_h, geom.filter_w, geom.channels, cout);
        let mut grad_in = Tensor::zeros(input.shape());
        let mut scratch = Im2Col::new(geom);
        for b in 0..n {
            let go = &grad_out.data()[b * p * cout..(b + 1) * p * cout];
            scratch.load(&input.data()[b * img..(b + 1) * img]);
            scratch.filter_grad(go, cout, grads.filters.data_mut());
            scratch.cols_grad(go, self.filters.data(), cout, false);
            scratch.scatter(&mut grad_in.data_mut()[b * img..(b + 1) * img]);
            for row in go.chunks_exact(cout) {
                for (g, &v) in grads.bias.data_mut().iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        Ok((grad_in, grads))
    }
}

impl<T> Params<T> for ConvLayer<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.filters, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.filters, &mut self.bias]
    }
}
