use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::layers::he_bound;
use crate::patches::PatchGeometry;
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::Tensor;
use crate::Params;

/// Upper bound on patch-matrix elements materialized at once.
const PATCH_BUDGET: usize = 1 << 23;

/// Locally connected layer: an independent filter bank per output position.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalLayer<T> {
    /// `H×W×h×w×Cin×Cout`.
    pub filters: Tensor<T>,
    /// `Cout`.
    pub bias: Tensor<T>,
}

impl<T: Scalar> LocalLayer<T> {
    pub fn new(filters: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let s = filters.shape();
        if s.len() != 6 {
            return Err(shape_err!("local filters must be H×W×h×w×Cin×Cout, got {:?}", s));
        }
        PatchGeometry::new(1, 1, 1, s[2], s[3])?;
        bias.expect_shape(&[s[5]], "local bias")?;
        Ok(LocalLayer { filters, bias })
    }

    pub fn zeros(h: usize, w: usize, fh: usize, fw: usize, cin: usize, cout: usize) -> Self {
        LocalLayer { filters: Tensor::zeros(&[h, w, fh, fw, cin, cout]), bias: Tensor::zeros(&[cout]) }
    }

    pub fn init<R: Rng + ?Sized>(
        h: usize,
        w: usize,
        fh: usize,
        fw: usize,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let b = he_bound(fh * fw * cin);
        LocalLayer { filters: Tensor::uniform(&[h, w, fh, fw, cin, cout], -b, b, rng), bias: Tensor::zeros(&[cout]) }
    }

    /// Builds the layer that applies `filters` (`h×w×Cin×Cout`) at every position.
    pub fn replicate(h: usize, w: usize, filters: &Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let mut shape = vec![h, w];
        shape.extend_from_slice(filters.shape());
        let bank = filters.data();
        let data = (0..h * w).flat_map(|_| bank.iter().copied()).collect();
        LocalLayer::new(Tensor::from_vec(&shape, data)?, bias)
    }

    /// `(H, W, h, w, Cin, Cout)`.
    pub fn extents(&self) -> (usize, usize, usize, usize, usize, usize) {
        let s = self.filters.shape();
        (s[0], s[1], s[2], s[3], s[4], s[5])
    }

    /// The bank applied at `(i, j)`, flattened `h·w·Cin × Cout`.
    pub fn bank(&self, i: usize, j: usize) -> &[T] {
        let (_, w, fh, fw, cin, cout) = self.extents();
        let len = fh * fw * cin * cout;
        &self.filters.data()[(i * w + j) * len..(i * w + j + 1) * len]
    }

    fn geometry(&self, input: &Tensor<T>) -> Result<PatchGeometry> {
        let [_, h, w, c] = input.dims4("local input")?;
        let (lh, lw, fh, fw, cin, _) = self.extents();
        if (h, w) != (lh, lw) {
            return Err(shape_err!("local layer bound to {}x{}, input is {}x{}", lh, lw, h, w));
        }
        if c != cin {
            return Err(shape_err!("local layer expects {} input channels, got {}", cin, c));
        }
        PatchGeometry::new(h, w, c, fh, fw)
    }

    fn chunk(geom: &PatchGeometry) -> usize {
        (PATCH_BUDGET / (geom.positions() * geom.patch_len()).max(1)).max(1)
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let geom = self.geometry(input)?;
        let n = input.dim(0);
        let (.., cout) = self.extents();
        let (p, k, img) = (geom.positions(), geom.patch_len(), geom.image_len());
        let mut out = Tensor::zeros(&[n, geom.height, geom.width, cout]);
        let chunk = Self::chunk(&geom);
        let mut cols = vec![T::zero(); chunk.min(n) * p * k];
        let mut start = 0;
        while start < n {
            let m = chunk.min(n - start);
            for b in 0..m {
                let src = &input.data()[(start + b) * img..(start + b + 1) * img];
                geom.im2col(src, &mut cols[b * p * k..(b + 1) * p * k]);
            }
            let dst = &mut out.data_mut()[start * p * cout..(start + m) * p * cout];
            for pos in 0..p {
                // rows of this position across the chunk are p·k apart
                let bank = &self.filters.data()[pos * k * cout..(pos + 1) * k * cout];
                gemm(
                    T::one(),
                    &cols[pos * k..],
                    MatView::row_major(m, k).with_row_stride(p * k),
                    bank,
                    MatView::row_major(k, cout),
                    T::zero(),
                    &mut dst[pos * cout..],
                    MatView::row_major(m, cout).with_row_stride(p * cout),
                );
            }
            start += m;
        }
        for row in out.data_mut().chunks_exact_mut(cout) {
            for (v, &b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let geom = self.geometry(input)?;
        let n = input.dim(0);
        let (h, w, fh, fw, cin, cout) = self.extents();
        grad_out.expect_shape(&[n, h, w, cout], "local grad_out")?;
        let (p, k, img) = (geom.positions(), geom.patch_len(), geom.image_len());
        let mut grads = LocalLayer::zeros(h, w, fh, fw, cin, cout);
        let mut grad_in = Tensor::zeros(input.shape());
        let chunk = Self::chunk(&geom);
        let mut cols = vec![T::zero(); chunk.min(n) * p * k];
        let mut dcols = vec![T::zero(); chunk.min(n) * p * k];
        let mut start = 0;
        while start < n {
            let m = chunk.min(n - start);
            for b in 0..m {
                let src = &input.data()[(start + b) * img..(start + b + 1) * img];
                geom.im2col(src, &mut cols[b * p * k..(b + 1) * p * k]);
            }
            let go = &grad_out.data()[start * p * cout..(start + m) * p * cout];
            for pos in 0..p {
                let bank = &self.filters.data()[pos * k * cout..(pos + 1) * k * cout];
                let gbank = &mut grads.filters.data_mut()[pos * k * cout..(pos + 1) * k * cout];
                // d bank += colsᵀ · dO
                gemm(
                    T::one(),
                    &cols[pos * k..],
                    MatView { rows: k, cols: m, row_stride: 1, col_stride: p * k },
                    &go[pos * cout..],
                    MatView::row_major(m, cout).with_row_stride(p * cout),
                    T::one(),
                    gbank,
                    MatView::row_major(k, cout),
                );
                // d cols = dO · bankᵀ
                gemm(
                    T::one(),
                    &go[pos * cout..],
                    MatView::row_major(m, cout).with_row_stride(p * cout),
                    bank,
                    MatView::transposed(k, cout),
                    T::zero(),
                    &mut dcols[pos * k..],
                    MatView::row_major(m, k).with_row_stride(p * k),
                );
            }
            for b in 0..m {
                let dst = &mut grad_in.data_mut()[(start + b) * img..(start + b + 1) * img];
                geom.col2im_add(&dcols[b * p * k..(b + 1) * p * k], dst);
            }
            for row in go.chunks_exact(cout) {
                for (g, &v) in grads.bias.data_mut().iter_mut().zip(row) {
                    *g += v;
                }
            }
            start += m;
        }
        Ok((grad_in, grads))
    }
}

impl<T> Params<T> for LocalLayer<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.filters, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.filters, &mut self.bias]
    }
}
