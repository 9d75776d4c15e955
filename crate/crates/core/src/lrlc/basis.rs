use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{config_err, shape_err, Result};
use crate::layers::he_bound;
use crate::patches::PatchGeometry;
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::Tensor;

/// The `K` shared filter banks `F^(k)`, stored `K×h×w×Cin×Cout`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBasis<T> {
    pub banks: Tensor<T>,
}

impl<T: Scalar> FilterBasis<T> {
    pub fn new(banks: Tensor<T>) -> Result<Self> {
        let s = banks.shape();
        if s.len() != 5 {
            return Err(shape_err!("basis must be K×h×w×Cin×Cout, got {:?}", s));
        }
        if s[0] == 0 {
            return Err(config_err!("spatial rank must be at least 1"));
        }
        PatchGeometry::new(1, 1, 1, s[1], s[2])?;
        Ok(FilterBasis { banks })
    }

    pub fn zeros(k: usize, fh: usize, fw: usize, cin: usize, cout: usize) -> Self {
        FilterBasis { banks: Tensor::zeros(&[k, fh, fw, cin, cout]) }
    }

    /// Fan-in-scaled uniform banks.
    pub fn init<R: Rng + ?Sized>(k: usize, fh: usize, fw: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        let b = he_bound(fh * fw * cin);
        FilterBasis { banks: Tensor::uniform(&[k, fh, fw, cin, cout], -b, b, rng) }
    }

    /// `(K, h, w, Cin, Cout)`.
    pub fn extents(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.banks.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }

    pub fn rank(&self) -> usize {
        self.banks.dim(0)
    }

    fn bank_len(&self) -> usize {
        self.banks.numel() / self.rank().max(1)
    }

    /// Bank `k`, flattened `h·w·Cin × Cout`.
    pub fn bank(&self, k: usize) -> &[T] {
        let len = self.bank_len();
        &self.banks.data()[k * len..(k + 1) * len]
    }

    /// `Σ_k coeffs[k]·F^(k)` as an `h×w×Cin×Cout` tensor.
    pub fn combine(&self, coeffs: &[T]) -> Tensor<T> {
        let (_, fh, fw, cin, cout) = self.extents();
        let mut out = Tensor::zeros(&[fh, fw, cin, cout]);
        for (k, &c) in coeffs.iter().enumerate() {
            for (o, &f) in out.data_mut().iter_mut().zip(self.bank(k)) {
                *o += c * f;
            }
        }
        out
    }

    pub(crate) fn geometry(&self, input: &Tensor<T>) -> Result<PatchGeometry> {
        let [_, h, w, c] = input.dims4("lrlc input")?;
        let (_, fh, fw, cin, _) = self.extents();
        if c != cin {
            return Err(shape_err!("basis expects {} input channels, got {}", cin, c));
        }
        PatchGeometry::new(h, w, c, fh, fw)
    }
}

/// Normalized weights are either shared (`H×W×K`) or per example (`N×H×W×K`).
fn weight_stride<T: Scalar>(weights: &Tensor<T>, n: usize, p: usize, k: usize) -> Result<usize> {
    if weights.numel() == p * k && weights.ndim() == 3 {
        Ok(0)
    } else if weights.numel() == n * p * k && weights.ndim() == 4 {
        Ok(p * k)
    } else {
        Err(shape_err!("weights {:?} do not match {} positions × rank {} (batch {})", weights.shape(), p, k, n))
    }
}

/// Per-bank responses `O_k = I ⊛ F^(k)` for one example, written `P×K×Cout`.
fn responses<T: Scalar>(basis: &FilterBasis<T>, geom: &PatchGeometry, cols: &[T], out: &mut [T]) {
    let (k, .., cout) = basis.extents();
    let (p, l) = (geom.positions(), geom.patch_len());
    for kk in 0..k {
        gemm(
            T::one(),
            cols,
            MatView::row_major(p, l),
            basis.bank(kk),
            MatView::row_major(l, cout),
            T::zero(),
            &mut out[kk * cout..],
            MatView::row_major(p, cout).with_row_stride(k * cout),
        );
    }
}

/// `Σ_k W^(k) ⊙ (I ⊛ F^(k))` without bias. When `keep` is set the per-bank
/// responses (`N×P×K×Cout`) are returned for the backward pass.
pub(crate) fn mix_forward<T: Scalar>(
    basis: &FilterBasis<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    keep: bool,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    let geom = basis.geometry(input)?;
    let n = input.dim(0);
    let (k, .., cout) = basis.extents();
    let (p, l, img) = (geom.positions(), geom.patch_len(), geom.image_len());
    let ws = weight_stride(weights, n, p, k)?;
    let mut out = Tensor::zeros(&[n, geom.height, geom.width, cout]);
    let mut cols = vec![T::zero(); p * l];
    let per = p * k * cout;
    let mut kept = if keep { vec![T::zero(); n * per] } else { Vec::new() };
    let mut scratch = if keep { Vec::new() } else { vec![T::zero(); per] };
    for b in 0..n {
        geom.im2col(&input.data()[b * img..(b + 1) * img], &mut cols);
        let resp = if keep { &mut kept[b * per..(b + 1) * per] } else { &mut scratch[..] };
        responses(basis, &geom, &cols, resp);
        let w = &weights.data()[b * ws..b * ws + p * k];
        let dst = &mut out.data_mut()[b * p * cout..(b + 1) * p * cout];
        for pos in 0..p {
            let o = &mut dst[pos * cout..(pos + 1) * cout];
            for kk in 0..k {
                let wk = w[pos * k + kk];
                let r = &resp[(pos * k + kk) * cout..(pos * k + kk + 1) * cout];
                for (ov, &rv) in o.iter_mut().zip(r) {
                    *ov += wk * rv;
                }
            }
        }
    }
    Ok((out, keep.then_some(kept)))
}

/// Gradients of [`mix_forward`]: input, banks, and normalized weights. The
/// weight gradient has the shape of `weights` (summed over the batch when shared).
pub(crate) fn mix_backward<T: Scalar>(
    basis: &FilterBasis<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    kept: Option<&[T]>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, FilterBasis<T>, Tensor<T>)> {
    let geom = basis.geometry(input)?;
    let n = input.dim(0);
    let (k, fh, fw, cin, cout) = basis.extents();
    let (p, l, img) = (geom.positions(), geom.patch_len(), geom.image_len());
    let ws = weight_stride(weights, n, p, k)?;
    grad_out.expect_shape(&[n, geom.height, geom.width, cout], "lrlc grad_out")?;
    let per = p * k * cout;
    if let Some(r) = kept {
        if r.len() != n * per {
            return Err(shape_err!("cached responses hold {} values, expected {}", r.len(), n * per));
        }
    }

    let mut grad_in = Tensor::zeros(input.shape());
    let mut gbasis = FilterBasis::zeros(k, fh, fw, cin, cout);
    let mut gw = Tensor::zeros(weights.shape());
    let mut cols = vec![T::zero(); p * l];
    let mut dcols = vec![T::zero(); p * l];
    let mut scratch = vec![T::zero(); if kept.is_some() { 0 } else { per }];
    let mut dresp = vec![T::zero(); per];
    let bank_len = l * cout;
    for b in 0..n {
        geom.im2col(&input.data()[b * img..(b + 1) * img], &mut cols);
        let resp: &[T] = match kept {
            Some(r) => &r[b * per..(b + 1) * per],
            None => {
                responses(basis, &geom, &cols, &mut scratch);
                &scratch
            }
        };
        let w = &weights.data()[b * ws..b * ws + p * k];
        let g = &grad_out.data()[b * p * cout..(b + 1) * p * cout];
        let dw = &mut gw.data_mut()[b * ws..b * ws + p * k];
        for pos in 0..p {
            let gp = &g[pos * cout..(pos + 1) * cout];
            for kk in 0..k {
                let off = (pos * k + kk) * cout;
                let r = &resp[off..off + cout];
                dw[pos * k + kk] += gp.iter().zip(r).map(|(&a, &c)| a * c).sum();
                let wk = w[pos * k + kk];
                for (d, &gv) in dresp[off..off + cout].iter_mut().zip(gp) {
                    *d = wk * gv;
                }
            }
        }
        for kk in 0..k {
            let dview = MatView::row_major(p, cout).with_row_stride(k * cout);
            gemm(
                T::one(),
                &cols,
                MatView::transposed(p, l),
                &dresp[kk * cout..],
                dview,
                T::one(),
                &mut gbasis.banks.data_mut()[kk * bank_len..(kk + 1) * bank_len],
                MatView::row_major(l, cout),
            );
            gemm(
                T::one(),
                &dresp[kk * cout..],
                dview,
                basis.bank(kk),
                MatView::transposed(l, cout),
                if kk == 0 { T::zero() } else { T::one() },
                &mut dcols,
                MatView::row_major(p, l),
            );
        }
        geom.col2im_add(&dcols, &mut grad_in.data_mut()[b * img..(b + 1) * img]);
    }
    Ok((grad_in, gbasis, gw))
}
