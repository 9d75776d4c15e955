//! Patch extraction (im2col) and its adjoint.
//!
//! Row `i·W + j` of a patch matrix holds the `fh×fw×C` neighbourhood centred at
//! `(i, j)`, flattened in the same `(x, y, z)` order as a filter bank's first
//! three axes, with zeros wherever the neighbourhood leaves the image.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Local input patches of one example, one row per output position.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> PatchMatrix<T> {
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Tensor::from_vec(&[self.rows, self.cols], self.data).expect("patch matrix extents")
    }
}

/// Geometry shared by the im2col/col2im kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub filter_h: usize,
    pub filter_w: usize,
}

impl PatchGeometry {
    pub fn new(height: usize, width: usize, channels: usize, filter_h: usize, filter_w: usize) -> Result<Self> {
        if filter_h == 0 || filter_w == 0 || filter_h % 2 == 0 || filter_w % 2 == 0 {
            return Err(config_err!("filter extent {}x{} must be odd and positive", filter_h, filter_w));
        }
        Ok(PatchGeometry { height, width, channels, filter_h, filter_w })
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn patch_len(&self) -> usize {
        self.filter_h * self.filter_w * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Writes the patch matrix of one `H×W×C` image into `out` (`positions × patch_len`).
    pub fn im2col<T: Scalar>(&self, image: &[T], out: &mut [T]) {
        let (h, w, c) = (self.height, self.width, self.channels);
        let (ph, pw) = (self.filter_h / 2, self.filter_w / 2);
        let plen = self.patch_len();
        debug_assert_eq!(image.len(), self.image_len());
        debug_assert_eq!(out.len(), self.positions() * plen);
        for i in 0..h {
            for j in 0..w {
                let row = &mut out[(i * w + j) * plen..(i * w + j + 1) * plen];
                let mut off = 0;
                for dx in 0..self.filter_h {
                    let r = i + dx;
                    let in_rows = r >= ph && r - ph < h;
                    for dy in 0..self.filter_w {
                        let col = j + dy;
                        let dst = &mut row[off..off + c];
                        if in_rows && col >= pw && col - pw < w {
                            let src = ((r - ph) * w + (col - pw)) * c;
                            dst.copy_from_slice(&image[src..src + c]);
                        } else {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                        }
                        off += c;
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates patch-matrix entries back
    /// onto the image positions they were read from.
    pub fn col2im_add<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let (h, w, c) = (self.height, self.width, self.channels);
        let (ph, pw) = (self.filter_h / 2, self.filter_w / 2);
        let plen = self.patch_len();
        debug_assert_eq!(image.len(), self.image_len());
        for i in 0..h {
            for j in 0..w {
                let row = &cols[(i * w + j) * plen..(i * w + j + 1) * plen];
                let mut off = 0;
                for dx in 0..self.filter_h {
                    let r = i + dx;
                    let in_rows = r >= ph && r - ph < h;
                    for dy in 0..self.filter_w {
                        let col = j + dy;
                        if in_rows && col >= pw && col - pw < w {
                            let dst = ((r - ph) * w + (col - pw)) * c;
                            for (d, &s) in image[dst..dst + c].iter_mut().zip(&row[off..off + c]) {
                                *d += s;
                            }
                        }
                        off += c;
                    }
                }
            }
        }
    }
}

/// Extracts the SAME-padded, stride-1 patch matrix of every example in an
/// `N×H×W×C` batch.
pub fn extract_patches<T: Scalar>(input: &Tensor<T>, filter_h: usize, filter_w: usize) -> Result<Vec<PatchMatrix<T>>> {
    let [n, h, w, c] = input.dims4("extract_patches input")?;
    let geom = PatchGeometry::new(h, w, c, filter_h, filter_w)?;
    let (rows, cols) = (geom.positions(), geom.patch_len());
    let img = geom.image_len();
    Ok((0..n)
        .map(|b| {
            let mut data = vec![T::zero(); rows * cols];
            geom.im2col(&input.data()[b * img..(b + 1) * img], &mut data);
            PatchMatrix { rows, cols, data }
        })
        .collect())
}
