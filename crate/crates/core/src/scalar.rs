use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Element type tag, as stored in the tensor container header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Real scalar usable as a tensor element.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + AddAssign + SubAssign + MulAssign + DivAssign + Sum + 'static
{
    const DTYPE: Dtype;

    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c ← alpha·a·b + beta·c` on strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the given extents and strides must be in
    /// bounds for the corresponding pointer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn cast(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn cast(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided view of a matrix stored in a slice.
#[derive(Debug, Clone, Copy)]
pub struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatView {
    /// Dense row-major `rows×cols`.
    pub const fn row_major(rows: usize, cols: usize) -> Self {
        MatView { rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// The transpose of a dense row-major `rows×cols` matrix, viewed as `cols×rows`.
    pub const fn transposed(rows: usize, cols: usize) -> Self {
        MatView { rows: cols, cols: rows, row_stride: 1, col_stride: cols }
    }

    pub const fn with_row_stride(mut self, stride: usize) -> Self {
        self.row_stride = stride;
        self
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

/// Bounds-checked `c ← alpha·a·b + beta·c`.
///
/// Panics if the views disagree in shape or overrun their slices; callers
/// validate shapes at the public API boundary.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(alpha: T, a: &[T], av: MatView, b: &[T], bv: MatView, beta: T, c: &mut [T], cv: MatView) {
    assert_eq!(av.cols, bv.rows, "gemm inner extent");
    assert_eq!(av.rows, cv.rows, "gemm row extent");
    assert_eq!(bv.cols, cv.cols, "gemm column extent");
    assert!(av.span() <= a.len() && bv.span() <= b.len() && cv.span() <= c.len());
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: spans checked above; strides are non-negative.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr(),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr(),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            cv.row_stride as isize,
            cv.col_stride as isize,
        )
    }
}
