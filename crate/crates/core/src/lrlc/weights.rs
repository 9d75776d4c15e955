use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Params;

/// Whether combining logits are stored as row/column factors or as a full table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    #[default]
    Factorized,
    Full,
}

/// Pre-softmax combining weights `w̃`.
#[derive(Debug, Clone, PartialEq)]
pub enum CombiningWeights<T> {
    /// `w̃[i,j,k] = alpha[k,i] + beta[k,j]`; `alpha` is `K×H`, `beta` is `K×W`.
    Factorized { alpha: Tensor<T>, beta: Tensor<T> },
    /// `H×W×K` logits stored directly.
    Full { logits: Tensor<T> },
}

impl<T: Scalar> CombiningWeights<T> {
    pub fn factorized(alpha: Tensor<T>, beta: Tensor<T>) -> Result<Self> {
        match (alpha.shape(), beta.shape()) {
            ([ka, _], [kb, _]) if ka == kb => Ok(CombiningWeights::Factorized { alpha, beta }),
            (a, b) => Err(shape_err!("alpha {:?} and beta {:?} must be K×H and K×W", a, b)),
        }
    }

    pub fn full(logits: Tensor<T>) -> Result<Self> {
        if logits.ndim() != 3 {
            return Err(shape_err!("full logits must be H×W×K, got {:?}", logits.shape()));
        }
        Ok(CombiningWeights::Full { logits })
    }

    /// Every logit equal to `value`.
    pub fn constant(mode: WeightMode, k: usize, h: usize, w: usize, value: f64) -> Self {
        match mode {
            WeightMode::Factorized => CombiningWeights::Factorized {
                alpha: Tensor::full(&[k, h], T::cast(value / 2.0)),
                beta: Tensor::full(&[k, w], T::cast(value / 2.0)),
            },
            WeightMode::Full => CombiningWeights::Full { logits: Tensor::full(&[h, w, k], T::cast(value)) },
        }
    }

    pub fn mode(&self) -> WeightMode {
        match self {
            CombiningWeights::Factorized { .. } => WeightMode::Factorized,
            CombiningWeights::Full { .. } => WeightMode::Full,
        }
    }

    /// `(K, H, W)`.
    pub fn extents(&self) -> (usize, usize, usize) {
        match self {
            CombiningWeights::Factorized { alpha, beta } => (alpha.dim(0), alpha.dim(1), beta.dim(1)),
            CombiningWeights::Full { logits } => (logits.dim(2), logits.dim(0), logits.dim(1)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            CombiningWeights::Factorized { alpha, beta } => {
                CombiningWeights::Factorized { alpha: Tensor::zeros(alpha.shape()), beta: Tensor::zeros(beta.shape()) }
            }
            CombiningWeights::Full { logits } => CombiningWeights::Full { logits: Tensor::zeros(logits.shape()) },
        }
    }

    /// Pulls a gradient w.r.t. the `H×W×K` logit table back to the stored parameters.
    pub fn logit_grad(&self, grad_logits: &Tensor<T>) -> Result<Self> {
        let (k, h, w) = self.extents();
        grad_logits.expect_shape(&[h, w, k], "logit gradient")?;
        Ok(match self {
            CombiningWeights::Factorized { .. } => {
                let mut da = Tensor::zeros(&[k, h]);
                let mut db = Tensor::zeros(&[k, w]);
                for i in 0..h {
                    for j in 0..w {
                        for kk in 0..k {
                            let g = grad_logits.data()[(i * w + j) * k + kk];
                            da.data_mut()[kk * h + i] += g;
                            db.data_mut()[kk * w + j] += g;
                        }
                    }
                }
                CombiningWeights::Factorized { alpha: da, beta: db }
            }
            CombiningWeights::Full { .. } => CombiningWeights::Full { logits: grad_logits.clone() },
        })
    }
}

impl<T> Params<T> for CombiningWeights<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            CombiningWeights::Factorized { alpha, beta } => vec![alpha, beta],
            CombiningWeights::Full { logits } => vec![logits],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            CombiningWeights::Factorized { alpha, beta } => vec![alpha, beta],
            CombiningWeights::Full { logits } => vec![logits],
        }
    }
}

/// The `H×W×K` logit table.
pub fn combine_logits<T: Scalar>(weights: &CombiningWeights<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (k, wh, ww) = weights.extents();
    if (wh, ww) != (h, w) {
        return Err(shape_err!("combining weights are {}x{}, layer is {}x{}", wh, ww, h, w));
    }
    if k == 0 {
        return Err(config_err!("spatial rank must be at least 1"));
    }
    Ok(match weights {
        CombiningWeights::Factorized { alpha, beta } => Tensor::from_fn(&[h, w, k], |idx| {
            let (i, j, kk) = (idx / (w * k), (idx / k) % w, idx % k);
            alpha.data()[kk * h + i] + beta.data()[kk * w + j]
        }),
        CombiningWeights::Full { logits } => logits.clone(),
    })
}

/// Softmax over the last axis, with max-subtraction.
pub fn normalize_weights<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = *logits.shape().last().unwrap_or(&1);
    let mut out = logits.clone();
    if k == 0 {
        return out;
    }
    for row in out.data_mut().chunks_exact_mut(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Gradient of the logits given the softmax output and the gradient w.r.t. it.
pub fn softmax_backward<T: Scalar>(weights: &Tensor<T>, grad_weights: &Tensor<T>) -> Result<Tensor<T>> {
    grad_weights.expect_shape(weights.shape(), "softmax gradient")?;
    let k = *weights.shape().last().unwrap_or(&1);
    let mut out = Tensor::zeros(weights.shape());
    for ((o, w), g) in
        out.data_mut().chunks_exact_mut(k).zip(weights.data().chunks_exact(k)).zip(grad_weights.data().chunks_exact(k))
    {
        let dot: T = w.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for kk in 0..k {
            o[kk] = w[kk] * (g[kk] - dot);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::testutil::rng;

    #[test]
    fn constant_factors_give_constant_table() {
        let cw = CombiningWeights::factorized(Tensor::<f64>::full(&[3, 4], 1.0), Tensor::full(&[3, 5], 2.0)).unwrap();
        let t = combine_logits(&cw, 4, 5).unwrap();
        assert_eq!(t.shape(), &[4, 5, 3]);
        assert!(t.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn additive_table() {
        let cw = CombiningWeights::factorized(
            Tensor::<f64>::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap(),
            Tensor::from_vec(&[1, 2], vec![0.0, 10.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(combine_logits(&cw, 2, 2).unwrap().data(), &[0.0, 10.0, 1.0, 11.0]);
    }

    #[test]
    fn column_differences_do_not_depend_on_row() {
        let mut r = rng(81);
        let (k, h, w) = (3, 5, 4);
        let cw = CombiningWeights::factorized(
            Tensor::<f64>::uniform(&[k, h], -1.0, 1.0, &mut r),
            Tensor::uniform(&[k, w], -1.0, 1.0, &mut r),
        )
        .unwrap();
        let t = combine_logits(&cw, h, w).unwrap();
        let at = |i: usize, j: usize, kk: usize| t.data()[(i * w + j) * k + kk];
        for kk in 0..k {
            for j in 0..w {
                let d0 = at(0, j, kk) - at(0, 0, kk);
                for i in 1..h {
                    assert!((at(i, j, kk) - at(i, 0, kk) - d0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn extent_mismatch_is_shape_error() {
        let cw = CombiningWeights::<f64>::constant(WeightMode::Factorized, 2, 3, 3, 1.0);
        assert!(matches!(combine_logits(&cw, 3, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let w = normalize_weights(&Tensor::<f64>::from_vec(&[2], vec![0.7, 0.7]).unwrap());
        assert_eq!(w.data(), &[0.5, 0.5]);
        let w = normalize_weights(&Tensor::<f64>::from_vec(&[2], vec![core::f64::consts::LN_2, 0.0]).unwrap());
        assert!((w.data()[0] - 2.0 / 3.0).abs() < 1e-15 && (w.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        for logit in [-1e6, -3.0, 0.0, 42.0, 1e300] {
            let w = normalize_weights(&Tensor::<f64>::from_vec(&[1, 1, 1], vec![logit]).unwrap());
            assert_eq!(w.data(), &[1.0]);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let w = normalize_weights(&Tensor::<f32>::from_vec(&[3], vec![1e30, 1e30, -1e30]).unwrap());
        assert!(w.is_finite());
        assert!((w.data()[0] - 0.5).abs() < 1e-6);
    }
}
