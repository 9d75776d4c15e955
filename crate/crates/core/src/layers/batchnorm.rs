use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Params;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the old running statistic in the moving average.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalization over `N×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

/// What the backward pass needs from a training-mode forward.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn check(&self, x: &Tensor<T>) -> Result<usize> {
        let c = *x.shape().last().unwrap_or(&0);
        if x.ndim() < 2 || c != self.channels() {
            return Err(shape_err!("batchnorm over {} channels applied to {:?}", self.channels(), x.shape()));
        }
        Ok(c)
    }

    /// Normalizes with batch statistics and updates the running averages.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let c = self.check(x)?;
        if x.dim(0) < 2 {
            return Err(config_err!("batchnorm in train mode needs a batch of at least 2, got {}", x.dim(0)));
        }
        let m = x.numel() / c;
        let mf = T::cast(m as f64);
        let mut mean = vec![T::zero(); c];
        for px in x.data().chunks_exact(c) {
            for (s, &v) in mean.iter_mut().zip(px) {
                *s += v;
            }
        }
        mean.iter_mut().for_each(|s| *s /= mf);
        let mut var = vec![T::zero(); c];
        for px in x.data().chunks_exact(c) {
            for ((s, &v), &mu) in var.iter_mut().zip(px).zip(&mean) {
                let d = v - mu;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= mf);
        let eps = T::cast(self.epsilon);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut normalized = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for ((npx, opx), px) in normalized
            .data_mut()
            .chunks_exact_mut(c)
            .zip(out.data_mut().chunks_exact_mut(c))
            .zip(x.data().chunks_exact(c))
        {
            for ch in 0..c {
                let xh = (px[ch] - mean[ch]) * inv_std[ch];
                npx[ch] = xh;
                opx[ch] = self.gamma.data()[ch] * xh + self.beta.data()[ch];
            }
        }

        let keep = T::cast(self.momentum);
        let take = T::one() - keep;
        let unbias = T::cast(m as f64 / (m - 1) as f64);
        for ch in 0..c {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = keep * *rm + take * mean[ch];
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = keep * *rv + take * var[ch] * unbias;
        }
        Ok((out, BatchNormCache { normalized, inv_std }))
    }

    /// Normalizes with the running statistics only.
    pub fn forward_inference(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.check(x)?;
        let eps = T::cast(self.epsilon);
        let scale: Vec<T> =
            (0..c).map(|ch| self.gamma.data()[ch] / (self.running_var.data()[ch] + eps).sqrt()).collect();
        let shift: Vec<T> = (0..c).map(|ch| self.beta.data()[ch] - self.running_mean.data()[ch] * scale[ch]).collect();
        let mut out = x.clone();
        for px in out.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = px[ch] * scale[ch] + shift[ch];
            }
        }
        Ok(out)
    }

    /// Gradient through the batch statistics.
    pub fn backward(&self, cache: &BatchNormCache<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, BatchNormGrads<T>)> {
        let c = self.check(grad_out)?;
        grad_out.expect_shape(cache.normalized.shape(), "batchnorm grad_out")?;
        let m = T::cast((grad_out.numel() / c) as f64);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (dy, xh) in grad_out.data().chunks_exact(c).zip(cache.normalized.data().chunks_exact(c)) {
            for ch in 0..c {
                dbeta[ch] += dy[ch];
                dgamma[ch] += dy[ch] * xh[ch];
            }
        }
        let mut grad_in = Tensor::zeros(grad_out.shape());
        for ((dx, dy), xh) in grad_in
            .data_mut()
            .chunks_exact_mut(c)
            .zip(grad_out.data().chunks_exact(c))
            .zip(cache.normalized.data().chunks_exact(c))
        {
            for ch in 0..c {
                let k = self.gamma.data()[ch] * cache.inv_std[ch] / m;
                dx[ch] = k * (m * dy[ch] - dbeta[ch] - xh[ch] * dgamma[ch]);
            }
        }
        let grads = BatchNormGrads { gamma: Tensor::from_vec(&[c], dgamma)?, beta: Tensor::from_vec(&[c], dbeta)? };
        Ok((grad_in, grads))
    }
}

impl<T> Params<T> for BatchNorm<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

impl<T> Params<T> for BatchNormGrads<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
