//! Loss, Adam and the warmup + cosine learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Params;

/// Mean softmax cross-entropy of `N×classes` logits; returns the loss and its
/// gradient w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (n, classes) = match logits.shape() {
        [n, c] => (*n, *c),
        s => return Err(shape_err!("logits must be N×classes, got {:?}", s)),
    };
    if labels.len() != n {
        return Err(shape_err!("{} labels for {} logit rows", labels.len(), n));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::Data(format!("label {l} of example {i} is outside 0..{classes}")));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    let inv_n = 1.0 / n.max(1) as f64;
    for ((row, g), &label) in
        logits.data().chunks_exact(classes).zip(grad.data_mut().chunks_exact_mut(classes)).zip(labels)
    {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.as_f64()));
        let mut s = 0.0;
        for (gv, &z) in g.iter_mut().zip(row) {
            let e = libm::exp(z.as_f64() - m);
            *gv = T::cast(e);
            s += e;
        }
        loss += libm::log(s) + m - row[label].as_f64();
        for (k, gv) in g.iter_mut().enumerate() {
            let p = gv.as_f64() / s;
            *gv = T::cast((p - if k == label { 1.0 } else { 0.0 }) * inv_n);
        }
    }
    Ok((loss * inv_n, grad))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Moment estimates for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P: Params<T> + ?Sized>(params: &P) -> Self {
        let zeros = || params.params().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState { m: zeros(), v: zeros(), step: 0, beta1: ADAM_BETA1, beta2: ADAM_BETA2, epsilon: ADAM_EPSILON }
    }

    /// One bias-corrected update. Nothing is modified when any gradient is non-finite.
    pub fn apply<P: Params<T> + ?Sized, G: Params<T> + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &G,
        rate: f64,
    ) -> Result<()> {
        let grads = grads.params();
        let mut params = params.params_mut();
        if grads.len() != params.len() || params.len() != self.m.len() {
            return Err(shape_err!("{} parameters, {} gradients, {} moments", params.len(), grads.len(), self.m.len()));
        }
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(shape_err!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - libm::pow(b1, self.step as f64);
        let c2 = 1.0 - libm::pow(b2, self.step as f64);
        let (tb1, tb2, teps) = (T::cast(b1), T::cast(b2), T::cast(self.epsilon));
        let (ob1, ob2) = (T::cast(1.0 - b1), T::cast(1.0 - b2));
        let step_size = T::cast(rate / c1);
        let inv_c2 = T::cast(1.0 / c2);
        for ((p, g), (m, v)) in params.iter_mut().zip(&grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                *mv = tb1 * *mv + ob1 * gv;
                *vv = tb2 * *vv + ob2 * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_c2).sqrt() + teps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::apply`].
pub fn adam_step<T: Scalar, P: Params<T> + ?Sized, G: Params<T> + ?Sized>(
    state: &mut AdamState<T>,
    params: &mut P,
    grads: &G,
    rate: f64,
) -> Result<()> {
    state.apply(params, grads, rate)
}

/// Linear warmup to `peak`, then cosine decay reaching 0 on the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak: f64,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn rate(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.peak * step as f64 / warm as f64;
        }
        let span = self.total_steps().saturating_sub(1 + warm).max(1);
        let t = ((step - warm) as f64 / span as f64).min(1.0);
        self.peak * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
    }
}

pub fn schedule_rate(schedule: &Schedule, step: usize) -> f64 {
    schedule.rate(step)
}
