use alloc::vec::Vec;

use rand::Rng;

use super::basis::{mix_backward, mix_forward, FilterBasis};
use super::weights::{combine_logits, normalize_weights, softmax_backward, CombiningWeights, WeightMode};
use crate::error::{config_err, shape_err, Result};
use crate::layers::{LocalLayer, SpatialBias};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Params;

/// Extents of an LRLC layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LrlcSpec {
    pub height: usize,
    pub width: usize,
    pub rank: usize,
    pub filter_h: usize,
    pub filter_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub mode: WeightMode,
}

impl LrlcSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(config_err!("spatial rank must be at least 1"));
        }
        if self.rank > self.height * self.width {
            return Err(config_err!("spatial rank {} exceeds H·W = {}", self.rank, self.height * self.width));
        }
        if self.filter_h % 2 == 0 || self.filter_w % 2 == 0 {
            return Err(config_err!("filter size must be odd, got {}x{}", self.filter_h, self.filter_w));
        }
        if self.height == 0 || self.width == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(config_err!("extents must be positive: {:?}", self));
        }
        Ok(())
    }
}

/// LRLC layer with learned, input-independent combining weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LrlcLayer<T> {
    pub basis: FilterBasis<T>,
    pub weights: CombiningWeights<T>,
    pub bias: SpatialBias<T>,
}

/// State kept from a training forward pass.
#[derive(Debug, Clone)]
pub struct LrlcCache<T> {
    weights: Tensor<T>,
    responses: Vec<T>,
}

impl<T: Scalar> LrlcLayer<T> {
    pub fn new(basis: FilterBasis<T>, weights: CombiningWeights<T>, bias: SpatialBias<T>) -> Result<Self> {
        let (k, _, _, _, cout) = basis.extents();
        let (wk, h, w) = weights.extents();
        if wk != k {
            return Err(shape_err!("combining weights have rank {}, basis has {}", wk, k));
        }
        if bias.extents() != (h, w, cout) {
            return Err(shape_err!("bias {:?} does not match layer {}x{}x{}", bias.extents(), h, w, cout));
        }
        Ok(LrlcLayer { basis, weights, bias })
    }

    pub fn zeros(spec: &LrlcSpec) -> Result<Self> {
        spec.validate()?;
        Ok(LrlcLayer {
            basis: FilterBasis::zeros(spec.rank, spec.filter_h, spec.filter_w, spec.in_channels, spec.out_channels),
            weights: CombiningWeights::constant(spec.mode, spec.rank, spec.height, spec.width, 0.0),
            bias: SpatialBias::zeros(spec.height, spec.width, spec.out_channels),
        })
    }

    /// A freshly initialized layer (see [`init_structured`]).
    pub fn init<R: Rng + ?Sized>(spec: &LrlcSpec, rng: &mut R) -> Result<Self> {
        Ok(init_structured(Self::zeros(spec)?, rng))
    }

    pub fn spec(&self) -> LrlcSpec {
        let (rank, filter_h, filter_w, in_channels, out_channels) = self.basis.extents();
        let (_, height, width) = self.weights.extents();
        LrlcSpec { height, width, rank, filter_h, filter_w, in_channels, out_channels, mode: self.weights.mode() }
    }

    /// Post-softmax weights, `H×W×K`.
    pub fn normalized_weights(&self) -> Result<Tensor<T>> {
        let (_, h, w) = self.weights.extents();
        Ok(normalize_weights(&combine_logits(&self.weights, h, w)?))
    }

    fn check_extent(&self, input: &Tensor<T>) -> Result<()> {
        let [_, h, w, _] = input.dims4("lrlc input")?;
        let (_, lh, lw) = self.weights.extents();
        if (h, w) != (lh, lw) {
            return Err(shape_err!("lrlc layer bound to {}x{}, input is {}x{}", lh, lw, h, w));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_extent(input)?;
        let w = self.normalized_weights()?;
        let (mut out, _) = mix_forward(&self.basis, input, &w, false)?;
        self.bias.add_to(&mut out)?;
        Ok(out)
    }

    pub fn forward_train(&self, input: &Tensor<T>) -> Result<(Tensor<T>, LrlcCache<T>)> {
        self.check_extent(input)?;
        let weights = self.normalized_weights()?;
        let (mut out, responses) = mix_forward(&self.basis, input, &weights, true)?;
        self.bias.add_to(&mut out)?;
        Ok((out, LrlcCache { weights, responses: responses.unwrap_or_default() }))
    }

    pub fn backward_cached(
        &self,
        input: &Tensor<T>,
        cache: &LrlcCache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Self)> {
        self.check_extent(input)?;
        let (grad_in, basis, gw) = mix_backward(&self.basis, input, &cache.weights, Some(&cache.responses), grad_out)?;
        let weights = self.weights.logit_grad(&softmax_backward(&cache.weights, &gw)?)?;
        let bias = self.bias.backward(grad_out)?;
        Ok((grad_in, LrlcLayer { basis, weights, bias }))
    }

    /// Backward without a cache; recomputes the per-bank responses.
    pub fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        self.check_extent(input)?;
        let w = self.normalized_weights()?;
        let (grad_in, basis, gw) = mix_backward(&self.basis, input, &w, None, grad_out)?;
        let weights = self.weights.logit_grad(&softmax_backward(&w, &gw)?)?;
        let bias = self.bias.backward(grad_out)?;
        Ok((grad_in, LrlcLayer { basis, weights, bias }))
    }

    /// Materializes `F^(i,j) = Σ_k w[i,j,k]·F^(k)` for inference.
    pub fn lower_to_local(&self) -> Result<LoweredLrlc<T>> {
        let w = self.normalized_weights()?;
        Ok(LoweredLrlc { local: lower_weights(&self.basis, &w)?, bias: self.bias.clone() })
    }
}

/// Builds the locally connected layer (zero bias) for an `H×W×K` weight table.
pub fn lower_weights<T: Scalar>(basis: &FilterBasis<T>, weights: &Tensor<T>) -> Result<LocalLayer<T>> {
    let (k, fh, fw, cin, cout) = basis.extents();
    let (h, w) = match weights.shape() {
        [h, w, wk] if *wk == k => (*h, *w),
        s => return Err(shape_err!("weights {:?} do not match basis rank {}", s, k)),
    };
    let bank_len = fh * fw * cin * cout;
    let mut filters = Vec::with_capacity(h * w * bank_len);
    for coeffs in weights.data().chunks_exact(k) {
        filters.extend_from_slice(basis.combine(coeffs).data());
    }
    LocalLayer::new(Tensor::from_vec(&[h, w, fh, fw, cin, cout], filters)?, Tensor::zeros(&[cout]))
}

/// Sets every logit to `1/√K` (uniform mixing), draws fresh banks and zeroes the biases.
pub fn init_structured<T: Scalar, R: Rng + ?Sized>(layer: LrlcLayer<T>, rng: &mut R) -> LrlcLayer<T> {
    let (k, fh, fw, cin, cout) = layer.basis.extents();
    let (_, h, w) = layer.weights.extents();
    let c = 1.0 / libm::sqrt(k as f64);
    LrlcLayer {
        basis: FilterBasis::init(k, fh, fw, cin, cout, rng),
        weights: CombiningWeights::constant(layer.weights.mode(), k, h, w, c),
        bias: SpatialBias::zeros(h, w, cout),
    }
}

impl<T> Params<T> for LrlcLayer<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = alloc::vec![&self.basis.banks];
        v.extend(self.weights.params());
        v.extend(self.bias.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = alloc::vec![&mut self.basis.banks];
        v.extend(self.weights.params_mut());
        v.extend(self.bias.params_mut());
        v
    }
}

/// Inference form of an LRLC layer: a locally connected layer plus the spatial bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LoweredLrlc<T> {
    pub local: LocalLayer<T>,
    pub bias: SpatialBias<T>,
}

impl<T: Scalar> LoweredLrlc<T> {
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = self.local.forward(input)?;
        self.bias.add_to(&mut out)?;
        Ok(out)
    }
}

impl<T> Params<T> for LoweredLrlc<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = self.local.params();
        v.extend(self.bias.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.local.params_mut();
        v.extend(self.bias.params_mut());
        v
    }
}
