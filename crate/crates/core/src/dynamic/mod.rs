//! Input-dependent combining weights.
//!
//! [`DynamicWeightNet`] maps a layer input to `N×H×W×K` logits: a 1×1
//! projection, parallel multi-scale branches (average pool, dilated depthwise
//! 3×3, bilinear resize back), channel concatenation, a ReLU bottleneck, a ReLU
//! expansion and a linear head. [`DynamicLrlcLayer`] mixes its basis with the
//! softmax of those logits, separately for every example.

mod ops;

pub use ops::{
    avg_pool, avg_pool_backward, bilinear_resize, bilinear_resize_backward, depthwise_conv, depthwise_conv_backward,
};

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{config_err, shape_err, Result};
use crate::layers::{he_bound, relu, relu_backward, Dense, SpatialBias};
use crate::lrlc::{
    lower_weights, mix_backward, mix_forward, normalize_weights, softmax_backward, FilterBasis, LoweredLrlc,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Params;

/// One multi-scale branch: pool window and depthwise dilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSpec {
    pub pool: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DynamicNetConfig {
    pub projection: usize,
    pub branches: Vec<BranchSpec>,
    pub bottleneck: usize,
    pub expansion: usize,
}

impl Default for DynamicNetConfig {
    fn default() -> Self {
        DynamicNetConfig {
            projection: 8,
            branches: [1, 2, 4].iter().map(|&s| BranchSpec { pool: s, dilation: s }).collect(),
            bottleneck: 8,
            expansion: 32,
        }
    }
}

impl DynamicNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.projection == 0 || self.bottleneck == 0 || self.expansion == 0 {
            return Err(config_err!("dynamic net widths must be positive: {:?}", self));
        }
        if self.branches.is_empty() {
            return Err(config_err!("dynamic net needs at least one branch"));
        }
        if self.branches.iter().any(|b| b.pool == 0 || b.dilation == 0) {
            return Err(config_err!("branch pool window and dilation must be positive: {:?}", self.branches));
        }
        Ok(())
    }

    /// Multiply-accumulates of one forward pass for an `h×w×cin` input and rank `k`.
    pub fn macs(&self, h: usize, w: usize, cin: usize, k: usize) -> u64 {
        let hw = (h * w) as u64;
        let p = self.projection as u64;
        let mut macs = hw * cin as u64 * p;
        for b in &self.branches {
            macs += (h.div_ceil(b.pool) * w.div_ceil(b.pool)) as u64 * 9 * p;
        }
        macs += hw * p * self.branches.len() as u64 * self.bottleneck as u64;
        macs += hw * self.bottleneck as u64 * self.expansion as u64;
        macs + hw * self.expansion as u64 * k as u64
    }

    /// Non-MAC arithmetic: pooling adds, resize blends, ReLUs.
    pub fn elementwise_ops(&self, h: usize, w: usize) -> u64 {
        let hw = (h * w) as u64;
        let p = self.projection as u64;
        let mut ops = 0;
        for b in &self.branches {
            if b.pool > 1 {
                ops += hw * p;
            }
            ops += hw * p * 4;
        }
        ops + hw * (self.bottleneck + self.expansion) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch<T> {
    pub spec: BranchSpec,
    /// `3×3×P`.
    pub filters: Tensor<T>,
    pub bias: Tensor<T>,
}

/// The weight-prediction network `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicWeightNet<T> {
    pub projection: Dense<T>,
    pub branches: Vec<Branch<T>>,
    pub bottleneck: Dense<T>,
    pub expansion: Dense<T>,
    pub head: Dense<T>,
}

/// Intermediate activations of [`DynamicWeightNet::predict_logits_train`].
#[derive(Debug, Clone)]
pub struct NetCache<T> {
    projected: Tensor<T>,
    pooled: Vec<Tensor<T>>,
    filtered_shapes: Vec<Vec<usize>>,
    concat: Tensor<T>,
    bottleneck_pre: Tensor<T>,
    bottleneck: Tensor<T>,
    expansion_pre: Tensor<T>,
    expansion: Tensor<T>,
}

impl<T: Scalar> DynamicWeightNet<T> {
    /// Fan-in-scaled hidden layers and a zero head, so a new layer starts at
    /// uniform mixing.
    pub fn init<R: Rng + ?Sized>(config: &DynamicNetConfig, cin: usize, k: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let p = config.projection;
        let cat = p * config.branches.len();
        let db = config.bottleneck;
        let de = config.expansion;
        Ok(DynamicWeightNet {
            projection: Dense::init(cin, p, he_bound(cin), rng),
            branches: config
                .branches
                .iter()
                .map(|&spec| Branch {
                    spec,
                    filters: Tensor::uniform(&[3, 3, p], -he_bound(9), he_bound(9), rng),
                    bias: Tensor::zeros(&[p]),
                })
                .collect(),
            bottleneck: Dense::init(cat, db, he_bound(cat), rng),
            expansion: Dense::init(db, de, he_bound(db), rng),
            head: Dense::zeros(de, k),
        })
    }

    pub fn config(&self) -> DynamicNetConfig {
        DynamicNetConfig {
            projection: self.projection.out_features(),
            branches: self.branches.iter().map(|b| b.spec).collect(),
            bottleneck: self.bottleneck.out_features(),
            expansion: self.expansion.out_features(),
        }
    }

    pub fn rank(&self) -> usize {
        self.head.out_features()
    }

    pub fn in_channels(&self) -> usize {
        self.projection.in_features()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.params_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn predict_logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.predict_logits_train(input)?.0)
    }

    pub fn predict_logits_train(&self, input: &Tensor<T>) -> Result<(Tensor<T>, NetCache<T>)> {
        let [n, h, w, c] = input.dims4("weight net input")?;
        if c != self.in_channels() {
            return Err(shape_err!("weight net expects {} channels, got {}", self.in_channels(), c));
        }
        let projected = self.projection.forward(input)?;
        let p = projected.dim(3);
        let nb = self.branches.len();
        let mut pooled = Vec::with_capacity(nb);
        let mut filtered_shapes = Vec::with_capacity(nb);
        let mut concat = Tensor::zeros(&[n, h, w, p * nb]);
        for (bi, br) in self.branches.iter().enumerate() {
            let pl = avg_pool(&projected, br.spec.pool)?;
            let f = depthwise_conv(&pl, &br.filters, &br.bias, br.spec.dilation)?;
            let up = bilinear_resize(&f, h, w)?;
            for (dst, src) in concat.data_mut().chunks_exact_mut(p * nb).zip(up.data().chunks_exact(p)) {
                dst[bi * p..(bi + 1) * p].copy_from_slice(src);
            }
            filtered_shapes.push(f.shape().to_vec());
            pooled.push(pl);
        }
        let bottleneck_pre = self.bottleneck.forward(&concat)?;
        let bottleneck = relu(&bottleneck_pre);
        let expansion_pre = self.expansion.forward(&bottleneck)?;
        let expansion = relu(&expansion_pre);
        let logits = self.head.forward(&expansion)?;
        let cache = NetCache {
            projected,
            pooled,
            filtered_shapes,
            concat,
            bottleneck_pre,
            bottleneck,
            expansion_pre,
            expansion,
        };
        Ok((logits, cache))
    }

    /// Returns the input gradient and the parameter gradients.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        cache: &NetCache<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<(Tensor<T>, Self)> {
        let mut g = self.zeros_like();
        let (d_exp, head) = self.head.backward(&cache.expansion, grad_logits)?;
        g.head = head;
        let d_exp_pre = relu_backward(&cache.expansion_pre, &d_exp)?;
        let (d_bot, expansion) = self.expansion.backward(&cache.bottleneck, &d_exp_pre)?;
        g.expansion = expansion;
        let d_bot_pre = relu_backward(&cache.bottleneck_pre, &d_bot)?;
        let (d_cat, bottleneck) = self.bottleneck.backward(&cache.concat, &d_bot_pre)?;
        g.bottleneck = bottleneck;

        let p = cache.projected.dim(3);
        let nb = self.branches.len();
        let [n, h, w, _] = cache.projected.dims4("projection")?;
        let mut d_proj = Tensor::zeros(cache.projected.shape());
        for (bi, br) in self.branches.iter().enumerate() {
            let mut d_up = Tensor::zeros(&[n, h, w, p]);
            for (dst, src) in d_up.data_mut().chunks_exact_mut(p).zip(d_cat.data().chunks_exact(p * nb)) {
                dst.copy_from_slice(&src[bi * p..(bi + 1) * p]);
            }
            let d_f = bilinear_resize_backward(&cache.filtered_shapes[bi], &d_up)?;
            let (d_pl, gf, gb) = depthwise_conv_backward(&cache.pooled[bi], &br.filters, br.spec.dilation, &d_f)?;
            g.branches[bi].filters = gf;
            g.branches[bi].bias = gb;
            d_proj.axpy(T::one(), &avg_pool_backward(cache.projected.shape(), br.spec.pool, &d_pl)?)?;
        }
        let (d_in, projection) = self.projection.backward(input, &d_proj)?;
        g.projection = projection;
        Ok((d_in, g))
    }
}

impl<T> Params<T> for DynamicWeightNet<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = self.projection.params();
        for b in &self.branches {
            v.push(&b.filters);
            v.push(&b.bias);
        }
        v.extend(self.bottleneck.params());
        v.extend(self.expansion.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.projection.params_mut();
        for b in &mut self.branches {
            v.push(&mut b.filters);
            v.push(&mut b.bias);
        }
        v.extend(self.bottleneck.params_mut());
        v.extend(self.expansion.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

/// LRLC layer whose combining weights are predicted from its input.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicLrlcLayer<T> {
    pub basis: FilterBasis<T>,
    pub net: DynamicWeightNet<T>,
    pub bias: SpatialBias<T>,
}

#[derive(Debug, Clone)]
pub struct DynamicCache<T> {
    net: NetCache<T>,
    weights: Tensor<T>,
    responses: Vec<T>,
}

impl<T: Scalar> DynamicLrlcLayer<T> {
    pub fn new(basis: FilterBasis<T>, net: DynamicWeightNet<T>, bias: SpatialBias<T>) -> Result<Self> {
        let (k, _, _, cin, cout) = basis.extents();
        if net.rank() != k {
            return Err(shape_err!("weight net predicts rank {}, basis has {}", net.rank(), k));
        }
        if net.in_channels() != cin {
            return Err(shape_err!("weight net reads {} channels, basis {}", net.in_channels(), cin));
        }
        if bias.extents().2 != cout {
            return Err(shape_err!("bias has {} channels, basis {}", bias.extents().2, cout));
        }
        Ok(DynamicLrlcLayer { basis, net, bias })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        h: usize,
        w: usize,
        k: usize,
        fh: usize,
        fw: usize,
        cin: usize,
        cout: usize,
        config: &DynamicNetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(config_err!("spatial rank must be at least 1"));
        }
        let basis = FilterBasis::init(k, fh, fw, cin, cout, rng);
        let net = DynamicWeightNet::init(config, cin, k, rng)?;
        Self::new(basis, net, SpatialBias::zeros(h, w, cout))
    }

    fn check_extent(&self, input: &Tensor<T>) -> Result<()> {
        let [_, h, w, _] = input.dims4("dynamic lrlc input")?;
        let (bh, bw, _) = self.bias.extents();
        if (h, w) != (bh, bw) {
            return Err(shape_err!("dynamic layer bound to {}x{}, input is {}x{}", bh, bw, h, w));
        }
        Ok(())
    }

    /// Post-softmax weights per example, `N×H×W×K`.
    pub fn normalized_weights(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(normalize_weights(&self.net.predict_logits(input)?))
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_extent(input)?;
        let w = self.normalized_weights(input)?;
        let (mut out, _) = mix_forward(&self.basis, input, &w, false)?;
        self.bias.add_to(&mut out)?;
        Ok(out)
    }

    pub fn forward_train(&self, input: &Tensor<T>) -> Result<(Tensor<T>, DynamicCache<T>)> {
        self.check_extent(input)?;
        let (logits, net) = self.net.predict_logits_train(input)?;
        let weights = normalize_weights(&logits);
        let (mut out, responses) = mix_forward(&self.basis, input, &weights, true)?;
        self.bias.add_to(&mut out)?;
        Ok((out, DynamicCache { net, weights, responses: responses.unwrap_or_default() }))
    }

    pub fn backward_cached(
        &self,
        input: &Tensor<T>,
        cache: &DynamicCache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Self)> {
        let (mut grad_in, basis, gw) =
            mix_backward(&self.basis, input, &cache.weights, Some(&cache.responses), grad_out)?;
        let d_logits = softmax_backward(&cache.weights, &gw)?;
        let (d_in_net, net) = self.net.backward(input, &cache.net, &d_logits)?;
        grad_in.axpy(T::one(), &d_in_net)?;
        let bias = self.bias.backward(grad_out)?;
        Ok((grad_in, DynamicLrlcLayer { basis, net, bias }))
    }

    pub fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let (_, cache) = self.forward_train(input)?;
        self.backward_cached(input, &cache, grad_out)
    }

    /// The locally connected layer this input induces, one per example.
    pub fn lower_for(&self, input: &Tensor<T>) -> Result<Vec<LoweredLrlc<T>>> {
        self.check_extent(input)?;
        let w = self.normalized_weights(input)?;
        let per: usize = w.shape()[1..].iter().product();
        w.data()
            .chunks_exact(per)
            .map(|wn| {
                let table = Tensor::from_vec(&w.shape()[1..], wn.to_vec())?;
                Ok(LoweredLrlc { local: lower_weights(&self.basis, &table)?, bias: self.bias.clone() })
            })
            .collect()
    }
}

impl<T> Params<T> for DynamicLrlcLayer<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.basis.banks];
        v.extend(self.net.params());
        v.extend(self.bias.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.basis.banks];
        v.extend(self.net.params_mut());
        v.extend(self.bias.params_mut());
        v
    }
}

pub fn predict_logits<T: Scalar>(net: &DynamicWeightNet<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    net.predict_logits(input)
}

pub fn dynamic_lrlc_forward<T: Scalar>(input: &Tensor<T>, layer: &DynamicLrlcLayer<T>) -> Result<Tensor<T>> {
    layer.forward(input)
}
