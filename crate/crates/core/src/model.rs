//! The classification template: a stack of same-size spatial layers, each
//! followed by batch normalization and ReLU, then global average pooling and a
//! dense head. Which positions use which layer kind is declared by a
//! [`ModelSpec`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::dynamic::{DynamicCache, DynamicLrlcLayer, DynamicNetConfig};
use crate::error::{config_err, shape_err, Error, Result};
use crate::layers::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, BatchNorm, BatchNormCache, ConvLayer,
    CoordConvLayer, Dense, LocalLayer,
};
use crate::lrlc::{CombiningWeights, LoweredLrlc, LrlcCache, LrlcLayer, LrlcSpec, WeightMode};
use crate::optim::cross_entropy;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Local,
    CoordConv,
    Lrlc,
    DynamicLrlc,
}

impl LayerKind {
    pub const ALL: [LayerKind; 5] =
        [LayerKind::Conv, LayerKind::Local, LayerKind::CoordConv, LayerKind::Lrlc, LayerKind::DynamicLrlc];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Local => "local",
            LayerKind::CoordConv => "coordconv",
            LayerKind::Lrlc => "lrlc",
            LayerKind::DynamicLrlc => "dynamic_lrlc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the kind carries a spatial rank.
    pub fn ranked(self) -> bool {
        matches!(self, LayerKind::Lrlc | LayerKind::DynamicLrlc)
    }
}

/// Which layers of the stack use the configured kind; the rest are convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    First,
    Second,
    Third,
    All,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::First => "first",
            Placement::Second => "second",
            Placement::Third => "third",
            Placement::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Placement::First, Placement::Second, Placement::Third, Placement::All].into_iter().find(|p| p.name() == s)
    }

    pub fn covers(self, index: usize) -> bool {
        match self {
            Placement::First => index == 0,
            Placement::Second => index == 1,
            Placement::Third => index == 2,
            Placement::All => true,
        }
    }
}

/// One spatial layer of the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub height: usize,
    pub width: usize,
    pub filter_h: usize,
    pub filter_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Meaningful for ranked kinds only.
    pub rank: usize,
    pub mode: WeightMode,
    pub dynamic: DynamicNetConfig,
}

impl LayerSpec {
    pub fn lrlc_spec(&self) -> LrlcSpec {
        LrlcSpec {
            height: self.height,
            width: self.width,
            rank: self.rank,
            filter_h: self.filter_h,
            filter_w: self.filter_w,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            mode: self.mode,
        }
    }
}

/// Declarative description of the whole classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub channels: usize,
    pub depth: usize,
    pub filter: usize,
    pub classes: usize,
    pub kind: LayerKind,
    pub placement: Placement,
    pub rank: Option<usize>,
    pub mode: WeightMode,
    pub dynamic: DynamicNetConfig,
}

impl ModelSpec {
    /// The three-layer, 64-channel, 3×3 template with every layer a convolution.
    pub fn template(height: usize, width: usize, in_channels: usize, classes: usize) -> Self {
        ModelSpec {
            height,
            width,
            in_channels,
            channels: 64,
            depth: 3,
            filter: 3,
            classes,
            kind: LayerKind::Conv,
            placement: Placement::All,
            rank: None,
            mode: WeightMode::Factorized,
            dynamic: DynamicNetConfig::default(),
        }
    }

    pub fn with_kind(mut self, kind: LayerKind, placement: Placement, rank: Option<usize>) -> Self {
        self.kind = kind;
        self.placement = placement;
        self.rank = rank;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        if self.height == 0 || self.width == 0 || self.in_channels == 0 || self.channels == 0 || self.classes == 0 {
            problems.push(format!("extents must be positive: {:?}", self));
        }
        if self.depth == 0 {
            problems.push(String::from("depth must be at least 1"));
        }
        if self.filter % 2 == 0 {
            problems.push(format!("filter size must be odd, got {}", self.filter));
        }
        match (self.kind.ranked(), self.rank) {
            (true, None) => problems.push(format!("kind {} needs a rank", self.kind.name())),
            (false, Some(_)) => problems.push(format!("kind {} takes no rank", self.kind.name())),
            (true, Some(0)) => problems.push(String::from("rank must be at least 1")),
            (true, Some(k)) if k > self.height * self.width => {
                problems.push(format!("rank {k} exceeds H·W = {}", self.height * self.width))
            }
            _ => {}
        }
        if !(0..self.depth).any(|i| self.placement.covers(i)) {
            problems.push(format!("placement {} needs a deeper stack than {}", self.placement.name(), self.depth));
        }
        if self.kind == LayerKind::DynamicLrlc {
            if let Err(e) = self.dynamic.validate() {
                problems.push(format!("{e}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        (0..self.depth)
            .map(|i| LayerSpec {
                kind: if self.placement.covers(i) { self.kind } else { LayerKind::Conv },
                height: self.height,
                width: self.width,
                filter_h: self.filter,
                filter_w: self.filter,
                in_channels: if i == 0 { self.in_channels } else { self.channels },
                out_channels: self.channels,
                rank: self.rank.unwrap_or(1),
                mode: self.mode,
                dynamic: self.dynamic.clone(),
            })
            .collect()
    }
}

/// A spatial layer of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(ConvLayer<T>),
    Local(LocalLayer<T>),
    CoordConv(CoordConvLayer<T>),
    Lrlc(LrlcLayer<T>),
    DynamicLrlc(DynamicLrlcLayer<T>),
    /// Inference form of an LRLC layer.
    Lowered(LoweredLrlc<T>),
}

/// Training-time state a layer keeps for its backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    None,
    Lrlc(LrlcCache<T>),
    Dynamic(DynamicCache<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn init<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Result<Self> {
        let (fh, fw, cin, cout) = (spec.filter_h, spec.filter_w, spec.in_channels, spec.out_channels);
        Ok(match spec.kind {
            LayerKind::Conv => Layer::Conv(ConvLayer::init(fh, fw, cin, cout, rng)),
            LayerKind::Local => Layer::Local(LocalLayer::init(spec.height, spec.width, fh, fw, cin, cout, rng)),
            LayerKind::CoordConv => Layer::CoordConv(CoordConvLayer::init(fh, fw, cin, cout, rng)),
            LayerKind::Lrlc => Layer::Lrlc(LrlcLayer::init(&spec.lrlc_spec(), rng)?),
            LayerKind::DynamicLrlc => Layer::DynamicLrlc(DynamicLrlcLayer::init(
                spec.height,
                spec.width,
                spec.rank,
                fh,
                fw,
                cin,
                cout,
                &spec.dynamic,
                rng,
            )?),
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Local(_) => "local",
            Layer::CoordConv(_) => "coordconv",
            Layer::Lrlc(_) => "lrlc",
            Layer::DynamicLrlc(_) => "dynamic_lrlc",
            Layer::Lowered(_) => "lowered_lrlc",
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::Local(l) => l.forward(x),
            Layer::CoordConv(l) => l.forward(x),
            Layer::Lrlc(l) => l.forward(x),
            Layer::DynamicLrlc(l) => l.forward(x),
            Layer::Lowered(l) => l.forward(x),
        }
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerCache<T>)> {
        Ok(match self {
            Layer::Lrlc(l) => {
                let (y, c) = l.forward_train(x)?;
                (y, LayerCache::Lrlc(c))
            }
            Layer::DynamicLrlc(l) => {
                let (y, c) = l.forward_train(x)?;
                (y, LayerCache::Dynamic(c))
            }
            Layer::Lowered(_) => {
                return Err(Error::Unsupported(String::from("lowered layers are inference-only")));
            }
            other => (other.forward(x)?, LayerCache::None),
        })
    }

    pub fn backward(&self, x: &Tensor<T>, cache: &LayerCache<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        Ok(match (self, cache) {
            (Layer::Conv(l), _) => {
                let (g, p) = l.backward(x, grad)?;
                (g, Layer::Conv(p))
            }
            (Layer::Local(l), _) => {
                let (g, p) = l.backward(x, grad)?;
                (g, Layer::Local(p))
            }
            (Layer::CoordConv(l), _) => {
                let (g, p) = l.backward(x, grad)?;
                (g, Layer::CoordConv(p))
            }
            (Layer::Lrlc(l), LayerCache::Lrlc(c)) => {
                let (g, p) = l.backward_cached(x, c, grad)?;
                (g, Layer::Lrlc(p))
            }
            (Layer::Lrlc(l), _) => {
                let (g, p) = l.backward(x, grad)?;
                (g, Layer::Lrlc(p))
            }
            (Layer::DynamicLrlc(l), LayerCache::Dynamic(c)) => {
                let (g, p) = l.backward_cached(x, c, grad)?;
                (g, Layer::DynamicLrlc(p))
            }
            (Layer::DynamicLrlc(l), _) => {
                let (g, p) = l.backward(x, grad)?;
                (g, Layer::DynamicLrlc(p))
            }
            (Layer::Lowered(_), _) => {
                return Err(Error::Unsupported(String::from("lowered layers are inference-only")));
            }
        })
    }

    /// Stable names of [`Params::params`], in order.
    pub fn param_names(&self) -> Vec<String> {
        let s = |v: &[&str]| v.iter().map(|n| String::from(*n)).collect::<Vec<_>>();
        let bias = ["bias_row", "bias_col", "bias_channel"];
        match self {
            Layer::Conv(_) | Layer::Local(_) | Layer::CoordConv(_) => s(&["filters", "bias"]),
            Layer::Lrlc(l) => {
                let mut v = s(&["basis"]);
                v.extend(match l.weights {
                    CombiningWeights::Factorized { .. } => s(&["alpha", "beta"]),
                    CombiningWeights::Full { .. } => s(&["logits"]),
                });
                v.extend(s(&bias));
                v
            }
            Layer::DynamicLrlc(l) => {
                let mut v = s(&["basis", "g.projection.weight", "g.projection.bias"]);
                for b in 0..l.net.branches.len() {
                    v.push(format!("g.branch{b}.filters"));
                    v.push(format!("g.branch{b}.bias"));
                }
                for part in ["bottleneck", "expansion", "head"] {
                    v.push(format!("g.{part}.weight"));
                    v.push(format!("g.{part}.bias"));
                }
                v.extend(s(&bias));
                v
            }
            Layer::Lowered(_) => {
                let mut v = s(&["local.filters", "local.bias"]);
                v.extend(s(&bias));
                v
            }
        }
    }
}

impl<T> Params<T> for Layer<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv(l) => l.params(),
            Layer::Local(l) => l.params(),
            Layer::CoordConv(l) => l.params(),
            Layer::Lrlc(l) => l.params(),
            Layer::DynamicLrlc(l) => l.params(),
            Layer::Lowered(l) => l.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(l) => l.params_mut(),
            Layer::Local(l) => l.params_mut(),
            Layer::CoordConv(l) => l.params_mut(),
            Layer::Lrlc(l) => l.params_mut(),
            Layer::DynamicLrlc(l) => l.params_mut(),
            Layer::Lowered(l) => l.params_mut(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub layer: Layer<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub blocks: Vec<Block<T>>,
    pub head: Dense<T>,
}

struct Tape<T> {
    input: Tensor<T>,
    cache: LayerCache<T>,
    bn: BatchNormCache<T>,
    activated: Tensor<T>,
}

/// Result of one forward/backward pass over a batch.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: f64,
    pub logits: Tensor<T>,
    /// Gradients, laid out as a model (running statistics are zero).
    pub grads: Model<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let blocks = spec
            .layers()
            .iter()
            .map(|ls| Ok(Block { layer: Layer::init(ls, rng)?, bn: BatchNorm::new(ls.out_channels) }))
            .collect::<Result<Vec<_>>>()?;
        let head = Dense::init(spec.channels, spec.classes, 1.0 / libm::sqrt(spec.channels as f64), rng);
        Ok(Model { spec: spec.clone(), blocks, head })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, h, w, c] = x.dims4("model input")?;
        if (h, w, c) != (self.spec.height, self.spec.width, self.spec.in_channels) {
            return Err(shape_err!(
                "model expects {}x{}x{} inputs, got {:?}",
                self.spec.height,
                self.spec.width,
                self.spec.in_channels,
                x.shape()
            ));
        }
        Ok(())
    }

    /// Inference-mode logits (batch normalization uses running statistics).
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.features(x)?;
        h = global_avg_pool(&h)?;
        let logits = self.head.forward(&h)?;
        logits.ensure_finite("logits")?;
        Ok(logits)
    }

    fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for b in &self.blocks {
            h = relu(&b.bn.forward_inference(&b.layer.forward(&h)?)?);
        }
        Ok(h)
    }

    /// Inputs seen by each block in inference mode.
    pub fn block_inputs(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            let next = relu(&b.bn.forward_inference(&b.layer.forward(&h)?)?);
            out.push(h);
            h = next;
        }
        Ok(out)
    }

    /// Forward in training mode, loss, and backward. Updates batch-norm running statistics.
    pub fn train_step(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<StepOutput<T>> {
        self.check_input(x)?;
        let mut tapes = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &mut self.blocks {
            let (y, cache) = b.layer.forward_train(&h)?;
            let (z, bn) = b.bn.forward_train(&y)?;
            let activated = z;
            let next = relu(&activated);
            tapes.push(Tape { input: h, cache, bn, activated });
            h = next;
        }
        let pooled = global_avg_pool(&h)?;
        let logits = self.head.forward(&pooled)?;
        let (loss, d_logits) = cross_entropy(&logits, labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(String::from("training loss")));
        }

        let mut grads = self.zeros_like();
        let (d_pooled, head) = self.head.backward(&pooled, &d_logits)?;
        grads.head = head;
        let mut d = global_avg_pool_backward(h.shape(), &d_pooled)?;
        for (i, tape) in tapes.iter().enumerate().rev() {
            let block = &self.blocks[i];
            d = relu_backward(&tape.activated, &d)?;
            let (d_y, bn) = block.bn.backward(&tape.bn, &d)?;
            grads.blocks[i].bn.gamma = bn.gamma;
            grads.blocks[i].bn.beta = bn.beta;
            let (d_x, layer) = block.layer.backward(&tape.input, &tape.cache, &d_y)?;
            grads.blocks[i].layer = layer;
            d = d_x;
        }
        Ok(StepOutput { loss, logits, grads })
    }

    /// A model with every tensor zeroed and the same structure.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    /// Replaces fixed-weight LRLC layers by their locally connected form.
    pub fn lower(&self) -> Result<Self> {
        let mut out = self.clone();
        for (i, b) in out.blocks.iter_mut().enumerate() {
            match &b.layer {
                Layer::Lrlc(l) => b.layer = Layer::Lowered(l.lower_to_local()?),
                Layer::DynamicLrlc(_) => {
                    return Err(Error::Unsupported(format!(
                        "block {i} is an input-dependent LRLC layer; its per-example filters cannot be materialized ahead of time"
                    )))
                }
                _ => {}
            }
        }
        Ok(out)
    }

    pub fn is_lowered(&self) -> bool {
        self.blocks.iter().any(|b| matches!(b.layer, Layer::Lowered(_)))
    }

    /// Every tensor, trainable or not, with a stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let kind = b.layer.kind_name();
            for (name, t) in b.layer.param_names().into_iter().zip(b.layer.params()) {
                out.push((format!("block{i}.{kind}.{name}"), t));
            }
            for (name, t) in bn_tensors(&b.bn) {
                out.push((format!("block{i}.bn.{name}"), t));
            }
        }
        out.push((String::from("head.weight"), &self.head.weight));
        out.push((String::from("head.bias"), &self.head.bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let kind = b.layer.kind_name();
            let names = b.layer.param_names();
            for (name, t) in names.into_iter().zip(b.layer.params_mut()) {
                out.push((format!("block{i}.{kind}.{name}"), t));
            }
            let bn = &mut b.bn;
            for (name, t) in [
                ("gamma", &mut bn.gamma),
                ("beta", &mut bn.beta),
                ("running_mean", &mut bn.running_mean),
                ("running_var", &mut bn.running_var),
            ] {
                out.push((format!("block{i}.bn.{name}"), t));
            }
        }
        out.push((String::from("head.weight"), &mut self.head.weight));
        out.push((String::from("head.bias"), &mut self.head.bias));
        out
    }

    /// Overwrites tensors by name; every name must exist with a matching shape.
    pub fn load_named(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut slots = self.named_tensors_mut();
        if tensors.len() != slots.len() {
            return Err(config_err!("model has {} tensors, state has {}", slots.len(), tensors.len()));
        }
        for (name, t) in tensors {
            let slot = slots
                .iter_mut()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| config_err!("state tensor {name} does not belong to this model"))?;
            if slot.1.shape() != t.shape() {
                return Err(shape_err!("{name}: model {:?}, state {:?}", slot.1.shape(), t.shape()));
            }
            *slot.1 = t;
        }
        Ok(())
    }
}

fn bn_tensors<T>(bn: &BatchNorm<T>) -> [(&'static str, &Tensor<T>); 4] {
    [("gamma", &bn.gamma), ("beta", &bn.beta), ("running_mean", &bn.running_mean), ("running_var", &bn.running_var)]
}

impl<T> Params<T> for Model<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend(b.layer.params());
            v.extend(b.bn.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.extend(b.layer.params_mut());
            v.extend(b.bn.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}

/// Fraction of rows whose arg-max equals the label.
pub fn top1<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let c = *logits.shape().last().unwrap_or(&1);
    if logits.numel() != labels.len() * c {
        return Err(shape_err!("{} labels for logits {:?}", labels.len(), logits.shape()));
    }
    let hits = logits.data().chunks_exact(c).zip(labels).filter(|(row, &l)| argmax(row) == l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// First index of the maximum.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter().enumerate().fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}
