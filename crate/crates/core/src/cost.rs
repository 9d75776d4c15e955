//! Parameter and arithmetic accounting per example. The arithmetic unit is the
//! multiply-accumulate (MAC); softmax, mixing and bias additions are counted
//! separately as elementwise operations.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::lrlc::WeightMode;
use crate::model::{LayerKind, LayerSpec, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostMode {
    /// The evaluation path used while training (K convolutions for LRLC).
    Train,
    /// Fixed-weight LRLC layers replaced by their locally connected form.
    /// Input-dependent layers cannot be lowered ahead of time and keep their
    /// dynamic cost.
    LoweredInference,
    /// Combining weights predicted per example by the weight network.
    Dynamic,
}

impl CostMode {
    pub fn name(self) -> &'static str {
        match self {
            CostMode::Train => "train",
            CostMode::LoweredInference => "lowered_inference",
            CostMode::Dynamic => "dynamic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [CostMode::Train, CostMode::LoweredInference, CostMode::Dynamic].into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostReport {
    /// Filter parameters: the basis for LRLC layers, the filter bank otherwise.
    pub basis_params: u64,
    /// Combining logits, or the weight network for input-dependent weights.
    pub combining_params: u64,
    pub bias_params: u64,
    /// Everything trained; the sum of the three fields above plus any extras.
    pub trainable_params: u64,
    pub macs: u64,
    pub elementwise_ops: u64,
    /// Scalars stored by the inference form.
    pub inference_params: u64,
    /// `inference_params` at four bytes per scalar.
    pub inference_bytes: u64,
}

impl CostReport {
    fn finish(mut self, inference_params: u64) -> Self {
        self.trainable_params = self.basis_params + self.combining_params + self.bias_params;
        self.inference_params = inference_params;
        self.inference_bytes = 4 * inference_params;
        self
    }
}

impl core::ops::Add for CostReport {
    type Output = CostReport;

    fn add(self, o: CostReport) -> CostReport {
        CostReport {
            basis_params: self.basis_params + o.basis_params,
            combining_params: self.combining_params + o.combining_params,
            bias_params: self.bias_params + o.bias_params,
            trainable_params: self.trainable_params + o.trainable_params,
            macs: self.macs + o.macs,
            elementwise_ops: self.elementwise_ops + o.elementwise_ops,
            inference_params: self.inference_params + o.inference_params,
            inference_bytes: self.inference_bytes + o.inference_bytes,
        }
    }
}

impl core::iter::Sum for CostReport {
    fn sum<I: Iterator<Item = CostReport>>(iter: I) -> CostReport {
        iter.fold(CostReport::default(), |a, b| a + b)
    }
}

fn bank(s: &LayerSpec, cin: usize) -> u64 {
    (s.filter_h * s.filter_w * cin * s.out_channels) as u64
}

fn dynamic_net_params(s: &LayerSpec) -> u64 {
    let c = &s.dynamic;
    let (p, nb) = (c.projection as u64, c.branches.len() as u64);
    let (db, de, k) = (c.bottleneck as u64, c.expansion as u64, s.rank as u64);
    (s.in_channels as u64 + 1) * p + nb * 10 * p + (nb * p + 1) * db + (db + 1) * de + (de + 1) * k
}

/// Trainable parameters with the training-time MACs.
pub fn count_params(spec: &LayerSpec) -> CostReport {
    count_flops(spec, CostMode::Train)
}

pub fn count_flops(spec: &LayerSpec, mode: CostMode) -> CostReport {
    let s = spec;
    let (hw, cout, k) = ((s.height * s.width) as u64, s.out_channels as u64, s.rank as u64);
    let conv = bank(s, s.in_channels);
    let conv_macs = hw * conv;
    let spatial_bias = (s.height + s.width) as u64 + cout;
    match s.kind {
        LayerKind::Conv => CostReport {
            basis_params: conv,
            bias_params: cout,
            macs: conv_macs,
            elementwise_ops: hw * cout,
            ..Default::default()
        }
        .finish(conv + cout),
        LayerKind::Local => CostReport {
            basis_params: hw * conv,
            bias_params: cout,
            macs: conv_macs,
            elementwise_ops: hw * cout,
            ..Default::default()
        }
        .finish(hw * conv + cout),
        LayerKind::CoordConv => {
            let b = bank(s, s.in_channels + 2);
            CostReport {
                basis_params: b,
                bias_params: cout,
                macs: hw * b,
                elementwise_ops: hw * cout,
                ..Default::default()
            }
            .finish(b + cout)
        }
        LayerKind::Lrlc | LayerKind::DynamicLrlc => {
            let dynamic = s.kind == LayerKind::DynamicLrlc || mode == CostMode::Dynamic;
            let combining = if dynamic {
                dynamic_net_params(s)
            } else {
                match s.mode {
                    WeightMode::Factorized => (s.height + s.width) as u64 * k,
                    WeightMode::Full => hw * k,
                }
            };
            let base = CostReport {
                basis_params: k * conv,
                combining_params: combining,
                bias_params: spatial_bias,
                ..Default::default()
            };
            // softmax, K-way mixing of responses, bias
            let mixing = hw * k + hw * k * cout + hw * cout;
            if dynamic {
                CostReport {
                    macs: k * conv_macs + s.dynamic.macs(s.height, s.width, s.in_channels, s.rank),
                    elementwise_ops: mixing + s.dynamic.elementwise_ops(s.height, s.width),
                    ..base
                }
                .finish(k * conv + combining + spatial_bias)
            } else if mode == CostMode::LoweredInference {
                // local filters, the local layer's (zero) bias, and the spatial bias
                CostReport { macs: conv_macs, elementwise_ops: hw * cout, ..base }
                    .finish(hw * conv + cout + spatial_bias)
            } else {
                CostReport { macs: k * conv_macs, elementwise_ops: mixing, ..base }
                    .finish(k * conv + combining + spatial_bias)
            }
        }
    }
}

/// One row of a model cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub name: String,
    pub report: CostReport,
}

/// Per-component costs of a whole classifier, with batch normalization and the head.
pub fn model_costs(spec: &ModelSpec, mode: CostMode) -> Vec<CostRow> {
    let mut rows = Vec::new();
    let hw = (spec.height * spec.width) as u64;
    for (i, ls) in spec.layers().iter().enumerate() {
        rows.push(CostRow { name: format!("block{i}.{}", ls.kind.name()), report: count_flops(ls, mode) });
        let c = ls.out_channels as u64;
        // gamma, beta trained; running mean and variance stored
        let bn = CostReport { bias_params: 2 * c, elementwise_ops: hw * c * 3, ..Default::default() }.finish(4 * c);
        rows.push(CostRow { name: format!("block{i}.bn"), report: bn });
    }
    let (c, classes) = (spec.channels as u64, spec.classes as u64);
    let head = CostReport {
        basis_params: c * classes,
        bias_params: classes,
        macs: c * classes,
        elementwise_ops: hw * c + classes,
        ..Default::default()
    }
    .finish(c * classes + classes);
    rows.push(CostRow { name: String::from("head"), report: head });
    rows
}
