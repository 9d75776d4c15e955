//! Independent nested-loop oracles used by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use alloc::vec::Vec;

use crate::layers::{ConvLayer, LocalLayer};
use crate::lrlc::{CombiningWeights, LrlcLayer};
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Applies `bank(i, j)` (an `h×w×Cin×Cout` slice) at every position by direct summation.
fn per_position_oracle<'a>(
    input: &Tensor<f64>,
    fh: usize,
    fw: usize,
    cout: usize,
    bank: impl Fn(usize, usize) -> &'a [f64],
    bias: &[f64],
) -> Tensor<f64> {
    let [n, h, w, cin] = input.dims4("oracle input").unwrap();
    let mut out = Tensor::zeros(&[n, h, w, cout]);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let f = bank(i, j);
                for co in 0..cout {
                    let mut acc = bias[co];
                    for x in 0..fh {
                        for y in 0..fw {
                            let r = i as isize + x as isize - (fh / 2) as isize;
                            let c = j as isize + y as isize - (fw / 2) as isize;
                            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                                continue;
                            }
                            for z in 0..cin {
                                let iv = input.data()[((b * h + r as usize) * w + c as usize) * cin + z];
                                acc += iv * f[((x * fw + y) * cin + z) * cout + co];
                            }
                        }
                    }
                    out.data_mut()[((b * h + i) * w + j) * cout + co] = acc;
                }
            }
        }
    }
    out
}

pub fn conv_oracle(input: &Tensor<f64>, layer: &ConvLayer<f64>) -> Tensor<f64> {
    let (fh, fw, _, cout) = layer.extents();
    per_position_oracle(input, fh, fw, cout, |_, _| layer.filters.data(), layer.bias.data())
}

pub fn local_oracle(input: &Tensor<f64>, layer: &LocalLayer<f64>) -> Tensor<f64> {
    let s = layer.filters.shape();
    let (w, fh, fw, cin, cout) = (s[1], s[2], s[3], s[4], s[5]);
    let bank_len = fh * fw * cin * cout;
    let data = layer.filters.data();
    per_position_oracle(
        input,
        fh,
        fw,
        cout,
        |i, j| &data[(i * w + j) * bank_len..(i * w + j + 1) * bank_len],
        layer.bias.data(),
    )
}

/// Post-softmax weights of an LRLC layer by direct evaluation, `[i][j][k]`.
pub fn lrlc_weights_oracle(layer: &LrlcLayer<f64>) -> Vec<Vec<Vec<f64>>> {
    let (k, _, _, _, _) = layer.basis.extents();
    let (h, w) = (layer.bias.row.numel(), layer.bias.col.numel());
    let mut table = Vec::new();
    for i in 0..h {
        let mut row = Vec::new();
        for j in 0..w {
            let logits: Vec<f64> = (0..k)
                .map(|kk| match &layer.weights {
                    CombiningWeights::Factorized { alpha, beta } => alpha.data()[kk * h + i] + beta.data()[kk * w + j],
                    CombiningWeights::Full { logits } => logits.data()[(i * w + j) * k + kk],
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|&z| libm::exp(z - m)).collect();
            let s: f64 = e.iter().sum();
            row.push(e.iter().map(|v| v / s).collect());
        }
        table.push(row);
    }
    table
}

/// LRLC forward by explicit per-position bank mixing and nested loops.
pub fn lrlc_oracle(input: &Tensor<f64>, layer: &LrlcLayer<f64>) -> Tensor<f64> {
    let (k, fh, fw, cin, cout) = layer.basis.extents();
    let (h, w) = (layer.bias.row.numel(), layer.bias.col.numel());
    let wts = lrlc_weights_oracle(layer);
    let len = fh * fw * cin * cout;
    let mut banks = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let mut f = alloc::vec![0.0; len];
            for kk in 0..k {
                for e in 0..len {
                    f[e] += wts[i][j][kk] * layer.basis.banks.data()[kk * len + e];
                }
            }
            banks.push(f);
        }
    }
    let zero = alloc::vec![0.0; cout];
    let mut out = per_position_oracle(input, fh, fw, cout, |i, j| &banks[i * w + j], &zero);
    let n = input.dim(0);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for c in 0..cout {
                    out.data_mut()[((b * h + i) * w + j) * cout + c] +=
                        layer.bias.row.data()[i] + layer.bias.col.data()[j] + layer.bias.channel.data()[c];
                }
            }
        }
    }
    out
}

/// Checks `backward` of a parameterized operator against central differences of
/// a random projection of `forward`, w.r.t. the input and every parameter.
pub fn grad_check_layer<L, F, B>(
    op: &str,
    layer: &L,
    input: &Tensor<f64>,
    forward: F,
    backward: B,
    tolerance: f64,
    seed: u64,
) -> crate::gradcheck::GradCheckReport
where
    L: crate::Params<f64> + Clone,
    F: Fn(&L, &Tensor<f64>) -> crate::Result<Tensor<f64>>,
    B: Fn(&L, &Tensor<f64>, &Tensor<f64>) -> crate::Result<(Tensor<f64>, L)>,
{
    let out = forward(layer, input).unwrap();
    let proj = Tensor::uniform(out.shape(), -1.0, 1.0, &mut rng(seed));
    let mut inputs = alloc::vec![input.clone()];
    inputs.extend(layer.params().into_iter().cloned());
    let rebuild = |xs: &[Tensor<f64>]| {
        let mut l = layer.clone();
        for (p, x) in l.params_mut().into_iter().zip(&xs[1..]) {
            *p = x.clone();
        }
        l
    };
    crate::gradcheck::GradCheck::new(op, tolerance).run(
        &inputs,
        |xs| crate::gradcheck::projected(&forward(&rebuild(xs), &xs[0])?, &proj),
        |xs| {
            let (gi, gl) = backward(&rebuild(xs), &xs[0], &proj)?;
            let mut g = alloc::vec![gi];
            g.extend(gl.params().into_iter().cloned());
            Ok(g)
        },
    )
}
