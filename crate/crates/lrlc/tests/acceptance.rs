//! Acceptance gate: one PASS/FAIL/NOT RUN line per criterion.
//!
//! Criteria 4 and 5 train full MNIST models and run only with
//! `LRLC_ACCEPT_FULL=1` and `LRLC_DATA_DIR` set. `LRLC_ACCEPT_OUT` keeps their
//! run directories; `LRLC_ACCEPT_JOBS` sets sweep parallelism.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lrlc::config::ExperimentConfig;
use lrlc::heatmap::export_heatmaps;
use lrlc::load_dataset;
use lrlc::sweep::{run_experiment, SweepResult};
use lrlc::train::{train_run, METRICS_FILE};
use lrlc_core::cost::{count_flops, count_params, CostMode};
use lrlc_core::dynamic::{BranchSpec, DynamicLrlcLayer, DynamicNetConfig};
use lrlc_core::gradcheck::{projected, GradCheck, GradCheckReport};
use lrlc_core::layers::{BatchNorm, ConvLayer, CoordConvLayer, Dense, LocalLayer, SpatialBias};
use lrlc_core::lrlc::{lower_to_local, lrlc_forward, CombiningWeights, FilterBasis, LrlcLayer, LrlcSpec, WeightMode};
use lrlc_core::model::{LayerKind, LayerSpec};
use lrlc_core::{Params, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EQUIVALENCE_TOL: f64 = 1e-10;
const EQUIVALENCE_INSTANCES: usize = 100;
const EQUIVALENCE_BUDGET: Duration = Duration::from_secs(60);
const GRAD_TOL: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const REFERENCE_PARAMS: u64 = 73_984;
const MNIST_CONV_TOP1: f64 = 0.975;
const LRLC_MARGIN: f64 = 0.001;
const FULL_BUDGET: Duration = Duration::from_secs(3600);
const MAP_SUM_TOL: f64 = 1e-6;
const SEEDS: [u64; 3] = [0, 1, 2];

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// SAME-padded correlation of bank `f` (`fh×fw×Cin×Cout`) at position `(i, j)` of example `b`.
fn correlate_at(
    x: &Tensor<f64>,
    f: &[f64],
    fh: usize,
    fw: usize,
    cout: usize,
    b: usize,
    i: usize,
    j: usize,
    o: usize,
) -> f64 {
    let (h, w, cin) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut s = 0.0;
    for di in 0..fh {
        for dj in 0..fw {
            let (si, sj) = (i as isize + di as isize - (fh / 2) as isize, j as isize + dj as isize - (fw / 2) as isize);
            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                continue;
            }
            for c in 0..cin {
                s += x.data()[((b * h + si as usize) * w + sj as usize) * cin + c]
                    * f[((di * fw + dj) * cin + c) * cout + o];
            }
        }
    }
    s
}

/// Nested-loop LRLC: per-position softmax over `logits[i][j][k]`, mix of the
/// per-bank responses, then the row + column + channel bias.
fn lrlc_oracle(
    x: &Tensor<f64>,
    banks: &Tensor<f64>,
    logits: &dyn Fn(usize, usize, usize) -> f64,
    bias: &SpatialBias<f64>,
) -> Vec<f64> {
    let (n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let s = banks.shape();
    let (k, fh, fw, cin, cout) = (s[0], s[1], s[2], s[3], s[4]);
    let bank = fh * fw * cin * cout;
    let mut out = vec![0.0; n * h * w * cout];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let l: Vec<f64> = (0..k).map(|kk| logits(i, j, kk)).collect();
                let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
                for o in 0..cout {
                    let mut v = bias.row.data()[i] + bias.col.data()[j] + bias.channel.data()[o];
                    for kk in 0..k {
                        let wk = (l[kk] - m).exp() / z;
                        v += wk * correlate_at(x, &banks.data()[kk * bank..(kk + 1) * bank], fh, fw, cout, b, i, j, o);
                    }
                    out[((b * h + i) * w + j) * cout + o] = v;
                }
            }
        }
    }
    out
}

fn equivalence() -> Outcome {
    let started = Instant::now();
    let mut r = rng(0xE0);
    let (mut lowered_err, mut oracle_err, mut rank_one_err) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..EQUIVALENCE_INSTANCES {
        let (h, w, k) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=4));
        let (cin, cout) = (r.random_range(1..=4), r.random_range(1..=4));
        let f = [1, 3, 5][r.random_range(0..3)];
        let banks = rand_tensor(&[k, f, f, cin, cout], &mut r);
        let bias = SpatialBias::new(rand_tensor(&[h], &mut r), rand_tensor(&[w], &mut r), rand_tensor(&[cout], &mut r))
            .unwrap();
        let x = rand_tensor(&[2, h, w, cin], &mut r);

        let (weights, table): (CombiningWeights<f64>, Box<dyn Fn(usize, usize, usize) -> f64>) = if case % 2 == 0 {
            let (a, b) = (rand_tensor(&[k, h], &mut r).scale(2.0), rand_tensor(&[k, w], &mut r).scale(2.0));
            let (ad, bd) = (a.data().to_vec(), b.data().to_vec());
            (CombiningWeights::factorized(a, b).unwrap(), Box::new(move |i, j, kk| ad[kk * h + i] + bd[kk * w + j]))
        } else {
            let t = rand_tensor(&[h, w, k], &mut r).scale(3.0);
            let td = t.data().to_vec();
            (CombiningWeights::full(t).unwrap(), Box::new(move |i, j, kk| td[(i * w + j) * k + kk]))
        };
        let layer = LrlcLayer::new(FilterBasis::new(banks.clone()).unwrap(), weights, bias.clone()).unwrap();
        let y = lrlc_forward(&x, &layer).unwrap();
        let via_local = bias.forward(&lower_to_local(&layer).unwrap().forward(&x).unwrap()).unwrap();
        lowered_err = lowered_err.max(max_diff(y.data(), via_local.data()));
        oracle_err = oracle_err.max(max_diff(y.data(), &lrlc_oracle(&x, &banks, &*table, &bias)));

        // rank one: convolution with the single bank plus the spatial bias, whatever the logits
        let one_bank = rand_tensor(&[1, f, f, cin, cout], &mut r);
        let one = LrlcLayer::new(
            FilterBasis::new(one_bank.clone()).unwrap(),
            CombiningWeights::factorized(rand_tensor(&[1, h], &mut r), rand_tensor(&[1, w], &mut r)).unwrap(),
            bias.clone(),
        )
        .unwrap();
        let mut want = vec![0.0; 2 * h * w * cout];
        for (idx, v) in want.iter_mut().enumerate() {
            let (o, j, i, b) = (idx % cout, (idx / cout) % w, (idx / (cout * w)) % h, idx / (cout * w * h));
            *v = correlate_at(&x, one_bank.data(), f, f, cout, b, i, j, o)
                + bias.row.data()[i]
                + bias.col.data()[j]
                + bias.channel.data()[o];
        }
        let conv = ConvLayer::new(one_bank.reshape(&[f, f, cin, cout]).unwrap(), Tensor::zeros(&[cout])).unwrap();
        let conv_bias = bias.forward(&conv.forward(&x).unwrap()).unwrap();
        let got = lrlc_forward(&x, &one).unwrap();
        rank_one_err = rank_one_err.max(max_diff(got.data(), &want)).max(max_diff(got.data(), conv_bias.data()));
    }
    let elapsed = started.elapsed();
    let worst = lowered_err.max(oracle_err).max(rank_one_err);
    verdict(
        worst <= EQUIVALENCE_TOL && elapsed < EQUIVALENCE_BUDGET,
        format!(
            "{EQUIVALENCE_INSTANCES} instances (H,W<=8, K<=4, channels<=4, f64): lowered {lowered_err:.1e}, nested-loop {oracle_err:.1e}, \
             K=1 vs conv+bias {rank_one_err:.1e} (tol {EQUIVALENCE_TOL:.0e}); {:.1}s (budget {}s)",
            elapsed.as_secs_f64(),
            EQUIVALENCE_BUDGET.as_secs()
        ),
    )
}

/// Gradient of a random projection of `forward` w.r.t. the input and every parameter.
fn check_layer<L, F, B>(op: &str, layer: &L, input: &Tensor<f64>, forward: F, backward: B, seed: u64) -> GradCheckReport
where
    L: Params<f64> + Clone,
    F: Fn(&L, &Tensor<f64>) -> lrlc_core::Result<Tensor<f64>>,
    B: Fn(&L, &Tensor<f64>, &Tensor<f64>) -> lrlc_core::Result<(Tensor<f64>, L)>,
{
    let out = forward(layer, input).unwrap();
    let proj = Tensor::uniform(out.shape(), -1.0, 1.0, &mut rng(seed));
    let mut inputs = vec![input.clone()];
    inputs.extend(layer.params().into_iter().cloned());
    let rebuild = |xs: &[Tensor<f64>]| {
        let mut l = layer.clone();
        for (p, x) in l.params_mut().into_iter().zip(&xs[1..]) {
            *p = x.clone();
        }
        l
    };
    GradCheck::new(op, GRAD_TOL).run(
        &inputs,
        |xs| projected(&forward(&rebuild(xs), &xs[0])?, &proj),
        |xs| {
            let (gi, gl) = backward(&rebuild(xs), &xs[0], &proj)?;
            let mut g = vec![gi];
            g.extend(gl.params().into_iter().cloned());
            Ok(g)
        },
    )
}

fn randomize<L: Params<f64>>(layer: &mut L, r: &mut ChaCha8Rng) {
    for p in layer.params_mut() {
        *p = Tensor::uniform(p.shape(), -1.0, 1.0, r);
    }
}

fn gradients() -> Outcome {
    let started = Instant::now();
    // (batch, H, W, Cin, Cout, K)
    let shapes = [(2, 4, 4, 1, 2, 2), (1, 5, 3, 2, 3, 3), (3, 3, 6, 3, 1, 4)];
    let mut reports: Vec<GradCheckReport> = Vec::new();
    for (s, &(n, h, w, cin, cout, k)) in shapes.iter().enumerate() {
        let mut r = rng(0x6AD + s as u64);
        let seed = s as u64;
        let x = rand_tensor(&[n, h, w, cin], &mut r);

        let mut conv = ConvLayer::init(3, 3, cin, cout, &mut r);
        randomize(&mut conv, &mut r);
        reports.push(check_layer("conv", &conv, &x, |l, x| l.forward(x), |l, x, g| l.backward(x, g), seed));

        let mut local = LocalLayer::init(h, w, 3, 3, cin, cout, &mut r);
        randomize(&mut local, &mut r);
        reports.push(check_layer("local", &local, &x, |l, x| l.forward(x), |l, x, g| l.backward(x, g), seed));

        let mut coord = CoordConvLayer::init(3, 3, cin, cout, &mut r);
        randomize(&mut coord, &mut r);
        reports.push(check_layer("coordconv", &coord, &x, |l, x| l.forward(x), |l, x, g| l.backward(x, g), seed));

        for mode in [WeightMode::Factorized, WeightMode::Full] {
            let spec = LrlcSpec {
                height: h,
                width: w,
                rank: k,
                filter_h: 3,
                filter_w: 3,
                in_channels: cin,
                out_channels: cout,
                mode,
            };
            let mut lrlc = LrlcLayer::init(&spec, &mut r).unwrap();
            randomize(&mut lrlc, &mut r);
            let name = if mode == WeightMode::Full { "lrlc(full logits)" } else { "lrlc(alpha/beta)" };
            reports.push(check_layer(name, &lrlc, &x, |l, x| l.forward(x), |l, x, g| l.backward(x, g), seed));
        }

        let cfg = DynamicNetConfig {
            projection: 3,
            branches: vec![BranchSpec { pool: 1, dilation: 1 }, BranchSpec { pool: 2, dilation: 2 }],
            bottleneck: 3,
            expansion: 4,
        };
        let mut dynamic = DynamicLrlcLayer::init(h, w, k, 3, 3, cin, cout, &cfg, &mut r).unwrap();
        // the head starts at zero; a random head exercises every path of g
        for p in dynamic.params_mut() {
            *p = Tensor::uniform(p.shape(), -0.5, 0.5, &mut r);
        }
        reports.push(check_dynamic(&dynamic, &x, seed));

        let bias = SpatialBias::new(rand_tensor(&[h], &mut r), rand_tensor(&[w], &mut r), rand_tensor(&[cout], &mut r))
            .unwrap();
        let y = rand_tensor(&[n, h, w, cout], &mut r);
        reports.push(check_layer(
            "spatial_bias",
            &bias,
            &y,
            |b, x| b.forward(x),
            |b, _, g| Ok((g.clone(), b.backward(g)?)),
            seed,
        ));

        let mut bn = BatchNorm::new(cout);
        bn.gamma = Tensor::uniform(&[cout], 0.5, 1.5, &mut r);
        bn.beta = rand_tensor(&[cout], &mut r);
        let yb = rand_tensor(&[n.max(2), h, w, cout], &mut r);
        reports.push(check_layer(
            "batchnorm",
            &bn,
            &yb,
            |l, x| Ok(l.clone().forward_train(x)?.0),
            |l, x, g| {
                let (_, cache) = l.clone().forward_train(x)?;
                let (gi, gr) = l.backward(&cache, g)?;
                let mut out = l.clone();
                out.gamma = gr.gamma;
                out.beta = gr.beta;
                Ok((gi, out))
            },
            seed,
        ));

        let mut dense = Dense::init(cin, cout, 1.0, &mut r);
        randomize(&mut dense, &mut r);
        reports.push(check_layer("dense", &dense, &x, |l, x| l.forward(x), |l, x, g| l.backward(x, g), seed));
    }
    let elapsed = started.elapsed();
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.to_string()).collect();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for r in &reports {
        let e = worst.entry(r.op.as_str()).or_insert(0.0);
        *e = e.max(r.max_rel_error);
    }
    let summary: Vec<String> = worst.iter().map(|(op, e)| format!("{op} {e:.1e}")).collect();
    verdict(
        failed.is_empty() && elapsed < GRAD_BUDGET,
        format!(
            "{} checks over 3 shapes, max rel error per op: {} (tol {GRAD_TOL:.0e}); {:.1}s (budget {}s){}",
            reports.len(),
            summary.join(", "),
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(" | ")) }
        ),
    )
}

/// The dynamic layer end to end; its g network holds ReLUs, so elements whose
/// finite difference straddles a kink are skipped.
fn check_dynamic(layer: &DynamicLrlcLayer<f64>, x: &Tensor<f64>, seed: u64) -> GradCheckReport {
    let out = layer.forward(x).unwrap();
    let proj = Tensor::uniform(out.shape(), -1.0, 1.0, &mut rng(seed));
    let mut inputs = vec![x.clone()];
    inputs.extend(layer.params().into_iter().cloned());
    let rebuild = |xs: &[Tensor<f64>]| {
        let mut l = layer.clone();
        for (p, v) in l.params_mut().into_iter().zip(&xs[1..]) {
            *p = v.clone();
        }
        l
    };
    let mut report = GradCheck::new("dynamic_lrlc", GRAD_TOL).detect_kinks().run(
        &inputs,
        |xs| projected(&rebuild(xs).forward(&xs[0])?, &proj),
        |xs| {
            let (gi, gl) = rebuild(xs).backward(&xs[0], &proj)?;
            let mut g = vec![gi];
            g.extend(gl.params().into_iter().cloned());
            Ok(g)
        },
    );
    if report.skipped * 10 > report.checked {
        report.passed = false;
        report.failure =
            Some(format!("{} of {} elements skipped as kinks", report.skipped, report.checked + report.skipped));
    }
    report
}

fn layer_spec(kind: LayerKind, hw: usize, k: usize, cin: usize, cout: usize, f: usize) -> LayerSpec {
    LayerSpec {
        kind,
        height: hw,
        width: hw,
        filter_h: f,
        filter_w: f,
        in_channels: cin,
        out_channels: cout,
        rank: k,
        mode: WeightMode::Factorized,
        dynamic: DynamicNetConfig::default(),
    }
}

fn costs() -> Outcome {
    let mut problems = Vec::new();
    let mut shapes = 0;
    for (hw, cin, cout, f) in [(32, 64, 64, 3), (28, 1, 64, 3), (7, 3, 5, 5), (9, 2, 4, 1), (16, 8, 8, 7)] {
        let conv = count_flops(&layer_spec(LayerKind::Conv, hw, 1, cin, cout, f), CostMode::Train).macs;
        if conv != (hw * hw * f * f * cin * cout) as u64 {
            problems.push(format!("conv MACs {conv} at {hw}x{hw} {f}x{f} {cin}->{cout}"));
        }
        for k in 1..=6 {
            let lowered =
                count_flops(&layer_spec(LayerKind::Lrlc, hw, k, cin, cout, f), CostMode::LoweredInference).macs;
            if lowered != conv {
                problems
                    .push(format!("lowered K={k} MACs {lowered} != conv {conv} at {hw}x{hw} {f}x{f} {cin}->{cout}"));
            }
        }
        let slope = (f * f * cin * cout + 2 * hw) as u64;
        let counts: Vec<u64> =
            (1..=8).map(|k| count_params(&layer_spec(LayerKind::Lrlc, hw, k, cin, cout, f)).trainable_params).collect();
        for (k, pair) in counts.windows(2).enumerate() {
            if pair[1] - pair[0] != slope {
                problems.push(format!("K={}->{}: growth {} != {slope}", k + 1, k + 2, pair[1] - pair[0]));
            }
        }
        shapes += 1;
    }
    let reference = count_params(&layer_spec(LayerKind::Lrlc, 32, 2, 64, 64, 3)).trainable_params;
    let spec = LrlcSpec {
        height: 32,
        width: 32,
        rank: 2,
        filter_h: 3,
        filter_w: 3,
        in_channels: 64,
        out_channels: 64,
        mode: WeightMode::Factorized,
    };
    let instantiated = LrlcLayer::<f32>::init(&spec, &mut rng(1)).unwrap().param_count() as u64;
    if reference != REFERENCE_PARAMS || instantiated != REFERENCE_PARAMS {
        problems.push(format!(
            "32x32 K=2 3x3 64->64: counted {reference}, instantiated {instantiated}, expected {REFERENCE_PARAMS}"
        ));
    }
    verdict(
        problems.is_empty(),
        format!(
            "lowered MACs == conv MACs on {shapes} shapes x K=1..6; params(32x32,K=2,3x3,64->64) = {reference} (layer tensors {instantiated}); \
             growth slope h*w*Cin*Cout+(H+W) over K=1..8{}",
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

fn full_runs_enabled() -> Result<PathBuf, String> {
    if std::env::var("LRLC_ACCEPT_FULL").ok().as_deref() != Some("1") {
        return Err(String::from(
            "full MNIST training (3 seeds x several 20-epoch models) exceeds this gate's CPU budget; set LRLC_ACCEPT_FULL=1 and LRLC_DATA_DIR to run",
        ));
    }
    let cfg = ExperimentConfig::default();
    cfg.require_data_dir().map_err(|e| format!("LRLC_ACCEPT_FULL=1 but no MNIST directory: {e}"))
}

fn full_config(data: &Path, overrides: &[&str]) -> ExperimentConfig {
    let jobs = std::env::var("LRLC_ACCEPT_JOBS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let mut o: Vec<String> = vec![
        format!("data.dir={:?}", data.display().to_string()),
        String::from("model.kind=\"lrlc\""),
        String::from("model.rank=2"),
        String::from("model.placement=\"third\""),
        format!("sweep.seeds={SEEDS:?}"),
        format!("sweep.jobs={jobs}"),
    ];
    o.extend(overrides.iter().map(|s| s.to_string()));
    ExperimentConfig::parse("", &o).unwrap()
}

fn full_out_dir(name: &str) -> (PathBuf, Option<tempfile::TempDir>) {
    match std::env::var_os("LRLC_ACCEPT_OUT") {
        Some(d) => (PathBuf::from(d).join(name), None),
        None => {
            let t = tempfile::tempdir().unwrap();
            (t.path().to_path_buf(), Some(t))
        }
    }
}

fn sweep(cfg: &ExperimentConfig, name: &str) -> Result<SweepResult, String> {
    let (out, _keep) = full_out_dir(name);
    let data = load_dataset(cfg, &cfg.require_data_dir().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let r = run_experiment(cfg, &data, &out, &|cell, row| eprintln!("  {name} {} {}", cell.id(), row.csv()))
        .map_err(|e| e.to_string())?;
    if let Some((cell, e)) = r.failures.first() {
        return Err(format!("cell {} failed: {e}", cell.id()));
    }
    Ok(r)
}

fn mean_test(r: &SweepResult, kind: &str) -> (f64, Vec<f64>) {
    let v: Vec<f64> = r.per_seed.iter().filter(|(c, _)| c.kind == kind).map(|(_, o)| o.test_top1).collect();
    (v.iter().sum::<f64>() / v.len() as f64, v)
}

/// The untranslated sweep shared by criteria 4 and 5.
fn original_sweep(data: &Path) -> Result<(SweepResult, Duration), String> {
    let started = Instant::now();
    let cfg = full_config(data, &["sweep.kinds=[\"conv\",\"lrlc\",\"dynamic_lrlc\"]"]);
    Ok((sweep(&cfg, "original")?, started.elapsed()))
}

fn mnist_training(original: &Result<(SweepResult, Duration), String>) -> Outcome {
    let (r, elapsed) = match original {
        Ok(v) => v,
        Err(e) => return Outcome::Fail(e.clone()),
    };
    let (conv, conv_seeds) = mean_test(r, "conv");
    let (lrlc, lrlc_seeds) = mean_test(r, "lrlc");
    verdict(
        conv >= MNIST_CONV_TOP1 && lrlc >= conv - LRLC_MARGIN && *elapsed <= FULL_BUDGET,
        format!(
            "conv test top-1 mean {conv:.4} {conv_seeds:?} (need >= {MNIST_CONV_TOP1}); LRLC K=2 third layer mean {lrlc:.4} {lrlc_seeds:?} \
             (need >= conv - {LRLC_MARGIN}); {:.0}s for conv+LRLC+dynamic (budget {}s)",
            elapsed.as_secs_f64(),
            FULL_BUDGET.as_secs()
        ),
    )
}

fn translation(data: &Path, original: &Result<(SweepResult, Duration), String>) -> Outcome {
    let (orig, _) = match original {
        Ok(v) => v,
        Err(e) => return Outcome::Fail(e.clone()),
    };
    let cfg = full_config(data, &["data.translate=true", "sweep.kinds=[\"lrlc\",\"dynamic_lrlc\"]"]);
    let moved = match sweep(&cfg, "translated") {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e),
    };
    let drop = |kind: &str| mean_test(orig, kind).0 - mean_test(&moved, kind).0;
    let (fixed, dynamic) = (drop("lrlc"), drop("dynamic_lrlc"));
    verdict(
        fixed > dynamic,
        format!(
            "mean drop original -> translated (28->42 canvas, 3 seeds): fixed LRLC {fixed:.4}, dynamic LRLC {dynamic:.4} (need fixed > dynamic)"
        ),
    )
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn emitted_map_sums(dir: &Path) -> (usize, f64) {
    let (mut rows, mut worst) = (0, 0.0f64);
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if !path.to_string_lossy().ends_with("_weights.csv") {
            continue;
        }
        for row in csv_rows(&path) {
            let s: f64 = row[2..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
            worst = worst.max((s - 1.0).abs());
            rows += 1;
        }
    }
    (rows, worst)
}

fn normalization_and_selection() -> Outcome {
    let data_dir = tempfile::tempdir().unwrap();
    common::write_mnist(data_dir.path(), 400, 100, false);
    let mut problems = Vec::new();

    // maps of trained fixed (both parameterizations) and input-dependent layers
    let (mut positions, mut worst) = (0, 0.0f64);
    for (kind, weights) in [("lrlc", "factorized"), ("lrlc", "full"), ("dynamic_lrlc", "factorized")] {
        let kind_set = format!("model.kind={kind:?}");
        let weights_set = format!("model.weights={weights:?}");
        let cfg = common::small_config(
            data_dir.path(),
            &[
                &kind_set,
                &weights_set,
                "model.rank=3",
                "model.placement=\"all\"",
                "model.channels=8",
                "train.peak_lr=0.05",
            ],
        );
        let data = load_dataset(&cfg, data_dir.path()).unwrap();
        let run = tempfile::tempdir().unwrap();
        train_run(&cfg, &data, run.path(), &mut |_| {}).unwrap();
        let (model, _) = lrlc::checkpoint::load::<f64>(&run.path().join("checkpoint")).unwrap();
        let x = data.test.batch(&[0, 1, 2, 3]).0.cast::<f64>();
        let maps = tempfile::tempdir().unwrap();
        if let Err(e) = export_heatmaps(&model, Some(&x), maps.path()) {
            problems.push(format!("{kind}/{weights}: {e}"));
            continue;
        }
        let (rows, w) = emitted_map_sums(maps.path());
        positions += rows;
        worst = worst.max(w);
    }
    if worst > MAP_SUM_TOL || positions == 0 {
        problems.push(format!("map sums deviate by {worst:.1e} over {positions} positions"));
    }

    // a rank sweep whose optimal flags are recomputed from the raw CSVs
    let out = tempfile::tempdir().unwrap();
    let cfg = common::small_config(
        data_dir.path(),
        &[
            "model.kind=\"lrlc\"",
            "model.rank=1",
            "model.placement=\"second\"",
            "sweep.ranks=[1,2,3,4]",
            "sweep.seeds=[0,1]",
            "model.channels=8",
        ],
    );
    let data = load_dataset(&cfg, data_dir.path()).unwrap();
    run_experiment(&cfg, &data, out.path(), &|_, _| {}).unwrap();
    let mut by_rank: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for row in csv_rows(&out.path().join("per_seed.csv")) {
        by_rank.entry(row[2].parse().unwrap()).or_default().push(row[4].parse().unwrap());
    }
    let means: Vec<(usize, f64)> = by_rank.iter().map(|(&k, v)| (k, v.iter().sum::<f64>() / v.len() as f64)).collect();
    // ascending ranks; only a strictly higher mean displaces the incumbent
    let best = means.iter().fold(means[0], |b, &m| if m.1 > b.1 { m } else { b }).0;
    let flagged: Vec<usize> = csv_rows(&out.path().join("summary.csv"))
        .iter()
        .filter(|r| r[8] == "1")
        .map(|r| r[2].parse().unwrap())
        .collect();
    if flagged != [best] {
        problems.push(format!("summary marks {flagged:?}, raw CSV argmax is {best} (means {means:?})"));
    }
    verdict(
        problems.is_empty(),
        format!(
            "{positions} emitted positions sum to 1 within {worst:.1e} (tol {MAP_SUM_TOL:.0e}); optimal rank {best} from raw per-seed CSV, means {:?}{}",
            means.iter().map(|(k, m)| format!("K={k}:{m:.3}")).collect::<Vec<_>>(),
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

fn determinism() -> Outcome {
    let data_dir = tempfile::tempdir().unwrap();
    common::write_mnist(data_dir.path(), 300, 60, false);
    let mut problems = Vec::new();
    let mut compared = Vec::new();
    for kind in ["conv", "lrlc", "dynamic_lrlc"] {
        let kind_set = format!("model.kind={kind:?}");
        let mut o = vec![kind_set.as_str(), "train.epochs=3", "train.seed=5"];
        if kind != "conv" {
            o.push("model.rank=2");
        }
        let cfg = common::small_config(data_dir.path(), &o);
        let data = load_dataset(&cfg, data_dir.path()).unwrap();
        let runs: Vec<Vec<u8>> = (0..2)
            .map(|_| {
                let dir = tempfile::tempdir().unwrap();
                train_run(&cfg, &data, dir.path(), &mut |_| {}).unwrap();
                fs::read(dir.path().join(METRICS_FILE)).unwrap()
            })
            .collect();
        if runs[0] != runs[1] {
            problems.push(format!("{kind}: metrics differ"));
        }
        compared.push(format!("{kind} ({} bytes)", runs[0].len()));
    }
    verdict(
        problems.is_empty(),
        format!("3-epoch test-mode runs, seed 5, two runs each: {} bitwise identical{}", compared.join(", "), {
            if problems.is_empty() {
                String::new()
            } else {
                format!("; {}", problems.join("; "))
            }
        }),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::NotRun(d) => ("NOT RUN", d),
        };
        println!("[{tag}] {id}. {name} ({secs:.1}s): {detail}");
    };

    let t = Instant::now();
    report(1, "equivalence", t, equivalence());
    let t = Instant::now();
    report(2, "gradients", t, gradients());
    let t = Instant::now();
    report(3, "cost model", t, costs());
    match full_runs_enabled() {
        Ok(data) => {
            let t = Instant::now();
            let original = original_sweep(&data);
            report(4, "MNIST training", t, mnist_training(&original));
            let t = Instant::now();
            report(5, "translation drop ordering", t, translation(&data, &original));
        }
        Err(why) => {
            report(4, "MNIST training", Instant::now(), Outcome::NotRun(why.clone()));
            report(5, "translation drop ordering", Instant::now(), Outcome::NotRun(why));
        }
    }
    let t = Instant::now();
    report(6, "normalization and selection", t, normalization_and_selection());
    let t = Instant::now();
    report(7, "determinism", t, determinism());

    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
