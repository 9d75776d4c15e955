//! One training run: shuffled drop-last minibatches, Adam with warmup + cosine
//! decay, per-epoch metrics and checkpoints.

use std::path::Path;
use std::time::Instant;

use lrlc_core::model::{top1, Layer, Model};
use lrlc_core::optim::{cross_entropy, AdamState, Schedule};
use lrlc_core::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const METRICS_HEADER: &str = "epoch,split,loss,top1,lr,seconds";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl MetricRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.split, self.loss, self.top1, self.lr, self.seconds)
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub metrics: Vec<MetricRow>,
    /// Inference-mode scores of the final model.
    pub validation_top1: f64,
    pub test_top1: f64,
    pub best_validation_top1: f64,
    pub best_epoch: usize,
}

/// Mean cross-entropy and top-1 in inference mode.
pub fn evaluate<T: Scalar>(model: &Model<T>, split: &DatasetSplit, batch: usize) -> Result<(f64, f64)> {
    if split.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut loss, mut hits) = (0.0, 0.0);
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let (x, labels) = split.batch(chunk);
        let logits = model.predict(&x.cast::<T>())?;
        loss += cross_entropy(&logits, &labels)?.0 * chunk.len() as f64;
        hits += top1(&logits, &labels)? * chunk.len() as f64;
    }
    let n = split.len() as f64;
    Ok((loss / n, hits / n))
}

fn uses_fixed_lrlc<T>(model: &Model<T>) -> bool {
    model.blocks.iter().any(|b| matches!(b.layer, Layer::Lrlc(_)))
}

/// Trains per `cfg`, writing metrics and checkpoints under `out_dir`.
/// `progress` sees every metrics row as it is produced.
pub fn train_run(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out_dir: &Path,
    progress: &mut dyn FnMut(&MetricRow),
) -> Result<RunOutcome> {
    if cfg.train.test_mode || cfg.train.dtype == "f64" {
        run::<f64>(cfg, data, out_dir, progress)
    } else {
        run::<f32>(cfg, data, out_dir, progress)
    }
}

fn run<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out_dir: &Path,
    progress: &mut dyn FnMut(&MetricRow),
) -> Result<RunOutcome> {
    let t = &cfg.train;
    let spec = cfg.model_spec()?;
    let (h, w, c) = data.train.extent();
    if (h, w, c) != (spec.height, spec.width, spec.in_channels) {
        return Err(Error::Failed(format!(
            "data is {h}x{w}x{c} but the model expects {}x{}x{}",
            spec.height, spec.width, spec.in_channels
        )));
    }
    write_atomic(&out_dir.join(RESOLVED_CONFIG), cfg.to_toml().as_bytes())?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut model = Model::<T>::init(&spec, &mut init_rng)?;
    let mut adam = AdamState::new(&model);
    (adam.beta1, adam.beta2, adam.epsilon) = (t.adam_beta1, t.adam_beta2, t.adam_epsilon);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x5DEE_CE66_D1CE_5EED);

    let n = data.train.len();
    let steps_per_epoch = n / t.batch;
    if t.epochs > 0 && steps_per_epoch == 0 {
        return Err(Error::Failed(format!("batch {} exceeds the {n} training examples", t.batch)));
    }
    let schedule = Schedule { epochs: t.epochs, warmup_epochs: t.warmup_epochs, peak: t.peak_lr, steps_per_epoch };

    let eval_model = |m: &Model<T>, split: &DatasetSplit| -> Result<(f64, f64)> {
        if t.eval_lowered && uses_fixed_lrlc(m) {
            evaluate(&m.lower()?, split, t.eval_batch)
        } else {
            evaluate(m, split, t.eval_batch)
        }
    };

    let mut rows = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0);
    let mut step = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=t.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut hit_sum, mut lr) = (0.0, 0.0, 0.0);
        for batch in order.chunks_exact(t.batch) {
            let (x, labels) = data.train.batch(batch);
            let out = model.train_step(&x.cast::<T>(), &labels)?;
            lr = schedule.rate(step);
            adam.apply(&mut model, &out.grads, lr)?;
            loss_sum += out.loss;
            hit_sum += top1(&out.logits, &labels)?;
            step += 1;
        }
        let train_seconds = if t.test_mode { 0.0 } else { started.elapsed().as_secs_f64() };
        let steps = steps_per_epoch as f64;
        let mut epoch_rows = vec![MetricRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / steps,
            top1: hit_sum / steps,
            lr,
            seconds: train_seconds,
        }];
        let started = Instant::now();
        let (vl, vt) = eval_model(&model, &data.validation)?;
        let seconds = if t.test_mode { 0.0 } else { started.elapsed().as_secs_f64() };
        epoch_rows.push(MetricRow { epoch, split: "validation".into(), loss: vl, top1: vt, lr, seconds });
        if epoch == t.epochs {
            let started = Instant::now();
            let (tl, tt) = eval_model(&model, &data.test)?;
            let seconds = if t.test_mode { 0.0 } else { started.elapsed().as_secs_f64() };
            epoch_rows.push(MetricRow { epoch, split: "test".into(), loss: tl, top1: tt, lr, seconds });
        }
        for r in &epoch_rows {
            progress(r);
        }
        rows.extend(epoch_rows);
        write_atomic(&out_dir.join(METRICS_FILE), metrics_csv(&rows).as_bytes())?;
        checkpoint::save(&out_dir.join("checkpoint"), &model, epoch, Some(cfg))?;
        if vt > best.0 {
            best = (vt, epoch);
            checkpoint::save(&out_dir.join("best"), &model, epoch, Some(cfg))?;
        }
    }
    if t.epochs == 0 {
        write_atomic(&out_dir.join(METRICS_FILE), metrics_csv(&rows).as_bytes())?;
        checkpoint::save(&out_dir.join("checkpoint"), &model, 0, Some(cfg))?;
    }

    let validation_top1 = match rows.iter().rev().find(|r| r.split == "validation") {
        Some(r) => r.top1,
        None => eval_model(&model, &data.validation)?.1,
    };
    let test_top1 = match rows.iter().rev().find(|r| r.split == "test") {
        Some(r) => r.top1,
        None => eval_model(&model, &data.test)?.1,
    };
    if best.0 == f64::NEG_INFINITY {
        best = (validation_top1, 0);
    }
    Ok(RunOutcome { metrics: rows, validation_top1, test_top1, best_validation_top1: best.0, best_epoch: best.1 })
}
