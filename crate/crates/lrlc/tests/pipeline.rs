mod common;

use std::fs;
use std::path::Path;

use lrlc::checkpoint;
use lrlc::heatmap::export_heatmaps;
use lrlc::sweep::run_experiment;
use lrlc::train::{evaluate, train_run, METRICS_FILE};
use lrlc::{load_dataset, Error};
use lrlc_core::lrlc::CombiningWeights;
use lrlc_core::model::{Layer, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn untrained_accuracy(cfg: &lrlc::config::ExperimentConfig, split: &lrlc::data::DatasetSplit) -> f64 {
    let model = Model::<f64>::init(&cfg.model_spec().unwrap(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed)).unwrap();
    let logits = model.predict(&split.images.cast::<f64>()).unwrap();
    let classes = logits.shape()[1];
    let hits = logits
        .data()
        .chunks_exact(classes)
        .zip(&split.labels)
        .filter(|(row, &l)| {
            let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == l
        })
        .count();
    hits as f64 / split.len() as f64
}

#[test]
fn zero_epoch_sweep_reports_untrained_accuracy() {
    let data_dir = tempfile::tempdir().unwrap();
    common::write_mnist(data_dir.path(), 200, 60, false);
    let out = tempfile::tempdir().unwrap();
    let cfg = common::small_config(
        data_dir.path(),
        &[
            "train.epochs=0",
            "train.warmup_epochs=0",
            "model.kind=\"lrlc\"",
            "model.rank=1",
            "sweep.kinds=[\"conv\",\"lrlc\"]",
            "sweep.placements=[\"second\"]",
            "sweep.ranks=[1,2]",
            "sweep.seeds=[0,1]",
        ],
    );
    let data = load_dataset(&cfg, data_dir.path()).unwrap();
    let r = run_experiment(&cfg, &data, out.path(), &|_, _| {}).unwrap();
    assert!(r.failures.is_empty());
    assert_eq!(r.per_seed.len(), 2 + 2 * 2);
    for (cell, o) in &r.per_seed {
        let c = cell.config(&cfg);
        assert_eq!(o.validation_top1, untrained_accuracy(&c, &data.validation), "{}", cell.id());
        assert_eq!(o.test_top1, untrained_accuracy(&c, &data.test), "{}", cell.id());
        assert!(out.path().join("cells").join(cell.id()).join("checkpoint").join("manifest.toml").is_file());
    }
    let summary = read_csv(&out.path().join("summary.csv"));
    assert_eq!(summary.len(), 3);

    // mean and standard error recomputed from the raw per-seed CSV
    let per_seed = read_csv(&out.path().join("per_seed.csv"));
    let mut nonzero_se = false;
    for row in &summary {
        for (col, summary_col) in [(4, 4), (5, 6)] {
            let v: Vec<f64> = per_seed.iter().filter(|p| p[..3] == row[..3]).map(|p| p[col].parse().unwrap()).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
            assert_eq!(row[3], v.len().to_string());
            assert_eq!(row[summary_col].parse::<f64>().unwrap(), mean, "{row:?}");
            assert_eq!(row[summary_col + 1].parse::<f64>().unwrap(), sd / n.sqrt(), "{row:?}");
            nonzero_se |= sd > 0.0;
        }
    }
    assert!(nonzero_se);

    // no training steps: stored parameters are the initial ones
    for (cell, _) in &r.per_seed {
        let c = cell.config(&cfg);
        let init = Model::<f64>::init(&c.model_spec().unwrap(), &mut ChaCha8Rng::seed_from_u64(c.train.seed)).unwrap();
        let (stored, m) =
            checkpoint::load::<f64>(&out.path().join("cells").join(cell.id()).join("checkpoint")).unwrap();
        assert_eq!(m.epoch, 0);
        assert_eq!(stored, init, "{}", cell.id());
    }
}

#[test]
fn constant_predictions_score_the_class_frequency() {
    let data_dir = tempfile::tempdir().unwrap();
    common::write_mnist(data_dir.path(), 150, 90, false);
    let cfg = common::small_config(data_dir.path(), &[]);
    let data = load_dataset(&cfg, data_dir.path()).unwrap();
    let mut model = Model::<f64>::init(&cfg.model_spec().unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    model.head.weight.fill(0.0);
    model.head.bias.fill(0.0);
    model.head.bias.data_mut()[3] = 1.0;
    let want = data.test.labels.iter().filter(|&&l| l == 3).count() as f64 / data.test.len() as f64;
    assert!(want > 0.0);
    assert_eq!(evaluate(&model, &data.test, 7).unwrap().1, want);
}

#[test]
fn rank_sweep_marks_the_validation_argmax() {
    let data_dir = tempfile::tempdir().unwrap();
    common::write_mnist(data_dir.path(), 200, 40, false);
    let out = tempfile::tempdir().unwrap();
    let cfg = common::small_config(
        data_dir.path(),
        &[
            "train.epochs=1",
            "model.kind=\"lrlc\"",
            "model.rank=1",
            "model.placement=\"first\"",
            "sweep.ranks=[1,2,4,8]",
            "sweep.seeds=[0]",
            "sweep.jobs=2",
        ],
    );
    let data = load_dataset(&cfg, data_dir.path()).unwrap();
    run_experiment(&cfg, &data, out.path(), &|_, _| {}).unwrap();

    let per_seed = read_csv(&out.path().join("per_seed.csv"));
    let summary = read_csv(&out.path().join("summary.csv"));
    let ranks: Vec<&str> = summary.iter().map(|r| r[2].as_str()).collect();
    assert_eq!(ranks, ["1", "2", "4", "8"]);
    let vals: Vec<f64> = per_seed.iter().map(|r| r[4].parse().unwrap()).collect();
    let best = (0..vals.len()).fold(0, |b, i| if vals[i] > vals[b] { i } else { b });
    for (i, row) in summary.iter().enumerate() {
        assert_eq!(row[8], if i == best { "1" } else { "0" }, "{summary:?}");
    }
}

#[test]
fn failed_cells_are_recorded_and_others_continue() {
    let data_dir = tempfile::tempdir().unwrap();
    common::write_mnist(data_dir.path(), 150, 20, false);
    let out = tempfile::tempdir().unwrap();
    // 50 training examples: batch 60 cannot form a single step
    let cfg = common::small_config(data_dir.path(), &["train.batch=60", "train.epochs=1", "sweep.seeds=[0,1]"]);
    let data = load_dataset(&cfg, data_dir.path()).unwrap();
    let r = run_experiment(&cfg, &data, out.path(), &|_, _| {}).unwrap();
    assert_eq!(r.failures.len(), 2);
    let text = fs::read_to_string(out.path().join("failures.csv")).unwrap();
    assert!(text.contains("conv_all_s1") && text.contains("exceeds"), "{text}");
}

#[test]
fn training_is_reproducible_and_learns() {
    let data_dir = tempfile::tempdir().unwrap();
    common::write_mnist(data_dir.path(), 400, 100, false);
    let cfg = common::small_config(
        data_dir.path(),
        &["train.epochs=6", "model.channels=8", "train.peak_lr=0.05", "model.kind=\"lrlc\"", "model.rank=2"],
    );
    let data = load_dataset(&cfg, data_dir.path()).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = train_run(&cfg, &data, a.path(), &mut |_| {}).unwrap();
    train_run(&cfg, &data, b.path(), &mut |_| {}).unwrap();
    let ma = fs::read(a.path().join(METRICS_FILE)).unwrap();
    assert_eq!(ma, fs::read(b.path().join(METRICS_FILE)).unwrap());
    assert_eq!(
        fs::read(a.path().join("checkpoint/tensors.bin")).unwrap(),
        fs::read(b.path().join("checkpoint/tensors.bin")).unwrap()
    );
    // 6 epochs × (train, validation) + test
    assert_eq!(ra.metrics.len(), 13);
    // chance is 0.1 on 100 validation examples
    assert!(ra.validation_top1 > 0.2, "{ra:?}");
    assert!(ra.metrics[10].loss < ra.metrics[0].loss);

    let validation: Vec<(usize, f64)> =
        ra.metrics.iter().filter(|m| m.split == "validation").map(|m| (m.epoch, m.top1)).collect();
    let best = validation.iter().fold(validation[0], |b, &v| if v.1 > b.1 { v } else { b });
    assert_eq!((ra.best_epoch, ra.best_validation_top1), best);
    assert_eq!(checkpoint::read_manifest(&a.path().join("best")).unwrap().epoch, best.0);

    let (model, manifest) = checkpoint::load::<f64>(&a.path().join("checkpoint")).unwrap();
    assert_eq!(manifest.epoch, 6);
    assert_eq!(manifest.experiment.as_ref(), Some(&cfg));
    let (loss, top1) = evaluate(&model, &data.test, 50).unwrap();
    assert_eq!(top1, ra.test_top1);
    let (lloss, ltop1) = evaluate(&model.lower().unwrap(), &data.test, 50).unwrap();
    assert_eq!(ltop1, top1);
    assert!((lloss - loss).abs() < 1e-9 * loss.max(1.0));

    let other = common::small_config(
        data_dir.path(),
        &[
            "train.epochs=6",
            "model.channels=8",
            "train.peak_lr=0.05",
            "model.kind=\"lrlc\"",
            "model.rank=2",
            "train.seed=1",
        ],
    );
    let c = tempfile::tempdir().unwrap();
    train_run(&other, &data, c.path(), &mut |_| {}).unwrap();
    assert_ne!(ma, fs::read(c.path().join(METRICS_FILE)).unwrap());
}

#[test]
fn heatmaps_match_softmax_of_the_stored_logits() {
    let data_dir = tempfile::tempdir().unwrap();
    common::write_mnist(data_dir.path(), 150, 20, false);
    let run = tempfile::tempdir().unwrap();
    let cfg = common::small_config(
        data_dir.path(),
        &["train.epochs=1", "model.kind=\"lrlc\"", "model.rank=3", "model.placement=\"second\""],
    );
    let data = load_dataset(&cfg, data_dir.path()).unwrap();
    train_run(&cfg, &data, run.path(), &mut |_| {}).unwrap();
    let (model, _) = checkpoint::load::<f64>(&run.path().join("checkpoint")).unwrap();
    let maps = tempfile::tempdir().unwrap();
    let files = export_heatmaps(&model, None, maps.path()).unwrap();
    assert_eq!(files.len(), 1 + 2 * 3);

    let Layer::Lrlc(layer) = &model.blocks[1].layer else { panic!("block 1 is not lrlc") };
    let CombiningWeights::Factorized { alpha, beta } = &layer.weights else { panic!("expected factorized weights") };
    let rows = read_csv(&maps.path().join("block1_weights.csv"));
    assert_eq!(rows.len(), 28 * 28);
    for row in rows {
        let (i, j): (usize, usize) = (row[0].parse().unwrap(), row[1].parse().unwrap());
        let logits: Vec<f64> = (0..3).map(|k| alpha.data()[k * 28 + i] + beta.data()[k * 28 + j]).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let got: Vec<f64> = row[2..].iter().map(|v| v.parse().unwrap()).collect();
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for k in 0..3 {
            assert!((got[k] - logits[k].exp() / z).abs() < 1e-12, "({i},{j},{k})");
        }
    }
    let pgm = fs::read(maps.path().join("block1_k2.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n28 28\n255\n"));
    assert_eq!(pgm.len(), 13 + 28 * 28);

    assert!(matches!(export_heatmaps(&model.lower().unwrap(), None, maps.path()), Err(Error::Failed(_))));
}

#[test]
fn dynamic_heatmaps_are_per_example() {
    let data_dir = tempfile::tempdir().unwrap();
    common::write_mnist(data_dir.path(), 150, 20, false);
    let cfg = common::small_config(
        data_dir.path(),
        &[
            "train.epochs=0",
            "train.warmup_epochs=0",
            "model.kind=\"dynamic_lrlc\"",
            "model.rank=2",
            "model.placement=\"first\"",
        ],
    );
    let model = Model::<f64>::init(&cfg.model_spec().unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let data = load_dataset(&cfg, data_dir.path()).unwrap();
    let x = data.test.batch(&[0, 1, 2]).0.cast::<f64>();
    let maps = tempfile::tempdir().unwrap();
    assert!(export_heatmaps(&model, None, maps.path()).is_err());
    let files = export_heatmaps(&model, Some(&x), maps.path()).unwrap();
    assert_eq!(files.len(), 3 * (1 + 2 * 2));
    // the zero-initialized head mixes uniformly
    for row in read_csv(&maps.path().join("block0_ex2_weights.csv")) {
        assert_eq!(&row[2..], ["0.5", "0.5"]);
    }
}
