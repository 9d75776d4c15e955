//! Sweeps over layer kind × placement × rank × seed.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use lrlc_core::model::LayerKind;

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::fsutil::write_atomic;
use crate::train::{train_run, MetricRow, RunOutcome, RESOLVED_CONFIG};

pub const PER_SEED_HEADER: &str = "kind,placement,rank,seed,validation_top1,test_top1,best_validation_top1,best_epoch";
pub const SUMMARY_HEADER: &str = "kind,placement,rank,seeds,validation_mean,validation_se,test_mean,test_se,optimal";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Cell {
    pub kind: String,
    pub placement: String,
    pub rank: Option<usize>,
    pub seed: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        match self.rank {
            Some(k) => format!("{}_{}_r{k}_s{}", self.kind, self.placement, self.seed),
            None => format!("{}_{}_s{}", self.kind, self.placement, self.seed),
        }
    }

    pub fn config(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.model.kind = self.kind.clone();
        c.model.placement = self.placement.clone();
        c.model.rank = self.rank;
        c.train.seed = self.seed;
        c
    }
}

/// Every cell of the sweep. Convolution ignores placement and rank.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for kind in cfg.sweep_kinds() {
        let k = LayerKind::parse(&kind);
        let placements = if k == Some(LayerKind::Conv) { vec![String::from("all")] } else { cfg.sweep_placements() };
        let ranks: Vec<Option<usize>> =
            if k.is_some_and(|k| k.ranked()) { cfg.sweep_ranks().into_iter().map(Some).collect() } else { vec![None] };
        for placement in &placements {
            for &rank in &ranks {
                for &seed in &cfg.sweep.seeds {
                    out.push(Cell { kind: kind.clone(), placement: placement.clone(), rank, seed });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub kind: String,
    pub placement: String,
    pub rank: Option<usize>,
    pub seeds: usize,
    pub validation_mean: f64,
    pub validation_se: f64,
    pub test_mean: f64,
    pub test_se: f64,
    /// Highest mean validation top-1 within its kind and placement.
    pub optimal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub per_seed: Vec<(Cell, RunOutcome)>,
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<(Cell, String)>,
}

/// Mean and standard error (sample standard deviation over √n; 0 for one value).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / n.sqrt())
}

pub fn summarize(per_seed: &[(Cell, RunOutcome)]) -> Vec<SummaryRow> {
    let mut groups: Vec<(Cell, Vec<&RunOutcome>)> = Vec::new();
    for (cell, out) in per_seed {
        let key = Cell { seed: 0, ..cell.clone() };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(out),
            None => groups.push((key, vec![out])),
        }
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|(key, outs)| {
            let (vm, vs) = mean_se(&outs.iter().map(|o| o.validation_top1).collect::<Vec<_>>());
            let (tm, ts) = mean_se(&outs.iter().map(|o| o.test_top1).collect::<Vec<_>>());
            SummaryRow {
                kind: key.kind,
                placement: key.placement,
                rank: key.rank,
                seeds: outs.len(),
                validation_mean: vm,
                validation_se: vs,
                test_mean: tm,
                test_se: ts,
                optimal: false,
            }
        })
        .collect();
    // first (smallest-rank) row wins ties
    for i in 0..rows.len() {
        let best = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.kind == rows[i].kind && r.placement == rows[i].placement)
            .fold(None::<(usize, f64)>, |acc, (j, r)| match acc {
                Some((_, v)) if v >= r.validation_mean => acc,
                _ => Some((j, r.validation_mean)),
            });
        rows[i].optimal = best.map(|(j, _)| j) == Some(i);
    }
    rows
}

fn rank_field(rank: Option<usize>) -> String {
    rank.map(|k| k.to_string()).unwrap_or_default()
}

pub fn per_seed_csv(per_seed: &[(Cell, RunOutcome)]) -> String {
    let mut s = format!("{PER_SEED_HEADER}\n");
    for (c, o) in per_seed {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.kind,
            c.placement,
            rank_field(c.rank),
            c.seed,
            o.validation_top1,
            o.test_top1,
            o.best_validation_top1,
            o.best_epoch
        ));
    }
    s
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.kind,
            r.placement,
            rank_field(r.rank),
            r.seeds,
            r.validation_mean,
            r.validation_se,
            r.test_mean,
            r.test_se,
            u8::from(r.optimal)
        ));
    }
    s
}

/// Runs every cell on `data`, writing `cells/<id>/…`, `per_seed.csv` and
/// `summary.csv` under `out_dir`. Failed cells are collected, not fatal.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out_dir: &Path,
    progress: &(dyn Fn(&Cell, &MetricRow) + Sync),
) -> Result<SweepResult> {
    write_atomic(&out_dir.join(RESOLVED_CONFIG), cfg.to_toml().as_bytes())?;
    let all = cells(cfg);
    let results: Mutex<Vec<Option<std::result::Result<RunOutcome, String>>>> = Mutex::new(vec![None; all.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(cell) = all.get(i) else { break };
        let dir = out_dir.join("cells").join(cell.id());
        let r = train_run(&cell.config(cfg), data, &dir, &mut |row| progress(cell, row)).map_err(|e| e.to_string());
        results.lock().expect("results lock")[i] = Some(r);
    };
    let jobs = cfg.sweep.jobs.clamp(1, all.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    let mut per_seed = Vec::new();
    let mut failures = Vec::new();
    for (cell, r) in all.into_iter().zip(results.into_inner().expect("results lock")) {
        match r {
            Some(Ok(o)) => per_seed.push((cell, o)),
            Some(Err(e)) => failures.push((cell, e)),
            None => failures.push((cell, String::from("cell did not run"))),
        }
    }
    let summary = summarize(&per_seed);
    write_atomic(&out_dir.join("per_seed.csv"), per_seed_csv(&per_seed).as_bytes())?;
    write_atomic(&out_dir.join("summary.csv"), summary_csv(&summary).as_bytes())?;
    if !failures.is_empty() {
        let text: String = failures.iter().map(|(c, e)| format!("{},{}\n", c.id(), e.replace('\n', " "))).collect();
        write_atomic(&out_dir.join("failures.csv"), format!("cell,error\n{text}").as_bytes())?;
    }
    Ok(SweepResult { per_seed, summary, failures })
}
