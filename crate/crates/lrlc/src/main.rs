use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use lrlc::checkpoint;
use lrlc::config::ExperimentConfig;
use lrlc::data::SplitName;
use lrlc::heatmap::export_heatmaps;
use lrlc::report::{cost_csv, parse_modes};
use lrlc::sweep::run_experiment;
use lrlc::train::{evaluate, train_run};
use lrlc::{load_dataset, Error};
use lrlc_core::model::Model;
use lrlc_core::Scalar;

/// Low-rank locally connected layers: training, sweeps and artifacts.
#[derive(Parser)]
#[command(name = "lrlc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model.
    Train(RunArgs),
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Evaluate through the lowered (locally connected) form.
        #[arg(long)]
        lowered: bool,
        /// Override config keys of the stored experiment, e.g. `data.dir=/data/mnist`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train every kind × placement × rank × seed cell and summarize.
    Sweep(RunArgs),
    /// Convert fixed-weight LRLC layers of a checkpoint to locally connected layers.
    Lower {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print or write the parameter and MAC table of the configured model.
    Costs {
        #[command(flatten)]
        config: ConfigArgs,
        /// train, lowered_inference, dynamic or all.
        #[arg(long, default_value = "all")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export combining-weight maps of a checkpoint.
    Heatmaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Test examples used for input-dependent layers.
        #[arg(long, default_value_t = 4)]
        examples: usize,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment file; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `model.rank=4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> lrlc::Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p, &self.overrides),
            None => ExperimentConfig::parse("", &self.overrides),
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn stored_config(manifest: &checkpoint::Manifest, overrides: &[String]) -> anyhow::Result<ExperimentConfig> {
    let base = manifest.experiment.clone().context("checkpoint does not record its experiment configuration")?;
    Ok(ExperimentConfig::parse(&base.to_toml(), overrides)?)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let mut cfg = args.config.load()?;
            if let Some(out) = args.out {
                cfg.output.dir = out;
            }
            if args.config.print_config {
                print!("{}", cfg.to_toml());
                return Ok(ExitCode::SUCCESS);
            }
            let data = load_dataset(&cfg, &cfg.require_data_dir()?)?;
            let out = train_run(&cfg, &data, &cfg.output.dir, &mut |r| eprintln!("{}", r.csv()))?;
            println!("validation_top1={} test_top1={}", out.validation_top1, out.test_top1);
        }
        Command::Sweep(args) => {
            let mut cfg = args.config.load()?;
            if let Some(out) = args.out {
                cfg.output.dir = out;
            }
            if args.config.print_config {
                print!("{}", cfg.to_toml());
                return Ok(ExitCode::SUCCESS);
            }
            let data = load_dataset(&cfg, &cfg.require_data_dir()?)?;
            let result =
                run_experiment(&cfg, &data, &cfg.output.dir, &|cell, r| eprintln!("{} {}", cell.id(), r.csv()))?;
            print!("{}", lrlc::sweep::summary_csv(&result.summary));
            if !result.failures.is_empty() {
                for (cell, e) in &result.failures {
                    eprintln!("cell {} failed: {e}", cell.id());
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Eval { checkpoint: dir, split, lowered, overrides } => {
            let (model, manifest) = checkpoint::load::<f64>(&dir)?;
            let cfg = stored_config(&manifest, &overrides)?;
            let Some(split) = SplitName::parse(&split) else { bail!("unknown split {split}") };
            let data = load_dataset(&cfg, &cfg.require_data_dir()?)?;
            let model = if lowered { model.lower()? } else { model };
            let (loss, top1) = evaluate(&model, data.split(split), cfg.train.eval_batch)?;
            println!("split={} loss={loss} top1={top1}", split.name());
        }
        Command::Lower { checkpoint: dir, out } => {
            let manifest = checkpoint::read_manifest(&dir)?;
            if manifest.dtype == "f32" {
                lower_as::<f32>(&dir, &out)?;
            } else {
                lower_as::<f64>(&dir, &out)?;
            }
            println!("{}", out.display());
        }
        Command::Costs { config, mode, out } => {
            let cfg = config.load()?;
            if config.print_config {
                print!("{}", cfg.to_toml());
                return Ok(ExitCode::SUCCESS);
            }
            let modes = parse_modes(&mode).with_context(|| format!("unknown cost mode {mode}"))?;
            let csv = cost_csv(&cfg.model_spec()?, &modes);
            match out {
                Some(p) => lrlc::fsutil::write_atomic(&p, csv.as_bytes())?,
                None => print!("{csv}"),
            }
        }
        Command::Heatmaps { checkpoint: dir, out, examples, overrides } => {
            let (model, manifest) = checkpoint::load::<f64>(&dir)?;
            let needs_inputs = model.blocks.iter().any(|b| matches!(b.layer, lrlc_core::model::Layer::DynamicLrlc(_)));
            let batch = if needs_inputs {
                let cfg = stored_config(&manifest, &overrides)?;
                let data = load_dataset(&cfg, &cfg.require_data_dir()?)?;
                let n = examples.min(data.test.len());
                Some(data.test.batch(&(0..n).collect::<Vec<_>>()).0.cast::<f64>())
            } else {
                None
            };
            let files = export_heatmaps(&model, batch.as_ref(), &out)?;
            println!("{} files written to {}", files.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn lower_as<T: Scalar>(dir: &Path, out: &Path) -> Result<(), Error> {
    let (model, manifest): (Model<T>, _) = checkpoint::load(dir)?;
    checkpoint::save(out, &model.lower()?, manifest.epoch, manifest.experiment.as_ref())
}
