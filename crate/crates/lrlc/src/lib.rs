//! Datasets, checkpoints, training runs, sweeps and artifact export built on
//! [`lrlc_core`].

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod heatmap;
pub mod report;
pub mod sweep;
pub mod train;

pub use error::{Error, Result};

use std::path::Path;

use config::ExperimentConfig;
use data::{Dataset, Preparation};

/// Loads and prepares the dataset named by `cfg` from `dir`.
pub fn load_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    let raw = match cfg.data.dataset.as_str() {
        "cifar10" => data::load_cifar10_raw(dir)?,
        _ => data::load_mnist_raw(dir)?,
    };
    let prep = Preparation {
        validation: cfg.data.validation,
        translate: cfg.translate_spec(),
        train_limit: cfg.data.train_limit,
        test_limit: cfg.data.test_limit,
    };
    data::prepare(raw, &prep)
}
