//! Combining-weight maps as CSV and 8-bit PGM.

use std::path::{Path, PathBuf};

use lrlc_core::model::{Layer, Model};
use lrlc_core::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Largest deviation from 1 tolerated for the per-position sum over k.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Writes one `H×W×K` normalized map as `<prefix>_weights.csv` (one row per
/// position: `i,j,w0,…`), and per k `<prefix>_k<k>.csv` (H×W grid) and
/// `<prefix>_k<k>.pgm`.
pub fn write_weight_maps<T: Scalar>(
    dir: &Path,
    prefix: &str,
    weights: &[T],
    h: usize,
    w: usize,
    k: usize,
) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut long = String::from("i,j");
    for kk in 0..k {
        long.push_str(&format!(",w{kk}"));
    }
    long.push('\n');
    for i in 0..h {
        for j in 0..w {
            let p = &weights[(i * w + j) * k..(i * w + j + 1) * k];
            let sum: f64 = p.iter().map(|v| v.as_f64()).sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE || p.iter().any(|v| v.as_f64() < 0.0) {
                return Err(Error::Failed(format!("{prefix}: weights at ({i},{j}) are not normalized (sum {sum})")));
            }
            long.push_str(&format!("{i},{j}"));
            for v in p {
                long.push_str(&format!(",{}", v.as_f64()));
            }
            long.push('\n');
        }
    }
    let path = dir.join(format!("{prefix}_weights.csv"));
    write_atomic(&path, long.as_bytes())?;
    files.push(path);

    for kk in 0..k {
        let at = |i: usize, j: usize| weights[(i * w + j) * k + kk].as_f64();
        let grid: String =
            (0..h).map(|i| (0..w).map(|j| at(i, j).to_string()).collect::<Vec<_>>().join(",") + "\n").collect();
        let path = dir.join(format!("{prefix}_k{kk}.csv"));
        write_atomic(&path, grid.as_bytes())?;
        files.push(path);

        let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
        for i in 0..h {
            for j in 0..w {
                pgm.push((at(i, j).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        let path = dir.join(format!("{prefix}_k{kk}.pgm"));
        write_atomic(&path, &pgm)?;
        files.push(path);
    }
    Ok(files)
}

/// Exports the maps of every LRLC block. Input-dependent blocks need
/// `examples` (a batch in the model's input layout) and get one map per example.
pub fn export_heatmaps<T: Scalar>(model: &Model<T>, examples: Option<&Tensor<T>>, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let inputs = match examples {
        Some(x) if model.blocks.iter().any(|b| matches!(b.layer, Layer::DynamicLrlc(_))) => {
            Some(model.block_inputs(x)?)
        }
        _ => None,
    };
    for (b, block) in model.blocks.iter().enumerate() {
        match &block.layer {
            Layer::Lrlc(l) => {
                let wts = l.normalized_weights()?;
                let s = wts.shape();
                files.extend(write_weight_maps(dir, &format!("block{b}"), wts.data(), s[0], s[1], s[2])?);
            }
            Layer::DynamicLrlc(l) => {
                let Some(inputs) = &inputs else {
                    return Err(Error::Failed(format!(
                        "block {b} has input-dependent weights; example inputs are required"
                    )));
                };
                let wts = l.normalized_weights(&inputs[b])?;
                let s = wts.shape();
                let per = s[1] * s[2] * s[3];
                for e in 0..s[0] {
                    let prefix = format!("block{b}_ex{e}");
                    files.extend(write_weight_maps(
                        dir,
                        &prefix,
                        &wts.data()[e * per..(e + 1) * per],
                        s[1],
                        s[2],
                        s[3],
                    )?);
                }
            }
            Layer::Lowered(_) => {
                return Err(Error::Failed(format!(
                    "block {b} is lowered; its combining weights are no longer separable"
                )));
            }
            _ => {}
        }
    }
    Ok(files)
}
