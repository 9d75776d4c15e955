//! Checkpoints: a directory holding `manifest.toml` and `tensors.bin`, the
//! latter a sequence of tensor containers in manifest order.

use std::fs;
use std::path::Path;

use lrlc_core::container;
use lrlc_core::dynamic::{BranchSpec, DynamicNetConfig};
use lrlc_core::lrlc::WeightMode;
use lrlc_core::model::{LayerKind, Model, ModelSpec, Placement};
use lrlc_core::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{format_err, io_err, Result};
use crate::fsutil::{replace_dir, sha256_hex, write_atomic};

pub const MANIFEST: &str = "manifest.toml";
pub const TENSORS: &str = "tensors.bin";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecRecord {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub channels: usize,
    pub depth: usize,
    pub filter: usize,
    pub classes: usize,
    pub kind: String,
    pub placement: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rank: Option<usize>,
    pub weights: String,
    pub dynamic_projection: usize,
    pub dynamic_branches: Vec<[usize; 2]>,
    pub dynamic_bottleneck: usize,
    pub dynamic_expansion: usize,
}

impl From<&ModelSpec> for SpecRecord {
    fn from(s: &ModelSpec) -> Self {
        SpecRecord {
            height: s.height,
            width: s.width,
            in_channels: s.in_channels,
            channels: s.channels,
            depth: s.depth,
            filter: s.filter,
            classes: s.classes,
            kind: s.kind.name().into(),
            placement: s.placement.name().into(),
            rank: s.rank,
            weights: match s.mode {
                WeightMode::Factorized => "factorized".into(),
                WeightMode::Full => "full".into(),
            },
            dynamic_projection: s.dynamic.projection,
            dynamic_branches: s.dynamic.branches.iter().map(|b| [b.pool, b.dilation]).collect(),
            dynamic_bottleneck: s.dynamic.bottleneck,
            dynamic_expansion: s.dynamic.expansion,
        }
    }
}

impl SpecRecord {
    pub fn to_spec(&self, path: &Path) -> Result<ModelSpec> {
        let bad = |what: &str| format_err(path, format!("unknown {what} in manifest"));
        Ok(ModelSpec {
            height: self.height,
            width: self.width,
            in_channels: self.in_channels,
            channels: self.channels,
            depth: self.depth,
            filter: self.filter,
            classes: self.classes,
            kind: LayerKind::parse(&self.kind).ok_or_else(|| bad("kind"))?,
            placement: Placement::parse(&self.placement).ok_or_else(|| bad("placement"))?,
            rank: self.rank,
            mode: match self.weights.as_str() {
                "factorized" => WeightMode::Factorized,
                "full" => WeightMode::Full,
                _ => return Err(bad("weight mode")),
            },
            dynamic: DynamicNetConfig {
                projection: self.dynamic_projection,
                branches: self.dynamic_branches.iter().map(|&[pool, dilation]| BranchSpec { pool, dilation }).collect(),
                bottleneck: self.dynamic_bottleneck,
                expansion: self.dynamic_expansion,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub dtype: String,
    /// Fixed-weight LRLC layers are stored in locally connected form.
    pub lowered: bool,
    /// Completed training epochs.
    pub epoch: usize,
    pub model: SpecRecord,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub experiment: Option<ExperimentConfig>,
    pub tensors: Vec<TensorRecord>,
}

/// Writes `model` to directory `dir`, replacing any previous checkpoint there.
pub fn save<T: Scalar>(
    dir: &Path,
    model: &Model<T>,
    epoch: usize,
    experiment: Option<&ExperimentConfig>,
) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.named_tensors() {
        let start = blob.len();
        container::encode(t, &mut blob)?;
        tensors.push(TensorRecord {
            name,
            shape: t.shape().to_vec(),
            offset: start as u64,
            bytes: (blob.len() - start) as u64,
            sha256: sha256_hex(&blob[start..]),
        });
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        dtype: if T::DTYPE == lrlc_core::Dtype::F32 { "f32".into() } else { "f64".into() },
        lowered: model.is_lowered(),
        epoch,
        model: SpecRecord::from(&model.spec),
        experiment: experiment.cloned(),
        tensors,
    };
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let staging = parent.join(format!(
        ".{}.staging{}",
        dir.file_name().unwrap_or_default().to_string_lossy(),
        std::process::id()
    ));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    write_atomic(&staging.join(TENSORS), &blob)?;
    write_atomic(&staging.join(MANIFEST), toml::to_string_pretty(&manifest).expect("manifest serializes").as_bytes())?;
    replace_dir(&staging, dir)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
    if m.format != FORMAT_VERSION {
        return Err(format_err(&path, format!("unsupported checkpoint format {}", m.format)));
    }
    Ok(m)
}

/// Loads a checkpoint, converting stored tensors to `T`.
pub fn load<T: Scalar>(dir: &Path) -> Result<(Model<T>, Manifest)> {
    let manifest = read_manifest(dir)?;
    let mpath = dir.join(MANIFEST);
    let spec = manifest.model.to_spec(&mpath)?;
    let mut model = Model::<T>::init(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    if manifest.lowered {
        model = model.lower()?;
    }
    let bpath = dir.join(TENSORS);
    let blob = fs::read(&bpath).map_err(io_err(&bpath))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for rec in &manifest.tensors {
        let range = rec.offset as usize..(rec.offset + rec.bytes) as usize;
        let bytes = blob.get(range).ok_or_else(|| {
            format_err(&bpath, format!("{} extends past the end of the file (offset {})", rec.name, rec.offset))
        })?;
        if sha256_hex(bytes) != rec.sha256 {
            return Err(format_err(
                &bpath,
                format!("checksum mismatch for {} at byte offset {}", rec.name, rec.offset),
            ));
        }
        let t = container::from_bytes(bytes)
            .map_err(|e| format_err(&bpath, format!("{} at byte offset {}: {e}", rec.name, rec.offset)))?;
        let t: Tensor<T> = t.into_tensor();
        tensors.push((rec.name.clone(), t));
    }
    model.load_named(tensors)?;
    Ok((model, manifest))
}
