//! Experiment configuration: a TOML tree checked against a schema, with every
//! violation reported at once.

use std::path::{Path, PathBuf};

use lrlc_core::dynamic::{BranchSpec, DynamicNetConfig};
use lrlc_core::lrlc::WeightMode;
use lrlc_core::model::{LayerKind, ModelSpec, Placement};
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::data::TranslateSpec;
use crate::error::{Error, Result};

/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "LRLC_DATA_DIR";
/// Largest rank accepted at desk scale.
pub const MAX_RANK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `mnist` or `cifar10`.
    pub dataset: String,
    /// Directory holding the dataset files; defaults to `$LRLC_DATA_DIR/<dataset>`
    /// (or `$LRLC_DATA_DIR` itself when that subdirectory is absent).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Examples carved from the tail of the training files.
    pub validation: usize,
    /// Keep only the first N training / test examples (0 keeps all).
    pub train_limit: usize,
    pub test_limit: usize,
    pub translate: bool,
    /// Canvas extent when translating; 0 picks 1.5× the source extent.
    pub canvas: usize,
    pub translate_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: String,
    pub placement: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// `factorized` or `full`.
    pub weights: String,
    pub channels: usize,
    pub depth: usize,
    pub filter: usize,
    pub dynamic: DynamicConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicConfig {
    pub projection: usize,
    /// `[pool, dilation]` pairs.
    pub branches: Vec<[usize; 2]>,
    pub bottleneck: usize,
    pub expansion: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// 64-bit arithmetic and zeroed timings so metrics are bit-reproducible.
    pub test_mode: bool,
    /// `f32` or `f64`; `test_mode` forces `f64`.
    pub dtype: String,
    pub eval_batch: usize,
    /// Evaluate fixed-weight LRLC models through their lowered form.
    pub eval_lowered: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Empty lists fall back to the single value under `[model]`.
    pub kinds: Vec<String>,
    pub placements: Vec<String>,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Cells run concurrently (1 = sequential).
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: String::from("mnist"),
            dir: None,
            validation: 5000,
            train_limit: 0,
            test_limit: 0,
            translate: false,
            canvas: 0,
            translate_seed: 0,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: String::from("conv"),
            placement: String::from("all"),
            rank: None,
            weights: String::from("factorized"),
            channels: 64,
            depth: 3,
            filter: 3,
            dynamic: DynamicConfig::default(),
        }
    }
}

impl Default for DynamicConfig {
    fn default() -> Self {
        let d = DynamicNetConfig::default();
        DynamicConfig {
            projection: d.projection,
            branches: d.branches.iter().map(|b| [b.pool, b.dilation]).collect(),
            bottleneck: d.bottleneck,
            expansion: d.expansion,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch: 128,
            peak_lr: 0.01,
            warmup_epochs: 2,
            seed: 0,
            test_mode: false,
            dtype: String::from("f32"),
            eval_batch: 500,
            eval_lowered: false,
            adam_beta1: lrlc_core::optim::ADAM_BETA1,
            adam_beta2: lrlc_core::optim::ADAM_BETA2,
            adam_epsilon: lrlc_core::optim::ADAM_EPSILON,
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { kinds: Vec::new(), placements: Vec::new(), ranks: Vec::new(), seeds: vec![0, 1, 2], jobs: 1 }
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs") }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Keys that are valid but absent from the serialized defaults.
const OPTIONAL_KEYS: [(&str, &str); 2] = [("data.dir", "string"), ("model.rank", "integer")];

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Reports unknown and mistyped keys and removes them so the rest can still be checked.
fn check_schema(given: &mut toml::Table, schema: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    let mut drop = Vec::new();
    for (key, value) in given.iter_mut() {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        let want = match schema.get(key) {
            Some(v) => type_name(v),
            None => match OPTIONAL_KEYS.iter().find(|(k, _)| *k == path) {
                Some((_, t)) => t,
                None => {
                    out.push(format!("unknown key `{path}`"));
                    drop.push(key.clone());
                    continue;
                }
            },
        };
        let got = type_name(value);
        if got != want && !(want == "float" && got == "integer") {
            out.push(format!("`{path}` must be of type {want}, got {got}"));
            drop.push(key.clone());
        } else if let (Value::Table(g), Some(Value::Table(s))) = (value, schema.get(key)) {
            check_schema(g, s, &path, out);
        }
    }
    for key in drop {
        given.remove(&key);
    }
}

fn parse_scalar(text: &str) -> Value {
    match format!("v = {text}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.to_string())),
        Err(_) => Value::String(text.to_string()),
    }
}

/// Applies `key.path=value` to a TOML tree; values parse as TOML literals, else as strings.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(vec![format!("override `{assignment}` is not of the form key=value")]))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = tree;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| Value::Table(toml::Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(vec![format!("override `{key}`: `{part}` is not a table")])),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_scalar(value.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text plus overrides and validates the result.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let schema = toml::Table::try_from(ExperimentConfig::default()).expect("defaults serialize");
        let mut problems = Vec::new();
        check_schema(&mut tree, &schema, "", &mut problems);
        let cfg: ExperimentConfig = match tree.try_into() {
            Ok(c) => c,
            Err(e) => {
                problems.push(e.to_string());
                return Err(Error::Config(problems));
            }
        };
        if let Err(Error::Config(more)) = cfg.validate() {
            problems.extend(more);
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// `(H, W, C)` of the source images.
    pub fn source_extent(&self) -> (usize, usize, usize) {
        match self.data.dataset.as_str() {
            "cifar10" => (32, 32, 3),
            _ => (28, 28, 1),
        }
    }

    pub fn translate_spec(&self) -> Option<TranslateSpec> {
        self.data.translate.then(|| {
            let src = self.source_extent().0;
            let canvas = if self.data.canvas == 0 { TranslateSpec::default_canvas(src) } else { self.data.canvas };
            TranslateSpec { canvas, seed: self.data.translate_seed }
        })
    }

    /// `(H, W, C)` the model sees.
    pub fn input_extent(&self) -> (usize, usize, usize) {
        let (h, w, c) = self.source_extent();
        match self.translate_spec() {
            Some(t) => (t.canvas, t.canvas, c),
            None => (h, w, c),
        }
    }

    pub fn data_dir(&self) -> Option<PathBuf> {
        if let Some(d) = &self.data.dir {
            return Some(d.clone());
        }
        let root = PathBuf::from(std::env::var_os(DATA_DIR_ENV)?);
        let nested = root.join(&self.data.dataset);
        Some(if nested.is_dir() { nested } else { root })
    }

    pub fn dynamic_config(&self) -> DynamicNetConfig {
        let d = &self.model.dynamic;
        DynamicNetConfig {
            projection: d.projection,
            branches: d.branches.iter().map(|&[pool, dilation]| BranchSpec { pool, dilation }).collect(),
            bottleneck: d.bottleneck,
            expansion: d.expansion,
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let (h, w, c) = self.input_extent();
        let m = &self.model;
        let kind = LayerKind::parse(&m.kind).ok_or_else(|| Error::Config(vec![format!("unknown kind {}", m.kind)]))?;
        let placement = Placement::parse(&m.placement)
            .ok_or_else(|| Error::Config(vec![format!("unknown placement {}", m.placement)]))?;
        let spec = ModelSpec {
            height: h,
            width: w,
            in_channels: c,
            channels: m.channels,
            depth: m.depth,
            filter: m.filter,
            classes: crate::data::CLASSES,
            kind,
            placement,
            rank: m.rank,
            mode: if m.weights == "full" { WeightMode::Full } else { WeightMode::Factorized },
            dynamic: self.dynamic_config(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks every rule and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        let d = &self.data;
        if !["mnist", "cifar10"].contains(&d.dataset.as_str()) {
            p.push(format!("data.dataset must be mnist or cifar10, got `{}`", d.dataset));
        }
        if d.validation == 0 {
            p.push(String::from("data.validation must be positive"));
        }
        if d.translate && d.canvas != 0 && d.canvas < self.source_extent().0 {
            p.push(format!("data.canvas {} is smaller than the {} source extent", d.canvas, self.source_extent().0));
        }
        let m = &self.model;
        check_kind_rank("model", &m.kind, m.rank, &mut p);
        if Placement::parse(&m.placement).is_none() {
            p.push(format!("model.placement must be first, second, third or all, got `{}`", m.placement));
        }
        if !["factorized", "full"].contains(&m.weights.as_str()) {
            p.push(format!("model.weights must be factorized or full, got `{}`", m.weights));
        }
        if m.channels == 0 {
            p.push(String::from("model.channels must be positive"));
        }
        if m.depth == 0 {
            p.push(String::from("model.depth must be positive"));
        }
        if m.filter % 2 == 0 {
            p.push(format!("model.filter must be odd, got {}", m.filter));
        }
        for place in self.sweep_placements() {
            if let Some(pl) = Placement::parse(&place) {
                if !(0..m.depth).any(|i| pl.covers(i)) {
                    p.push(format!("placement {place} needs more than {} layers", m.depth));
                }
            }
        }
        let dy = &m.dynamic;
        if dy.projection == 0 || dy.bottleneck == 0 || dy.expansion == 0 || dy.branches.is_empty() {
            p.push(String::from("model.dynamic sizes must be positive with at least one branch"));
        }
        if dy.branches.iter().any(|b| b[0] == 0 || b[1] == 0) {
            p.push(String::from("model.dynamic.branches entries need pool ≥ 1 and dilation ≥ 1"));
        }
        let t = &self.train;
        if t.batch < 2 {
            p.push(format!("train.batch must be at least 2 for batch normalization, got {}", t.batch));
        }
        if t.eval_batch == 0 {
            p.push(String::from("train.eval_batch must be positive"));
        }
        if t.warmup_epochs > t.epochs {
            p.push(format!("train.warmup_epochs {} exceeds train.epochs {}", t.warmup_epochs, t.epochs));
        }
        if !(t.peak_lr.is_finite() && t.peak_lr > 0.0) {
            p.push(format!("train.peak_lr must be positive, got {}", t.peak_lr));
        }
        if !["f32", "f64"].contains(&t.dtype.as_str()) {
            p.push(format!("train.dtype must be f32 or f64, got `{}`", t.dtype));
        }
        if !(0.0..1.0).contains(&t.adam_beta1) || !(0.0..1.0).contains(&t.adam_beta2) || !(t.adam_epsilon > 0.0) {
            p.push(String::from("train.adam_beta1/2 must lie in [0, 1) and train.adam_epsilon must be positive"));
        }
        let s = &self.sweep;
        for k in &s.kinds {
            if LayerKind::parse(k).is_none() {
                p.push(format!("sweep.kinds: unknown kind `{k}`"));
            }
        }
        for pl in &s.placements {
            if Placement::parse(pl).is_none() {
                p.push(format!("sweep.placements: unknown placement `{pl}`"));
            }
        }
        for &r in &s.ranks {
            if r == 0 || r > MAX_RANK {
                p.push(format!("sweep.ranks: rank {r} outside 1..={MAX_RANK}"));
            }
        }
        let ranked = self.sweep_kinds().iter().any(|k| LayerKind::parse(k).is_some_and(|k| k.ranked()));
        if ranked && s.ranks.is_empty() && m.rank.is_none() {
            p.push(String::from("sweep covers a ranked kind but neither sweep.ranks nor model.rank is set"));
        }
        if s.seeds.is_empty() {
            p.push(String::from("sweep.seeds must not be empty"));
        }
        if s.jobs == 0 {
            p.push(String::from("sweep.jobs must be at least 1"));
        }
        if let Some(dir) = &d.dir {
            if !dir.is_dir() {
                p.push(format!("data.dir {} is not a directory", dir.display()));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Fails unless a dataset directory can be resolved.
    pub fn require_data_dir(&self) -> Result<PathBuf> {
        match self.data_dir() {
            Some(d) if d.is_dir() => Ok(d),
            Some(d) => Err(Error::Config(vec![format!("dataset directory {} does not exist", d.display())])),
            None => Err(Error::Config(vec![format!("set data.dir or {DATA_DIR_ENV}")])),
        }
    }

    pub fn sweep_kinds(&self) -> Vec<String> {
        if self.sweep.kinds.is_empty() {
            vec![self.model.kind.clone()]
        } else {
            self.sweep.kinds.clone()
        }
    }

    pub fn sweep_placements(&self) -> Vec<String> {
        if self.sweep.placements.is_empty() {
            vec![self.model.placement.clone()]
        } else {
            self.sweep.placements.clone()
        }
    }

    pub fn sweep_ranks(&self) -> Vec<usize> {
        if self.sweep.ranks.is_empty() {
            self.model.rank.into_iter().collect()
        } else {
            self.sweep.ranks.clone()
        }
    }
}

fn check_kind_rank(section: &str, kind: &str, rank: Option<usize>, p: &mut Vec<String>) {
    match LayerKind::parse(kind) {
        None => {
            p.push(format!("{section}.kind must be one of conv, local, coordconv, lrlc, dynamic_lrlc, got `{kind}`"))
        }
        Some(k) => match (k.ranked(), rank) {
            (true, None) => p.push(format!("{section}.rank is required for kind {kind}")),
            (false, Some(_)) => p.push(format!("{section}.rank must be absent for kind {kind}")),
            (true, Some(r)) if r == 0 || r > MAX_RANK => p.push(format!("{section}.rank {r} outside 1..={MAX_RANK}")),
            _ => {}
        },
    }
}
