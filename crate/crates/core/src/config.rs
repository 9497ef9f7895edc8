//! Versioned experiment configuration.
//!
//! A configuration is TOML layered in three steps: the embedded defaults,
//! then a user file, then `key.path=value` overrides. Every key in the user
//! file or an override must already exist in the defaults and keep its type.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{AugmentMode, AugmentPolicy, CorpusSpec, SplitRatios};
use crate::error::{Error, Result};
use crate::losses::{LocalLossVariant, SetSpec, Strategy, Temperature};
use crate::model::NetworkConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// The defaults file, also shipped as the reference for every key.
pub const DEFAULTS_TOML: &str = include_str!("../config/defaults.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub path: String,
    pub resolution: usize,
    pub ratios: [f64; 3],
    pub synthetic: CorpusSpec,
}

impl DatasetConfig {
    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios(self.ratios)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub stride: usize,
    pub block_size: usize,
    pub grid_points: usize,
    pub level: usize,
    pub normalize_local: bool,
    pub local_variant: LocalLossVariant,
}

impl LossConfig {
    pub fn temperature(&self) -> Temperature {
        Temperature::new(self.tau).expect("validated")
    }

    pub fn set_spec(&self, strategy: Strategy) -> SetSpec {
        SetSpec { strategy, stride: self.stride, block_size: self.block_size, grid_points: self.grid_points }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastStageConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_pairs: usize,
    pub slices_per_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneStageConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub slices_per_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagesConfig {
    pub global: ContrastStageConfig,
    pub local: ContrastStageConfig,
    pub finetune: FinetuneStageConfig,
}

/// A pre-training recipe; each maps to a fixed stage sequence ending in
/// fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "global")]
    Global,
    #[serde(rename = "global+local(self)")]
    GlobalLocalSelf,
    #[serde(rename = "local(stride)")]
    LocalStride,
    #[serde(rename = "local(block)")]
    LocalBlock,
    #[serde(rename = "global+local(stride)")]
    GlobalLocalStride,
    #[serde(rename = "global+local(block)")]
    GlobalLocalBlock,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Random,
        Variant::Global,
        Variant::GlobalLocalSelf,
        Variant::LocalStride,
        Variant::LocalBlock,
        Variant::GlobalLocalStride,
        Variant::GlobalLocalBlock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Random => "random",
            Variant::Global => "global",
            Variant::GlobalLocalSelf => "global+local(self)",
            Variant::LocalStride => "local(stride)",
            Variant::LocalBlock => "local(block)",
            Variant::GlobalLocalStride => "global+local(stride)",
            Variant::GlobalLocalBlock => "global+local(block)",
        }
    }

    /// File-system friendly name.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Random => "random",
            Variant::Global => "global",
            Variant::GlobalLocalSelf => "global_local_self",
            Variant::LocalStride => "local_stride",
            Variant::LocalBlock => "local_block",
            Variant::GlobalLocalStride => "global_local_stride",
            Variant::GlobalLocalBlock => "global_local_block",
        }
    }

    pub fn uses_global(self) -> bool {
        matches!(
            self,
            Variant::Global | Variant::GlobalLocalSelf | Variant::GlobalLocalStride | Variant::GlobalLocalBlock
        )
    }

    /// Strategy of the local stage, if any.
    pub fn local_strategy(self) -> Option<Strategy> {
        match self {
            Variant::Random | Variant::Global => None,
            Variant::GlobalLocalSelf => Some(Strategy::SelfsupGrid),
            Variant::LocalStride | Variant::GlobalLocalStride => Some(Strategy::SupervisedStride),
            Variant::LocalBlock | Variant::GlobalLocalBlock => Some(Strategy::SupervisedBlock),
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s || v.slug() == s)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub label_fractions: Vec<f64>,
    pub variants: Vec<Variant>,
    pub folds: usize,
    pub embedding_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: String,
    pub dataset: DatasetConfig,
    pub model: NetworkConfig,
    pub losses: LossConfig,
    pub augment: AugmentPolicy,
    pub stages: StagesConfig,
    pub experiment: MatrixConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        parse_config_str("", &[]).expect("embedded defaults are valid")
    }
}

fn defaults_table() -> Table {
    DEFAULTS_TOML.parse::<Table>().expect("embedded defaults parse")
}

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

/// Coerces `new` to the type of `old`, allowing integers where floats are
/// expected.
fn coerce(key: &str, old: &Value, new: Value) -> Result<Value> {
    match (old, new) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Array(_), Value::Array(items)) => Ok(Value::Array(items)),
        (o, n) if type_name(o) == type_name(&n) => Ok(n),
        (o, n) => Err(Error::config(key, format!("expected {}, got {} `{n}`", type_name(o), type_name(&n)))),
    }
}

fn merge(base: &mut Table, user: Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = base.get_mut(&k).ok_or_else(|| Error::config(&key, "unknown key"))?;
        match (slot, v) {
            (Value::Table(b), Value::Table(u)) => merge(b, u, &key)?,
            (Value::Table(_), other) => {
                return Err(Error::config(&key, format!("expected a table, got {} `{other}`", type_name(&other))))
            }
            (slot, v) => *slot = coerce(&key, slot, v)?,
        }
    }
    Ok(())
}

fn parse_override_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like `section.key=value`"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..=i].join(".");
        let slot = cur.get_mut(*part).ok_or_else(|| Error::config(&here, "unknown key"))?;
        if i + 1 == parts.len() {
            if let Value::Table(_) = slot {
                return Err(Error::config(&here, "cannot override a whole section"));
            }
            *slot = coerce(&here, slot, parse_override_value(raw.trim()))?;
            return Ok(());
        }
        cur = match slot {
            Value::Table(t) => t,
            _ => return Err(Error::config(&here, "not a section")),
        };
    }
    unreachable!("split always yields at least one part")
}

/// Parses a configuration from TOML text plus overrides.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let user: Table = text.parse().map_err(|e: toml::de::Error| Error::config("<file>", e.to_string()))?;
    let mut table = defaults_table();
    merge(&mut table, user, "")?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg = from_table(table)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Deserializes section by section so errors name the section.
fn from_table(mut table: Table) -> Result<ExperimentConfig> {
    fn section<T: serde::de::DeserializeOwned>(table: &mut Table, key: &str) -> Result<T> {
        let v = table.remove(key).ok_or_else(|| Error::config(key, "missing section"))?;
        v.try_into().map_err(|e: toml::de::Error| Error::config(key, e.message().to_string()))
    }
    Ok(ExperimentConfig {
        schema_version: section(&mut table, "schema_version")?,
        seed: section(&mut table, "seed")?,
        output_dir: section(&mut table, "output_dir")?,
        dataset: section(&mut table, "dataset")?,
        model: section(&mut table, "model")?,
        losses: section(&mut table, "losses")?,
        augment: section(&mut table, "augment")?,
        stages: section(&mut table, "stages")?,
        experiment: section(&mut table, "experiment")?,
    })
}

pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, overrides)
}

impl ExperimentConfig {
    /// Fully materialized TOML; parsing it back yields an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the materialized config to `dir/config.toml`.
    pub fn echo_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: String| Err(Error::config(k, m));
        if self.schema_version != SCHEMA_VERSION {
            return err("schema_version", format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version));
        }
        let d = &self.dataset;
        if d.source == DataSource::Directory && d.path.is_empty() {
            return err("dataset.path", "required when dataset.source = \"directory\"".into());
        }
        if d.ratios.iter().any(|r| !(*r >= 0.0)) || d.ratios.iter().sum::<f64>() <= 0.0 {
            return err("dataset.ratios", format!("must be non-negative with a positive sum, got {:?}", d.ratios));
        }
        if d.ratios[0] <= 0.0 || d.ratios[1] <= 0.0 || d.ratios[2] <= 0.0 {
            return err("dataset.ratios", format!("every split needs a positive share, got {:?}", d.ratios));
        }
        let s = &d.synthetic;
        if s.num_volumes == 0 {
            return err("dataset.synthetic.num_volumes", "must be >= 1".into());
        }
        if s.slices_per_volume == 0 {
            return err("dataset.synthetic.slices_per_volume", "must be >= 1".into());
        }
        if !(1..=7).contains(&s.num_foreground_classes) {
            return err("dataset.synthetic.num_foreground_classes", format!("must be in [1, 7], got {}", s.num_foreground_classes));
        }
        if !(s.noise >= 0.0) {
            return err("dataset.synthetic.noise", format!("must be >= 0, got {}", s.noise));
        }
        if s.block_size == 0 || s.resolution == 0 || s.resolution % s.block_size != 0 {
            return err(
                "dataset.synthetic.resolution",
                format!("{} is not divisible by dataset.synthetic.block_size = {}", s.resolution, s.block_size),
            );
        }
        if d.source == DataSource::Synthetic && self.model.num_classes != s.num_foreground_classes + 1 {
            return err(
                "model.num_classes",
                format!(
                    "must be dataset.synthetic.num_foreground_classes + 1 = {}, got {}",
                    s.num_foreground_classes + 1,
                    self.model.num_classes
                ),
            );
        }
        self.model.validate()?;
        let div = self.model.size_divisor();
        if d.resolution == 0 || d.resolution % div != 0 {
            return err("dataset.resolution", format!("{} is not divisible by 2^encoder_blocks = {div}", d.resolution));
        }

        let l = &self.losses;
        if !(l.tau > 0.0) || !l.tau.is_finite() {
            return err("losses.tau", format!("must be > 0, got {}", l.tau));
        }
        if l.stride == 0 {
            return err("losses.stride", "must be >= 1".into());
        }
        if l.level == 0 || l.level > self.model.decoder_blocks {
            return err("losses.level", format!("must be in [1, {}], got {}", self.model.decoder_blocks, l.level));
        }
        let side = d.resolution >> (l.level - 1);
        if l.block_size == 0 || side % l.block_size != 0 {
            return err(
                "losses.block_size",
                format!("{} does not divide the level-{} map side {side}", l.block_size, l.level),
            );
        }
        if l.grid_points != 9 && l.grid_points != 13 {
            return err("losses.grid_points", format!("must be 9 or 13, got {}", l.grid_points));
        }
        self.augment.validate()?;

        for (name, st) in [("global", &self.stages.global), ("local", &self.stages.local)] {
            if !(st.learning_rate > 0.0) {
                return err(&format!("stages.{name}.learning_rate"), format!("must be > 0, got {}", st.learning_rate));
            }
            if st.epochs == 0 {
                return err(&format!("stages.{name}.epochs"), "must be >= 1".into());
            }
            if st.batch_pairs == 0 {
                return err(&format!("stages.{name}.batch_pairs"), "must be >= 1".into());
            }
        }
        let ft = &self.stages.finetune;
        if !(ft.learning_rate > 0.0) {
            return err("stages.finetune.learning_rate", format!("must be > 0, got {}", ft.learning_rate));
        }
        if ft.epochs == 0 {
            return err("stages.finetune.epochs", "must be >= 1".into());
        }
        if ft.batch_size == 0 {
            return err("stages.finetune.batch_size", "must be >= 1".into());
        }

        let x = &self.experiment;
        if x.label_fractions.is_empty() {
            return err("experiment.label_fractions", "must not be empty".into());
        }
        if let Some(f) = x.label_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return err("experiment.label_fractions", format!("each fraction must be in (0, 1], got {f}"));
        }
        if x.variants.is_empty() {
            return err("experiment.variants", "must not be empty".into());
        }
        if x.folds == 0 {
            return err("experiment.folds", "must be >= 1".into());
        }
        Ok(())
    }

    /// Augmentation policy used for a stage; self-supervised local views
    /// never move pixels.
    pub fn augment_for(&self, strategy: Option<Strategy>) -> AugmentPolicy {
        match strategy {
            Some(Strategy::SelfsupGrid) => self.augment.clone().with_mode(AugmentMode::IntensityOnly),
            _ => self.augment.clone(),
        }
    }
}
