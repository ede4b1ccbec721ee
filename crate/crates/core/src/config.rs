//! Run configuration: sectioned `key = value` files with command-line overrides.
//!
//! ```text
//! # comment
//! [model]
//! name = SplitMixer-I-256/8      ; resets every model key to that name's defaults
//! alpha = 2/3
//! [data]
//! source = synthetic             ; or cifar
//! [train]
//! epochs = 20
//! [output]
//! dir = runs/demo
//! ```
//!
//! Keys apply in order: defaults, then the file, then overrides such as `train.epochs=5`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mixing::{parse_fraction, MixVariant};
use crate::model::{ModelConfig, Variant};
use crate::train::{OutputPaths, TrainConfig};

pub const DATA_DIR_ENV: &str = "SPMX_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Cifar,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR-10 root; falls back to `$SPMX_DATA_DIR`.
    pub path: Option<PathBuf>,
    /// Keep only this many training images per class (0 keeps all).
    pub per_class: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_classes: usize,
    pub synthetic_size: usize,
    pub synthetic_noise: f32,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Cifar,
            path: None,
            per_class: 0,
            synthetic_train: 512,
            synthetic_test: 256,
            synthetic_classes: 10,
            synthetic_size: 32,
            synthetic_noise: 0.1,
            synthetic_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn cifar_root(&self) -> Result<PathBuf> {
        if let Some(p) = &self.path {
            return Ok(p.clone());
        }
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("no data.path given and {DATA_DIR_ENV} is unset")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Seeds parameter initialization.
    pub model_seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub output: OutputPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(Variant::Split(MixVariant::I), 256, 8),
            model_seed: 0,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            output: OutputPaths::new("runs/latest"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("{key}: cannot read '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Parse(format!("{key}: expected true/false, got '{value}'"))),
    }
}

fn optional<T>(key: &str, value: &str, f: impl Fn(&str, &str) -> Result<T>) -> Result<Option<T>> {
    match value {
        "" | "-" | "none" => Ok(None),
        v => f(key, v).map(Some),
    }
}

impl RunConfig {
    /// Sets one `section.key` to `value`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        match key.trim() {
            "model.name" => *m = ModelConfig::parse_name(value)?,
            "model.variant" => {
                let name = match value {
                    "ConvMixer" => format!("ConvMixer-{}/{}", m.h, m.b),
                    v => format!("SplitMixer-{v}-{}/{}", m.h, m.b),
                };
                let mut fresh = ModelConfig::parse_name(&name)?;
                fresh.p = m.p;
                fresh.k = m.k;
                fresh.classes = m.classes;
                fresh.in_channels = m.in_channels;
                fresh.activation = m.activation;
                fresh.norm = m.norm;
                fresh.residual = m.residual;
                *m = fresh;
            }
            "model.h" => m.h = parse(key, value)?,
            "model.b" => m.b = parse(key, value)?,
            "model.p" => m.p = parse(key, value)?,
            "model.k" => m.k = parse(key, value)?,
            "model.alpha" => m.alpha = optional(key, value, |_, v| parse_fraction(v))?,
            "model.segments" => m.segments = optional(key, value, parse)?,
            "model.classes" => m.classes = parse(key, value)?,
            "model.in_channels" => m.in_channels = parse(key, value)?,
            "model.activation" => m.activation = value.parse()?,
            "model.norm" => m.norm = value.parse()?,
            "model.residual" => m.residual = value.parse()?,
            "model.spatial" => m.spatial = value.parse()?,
            "model.channel" => m.channel = value.parse()?,
            "model.seed" => self.model_seed = parse(key, value)?,
            "data.source" => {
                self.data.source = match value {
                    "cifar" => DataSource::Cifar,
                    "synthetic" => DataSource::Synthetic,
                    _ => return Err(Error::Parse(format!("{key}: expected cifar or synthetic, got '{value}'"))),
                }
            }
            "data.path" => self.data.path = optional(key, value, |_, v| Ok(PathBuf::from(v)))?,
            "data.per_class" => self.data.per_class = parse(key, value)?,
            "data.synthetic_train" => self.data.synthetic_train = parse(key, value)?,
            "data.synthetic_test" => self.data.synthetic_test = parse(key, value)?,
            "data.synthetic_classes" => self.data.synthetic_classes = parse(key, value)?,
            "data.synthetic_size" => self.data.synthetic_size = parse(key, value)?,
            "data.synthetic_noise" => self.data.synthetic_noise = parse(key, value)?,
            "data.synthetic_seed" => self.data.synthetic_seed = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch" => self.train.batch_size = parse(key, value)?,
            "train.eval_batch" => self.train.eval_batch_size = parse(key, value)?,
            "train.max_lr" => self.train.max_lr = parse(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, value)?,
            "train.clip" => self.train.clip = optional(key, value, parse)?,
            "train.augment" => self.train.augment = parse_bool(key, value)?,
            "train.data_seed" => self.train.data_seed = parse(key, value)?,
            "train.log_wall_time" => self.train.log_wall_time = parse_bool(key, value)?,
            "train.stop_after" => self.train.stop_after = optional(key, value, parse)?,
            "output.dir" => self.output.dir = PathBuf::from(value),
            "output.metrics" => self.output.metrics = value.to_string(),
            other => return Err(Error::Config(format!("unknown setting '{other}'"))),
        }
        Ok(())
    }

    /// Applies `section.key=value` (or `key=value` inside `[section]` text).
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("override '{assignment}' is not key=value")))?;
        self.set(k, v)
    }

    /// Applies the settings of a config file's text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| Error::Parse(format!("line {}: {e}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(Error::Parse(format!("expected key = value, got '{line}'"))))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| at(Error::Parse("setting before any [section]".into())))?;
            self.set(&format!("{sec}.{}", k.trim()), v).map_err(at)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# demo\n[model]\nname = SplitMixer-II-64/4 ; four blocks\nsegments = 3\n[train]\nepochs = 7\nclip = none\n[data]\nsource = synthetic\n",
        )
        .unwrap();
        assert_eq!(c.model.name(), "SplitMixer-II-64/4");
        assert_eq!(c.model.segments, Some(3));
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.clip, None);
        assert_eq!(c.data.source, DataSource::Synthetic);
        c.apply_override("train.epochs=2").unwrap();
        assert_eq!(c.train.epochs, 2);
    }

    #[test]
    fn variant_switch_keeps_shape() {
        let mut c = RunConfig::default();
        c.set("model.k", "7").unwrap();
        c.set("model.variant", "II").unwrap();
        assert_eq!(c.model.name(), "SplitMixer-II-256/8");
        assert_eq!(c.model.k, 7);
        assert_eq!(c.model.alpha, None);
        assert_eq!(c.model.segments, Some(2));
    }

    #[test]
    fn errors_name_the_line() {
        let mut c = RunConfig::default();
        let err = c.apply_text("[train]\nepochs = many\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(c.apply_text("epochs = 3\n").is_err());
        assert!(c.apply_override("train.nope=1").is_err());
    }
}
