//! The `.config` run configuration.
//!
//! INI-style text: `[model]`, `[dataset]` and `[training]` sections holding
//! `key = value` lines, lists separated by commas, `#` or `;` comments. Keys
//! may also appear before any section header. Unknown keys are rejected and
//! omitted keys take their defaults.
//!
//! ```text
//! [dataset]
//! num_classes = 3
//! class_names = tumor,stroma,normal
//!
//! [training]
//! batch_size = 16
//! loss = bce
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{LossKind, KERNEL, POOL};
use crate::modelspec::Hyper;

pub const DEFAULT_CLASS_NAMES: [&str; 7] = [
    "tumor",
    "stroma",
    "background",
    "normal",
    "inflammatory",
    "blood",
    "necrosis",
];

pub const MAX_CLASSES: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key {key:?} in section [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("{key}: {message}")]
    Semantic { key: String, message: String },
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Fast,
    Production,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fast => "fast",
            Mode::Production => "production",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fast" => Ok(Mode::Fast),
            "production" => Ok(Mode::Production),
            other => Err(format!("expected fast or production, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub conv_filters: usize,
    pub kernel_size: usize,
    pub pool_size: usize,
    pub dense_units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Items per class to generate or expect; empty when unspecified.
    pub datapoints: Vec<usize>,
    pub image_height: usize,
    pub image_width: usize,
    /// Balanced subset drawn for the fast protocol.
    pub fast_subset: usize,
    /// Balanced training pool for the production protocol.
    pub production_train: usize,
    /// Balanced held-out evaluation set for the production protocol.
    pub production_eval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub max_epochs_fast: usize,
    pub max_epochs_production: usize,
    pub patience_fast: usize,
    pub patience_production: usize,
    pub loss: LossKind,
    pub seed: Option<u64>,
    pub learning_rate: f64,
    pub min_delta: f64,
    pub cv_repeats: usize,
    pub bootstrap_resamples: usize,
    pub workers: usize,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub training: TrainingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                conv_filters: 32,
                kernel_size: KERNEL,
                pool_size: POOL,
                dense_units: 128,
            },
            dataset: DatasetConfig {
                num_classes: DEFAULT_CLASS_NAMES.len(),
                class_names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
                datapoints: Vec::new(),
                image_height: 128,
                image_width: 128,
                fast_subset: 7000,
                production_train: 14_000,
                production_eval: 21_000,
            },
            training: TrainingConfig {
                batch_size: 32,
                max_epochs_fast: 20,
                max_epochs_production: 200,
                patience_fast: 3,
                patience_production: 10,
                loss: LossKind::Bce,
                seed: None,
                learning_rate: 1e-3,
                min_delta: 1e-4,
                cv_repeats: 5,
                bootstrap_resamples: 10_000,
                workers: 1,
                mode: Mode::Fast,
            },
        }
    }
}

const MODEL_KEYS: &[&str] = &["conv_filters", "kernel_size", "pool_size", "dense_units"];
const DATASET_KEYS: &[&str] = &[
    "num_classes",
    "class_names",
    "datapoints",
    "image_height",
    "image_width",
    "fast_subset",
    "production_train",
    "production_eval",
];
const TRAINING_KEYS: &[&str] = &[
    "batch_size",
    "max_epochs_fast",
    "max_epochs_production",
    "patience_fast",
    "patience_production",
    "loss",
    "seed",
    "learning_rate",
    "min_delta",
    "cv_repeats",
    "bootstrap_resamples",
    "workers",
    "mode",
];

fn section_of(key: &str) -> Option<&'static str> {
    if MODEL_KEYS.contains(&key) {
        Some("model")
    } else if DATASET_KEYS.contains(&key) {
        Some("dataset")
    } else if TRAINING_KEYS.contains(&key) {
        Some("training")
    } else {
        None
    }
}

fn semantic(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Semantic {
        key: key.to_string(),
        message: message.into(),
    }
}

fn positive(key: &str, value: &str) -> Result<usize, ConfigError> {
    match value.parse::<i64>() {
        Ok(v) if v > 0 => Ok(v as usize),
        Ok(v) => Err(semantic(key, format!("must be a positive integer, got {v}"))),
        Err(_) => Err(semantic(key, format!("expected an integer, got {value:?}"))),
    }
}

fn real(key: &str, value: &str) -> Result<f64, ConfigError> {
    match value.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(semantic(key, format!("expected a non-negative number, got {value:?}"))),
    }
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut names: Option<Vec<String>> = None;
        let mut classes: Option<usize> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: line_no,
                    message: "unterminated section header".into(),
                })?;
                let name = name.trim();
                if !matches!(name, "model" | "dataset" | "training") {
                    return Err(ConfigError::Syntax {
                        line: line_no,
                        message: format!("unknown section [{name}]"),
                    });
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                message: format!("expected key=value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    message: "empty key".into(),
                });
            }
            match section_of(key) {
                Some(home) if section.is_empty() || section == home => {}
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line: line_no,
                        section: section.clone(),
                        key: key.to_string(),
                    })
                }
            }
            let m = &mut cfg.model;
            let d = &mut cfg.dataset;
            let t = &mut cfg.training;
            match key {
                "conv_filters" => m.conv_filters = positive(key, value)?,
                "kernel_size" => m.kernel_size = positive(key, value)?,
                "pool_size" => m.pool_size = positive(key, value)?,
                "dense_units" => m.dense_units = positive(key, value)?,
                "num_classes" => classes = Some(positive(key, value)?),
                "class_names" => names = Some(list(value)),
                "datapoints" => {
                    d.datapoints = list(value)
                        .iter()
                        .map(|v| positive(key, v))
                        .collect::<Result<_, _>>()?
                }
                "image_height" => d.image_height = positive(key, value)?,
                "image_width" => d.image_width = positive(key, value)?,
                "fast_subset" => d.fast_subset = positive(key, value)?,
                "production_train" => d.production_train = positive(key, value)?,
                "production_eval" => d.production_eval = positive(key, value)?,
                "batch_size" => t.batch_size = positive(key, value)?,
                "max_epochs_fast" => t.max_epochs_fast = positive(key, value)?,
                "max_epochs_production" => t.max_epochs_production = positive(key, value)?,
                "patience_fast" => t.patience_fast = positive(key, value)?,
                "patience_production" => t.patience_production = positive(key, value)?,
                "loss" => {
                    t.loss = match value {
                        "bce" => LossKind::Bce,
                        "cce" => LossKind::Cce,
                        other => return Err(semantic(key, format!("expected bce or cce, got {other:?}"))),
                    }
                }
                "seed" => {
                    t.seed = Some(
                        value
                            .parse()
                            .map_err(|_| semantic(key, format!("expected an unsigned integer, got {value:?}")))?,
                    )
                }
                "learning_rate" => t.learning_rate = real(key, value)?,
                "min_delta" => t.min_delta = real(key, value)?,
                "cv_repeats" => t.cv_repeats = positive(key, value)?,
                "bootstrap_resamples" => t.bootstrap_resamples = positive(key, value)?,
                "workers" => t.workers = positive(key, value)?,
                "mode" => t.mode = value.parse().map_err(|e: String| semantic(key, e))?,
                _ => unreachable!("key table and match arms agree"),
            }
        }
        cfg.resolve_classes(classes, names)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    fn resolve_classes(&mut self, classes: Option<usize>, names: Option<Vec<String>>) -> Result<(), ConfigError> {
        let d = &mut self.dataset;
        match (classes, names) {
            (None, None) => {}
            (Some(k), None) => {
                d.num_classes = k;
                d.class_names = if k == DEFAULT_CLASS_NAMES.len() {
                    DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
                } else {
                    (0..k).map(|i| format!("class{i}")).collect()
                };
            }
            (None, Some(names)) => {
                d.num_classes = names.len();
                d.class_names = names;
            }
            (Some(k), Some(names)) => {
                if names.len() != k {
                    return Err(semantic(
                        "class_names",
                        format!("{} names given for num_classes={k}", names.len()),
                    ));
                }
                d.num_classes = k;
                d.class_names = names;
            }
        }
        Ok(())
    }

    fn check(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        if !(2..=MAX_CLASSES).contains(&d.num_classes) {
            return Err(semantic("num_classes", format!("must be between 2 and {MAX_CLASSES}")));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &d.class_names {
            if !seen.insert(n) {
                return Err(semantic("class_names", format!("duplicate class name {n:?}")));
            }
        }
        if !d.datapoints.is_empty() && d.datapoints.len() != d.num_classes {
            return Err(semantic(
                "datapoints",
                format!("{} counts given for {} classes", d.datapoints.len(), d.num_classes),
            ));
        }
        if self.model.kernel_size != KERNEL {
            return Err(semantic("kernel_size", format!("only {KERNEL} is supported")));
        }
        if self.model.pool_size != POOL {
            return Err(semantic("pool_size", format!("only {POOL} is supported")));
        }
        let lr = self.training.learning_rate;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(semantic("learning_rate", "must be positive and finite"));
        }
        Ok(())
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            conv_filters: self.model.conv_filters,
            dense_units: self.model.dense_units,
        }
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.dataset.image_height, self.dataset.image_width, 3)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (m, d, t) = (&self.model, &self.dataset, &self.training);
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "conv_filters = {}", m.conv_filters);
        let _ = writeln!(s, "kernel_size = {}", m.kernel_size);
        let _ = writeln!(s, "pool_size = {}", m.pool_size);
        let _ = writeln!(s, "dense_units = {}", m.dense_units);
        let _ = writeln!(s, "\n[dataset]");
        let _ = writeln!(s, "num_classes = {}", d.num_classes);
        let _ = writeln!(s, "class_names = {}", d.class_names.join(","));
        if !d.datapoints.is_empty() {
            let _ = writeln!(s, "datapoints = {}", join(&d.datapoints));
        }
        let _ = writeln!(s, "image_height = {}", d.image_height);
        let _ = writeln!(s, "image_width = {}", d.image_width);
        let _ = writeln!(s, "fast_subset = {}", d.fast_subset);
        let _ = writeln!(s, "production_train = {}", d.production_train);
        let _ = writeln!(s, "production_eval = {}", d.production_eval);
        let _ = writeln!(s, "\n[training]");
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "max_epochs_fast = {}", t.max_epochs_fast);
        let _ = writeln!(s, "max_epochs_production = {}", t.max_epochs_production);
        let _ = writeln!(s, "patience_fast = {}", t.patience_fast);
        let _ = writeln!(s, "patience_production = {}", t.patience_production);
        let _ = writeln!(s, "loss = {}", t.loss.as_str());
        if let Some(seed) = t.seed {
            let _ = writeln!(s, "seed = {seed}");
        }
        // `{:?}` prints the shortest representation that parses back exactly.
        let _ = writeln!(s, "learning_rate = {:?}", t.learning_rate);
        let _ = writeln!(s, "min_delta = {:?}", t.min_delta);
        let _ = writeln!(s, "cv_repeats = {}", t.cv_repeats);
        let _ = writeln!(s, "bootstrap_resamples = {}", t.bootstrap_resamples);
        let _ = writeln!(s, "workers = {}", t.workers);
        let _ = writeln!(s, "mode = {}", t.mode.as_str());
        s
    }

    /// 64-bit FNV-1a of the canonical text, stamped into checkpoints.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
