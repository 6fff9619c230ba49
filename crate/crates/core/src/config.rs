//! Run configuration: a `key = value` file plus command-line overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::model::{Architecture, Readout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// L1 loss on standardized targets, scored by MAE.
    Regression,
    /// Masked binary cross-entropy per column, scored by mean ROC-AUC.
    Multilabel,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub architecture: Architecture,
    pub readout: Readout,
    pub layers: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate factor; 1 keeps it constant.
    pub lr_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    pub singleton_threshold: usize,
    pub data: Option<PathBuf>,
    /// With `val_data` and `test_data` set, `data` is used whole for training.
    pub val_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub split: [f64; 3],
    pub smiles_column: String,
    pub target_columns: Vec<String>,
    pub cache_dir: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Regression,
            architecture: Architecture::Himp,
            readout: Readout::Sum,
            layers: 3,
            hidden: 64,
            batch_size: 32,
            epochs: 100,
            lr: 1e-4,
            lr_decay: 1.0,
            dropout: 0.0,
            seed: 0,
            singleton_threshold: 3,
            data: None,
            val_data: None,
            test_data: None,
            split: [0.8, 0.1, 0.1],
            smiles_column: "smiles".into(),
            target_columns: Vec::new(),
            cache_dir: None,
            checkpoint: PathBuf::from("checkpoint.json"),
            metrics: PathBuf::from("metrics.jsonl"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "task",
    "architecture",
    "readout",
    "layers",
    "hidden",
    "batch_size",
    "epochs",
    "lr",
    "lr_decay",
    "dropout",
    "seed",
    "singleton_threshold",
    "data",
    "val_data",
    "test_data",
    "split",
    "smiles_column",
    "target_columns",
    "cache_dir",
    "checkpoint",
    "metrics",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), message: e.to_string() })
}

fn bad(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::BadValue { key: key.into(), message: message.into() }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "task" => {
                self.task = match value {
                    "regression" => Task::Regression,
                    "multilabel" => Task::Multilabel,
                    _ => return Err(bad(key, "expected regression or multilabel")),
                }
            }
            "architecture" => {
                self.architecture = match value {
                    "himp" => Architecture::Himp,
                    "graph_only" => Architecture::GraphOnly,
                    _ => return Err(bad(key, "expected himp or graph_only")),
                }
            }
            "readout" => {
                self.readout = match value {
                    "sum" => Readout::Sum,
                    "mean" => Readout::Mean,
                    _ => return Err(bad(key, "expected sum or mean")),
                }
            }
            "layers" => self.layers = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "singleton_threshold" => self.singleton_threshold = num(key, value)?,
            "data" => self.data = Some(value.into()),
            "val_data" => self.val_data = Some(value.into()),
            "test_data" => self.test_data = Some(value.into()),
            "split" => {
                let parts: Vec<f64> =
                    value.split(',').map(|p| num(key, p.trim())).collect::<Result<_, _>>()?;
                self.split = parts.try_into().map_err(|_| bad(key, "expected three fractions"))?;
            }
            "smiles_column" => self.smiles_column = value.into(),
            "target_columns" => {
                self.target_columns =
                    value.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect()
            }
            "cache_dir" => self.cache_dir = Some(value.into()),
            "checkpoint" => self.checkpoint = value.into(),
            "metrics" => self.metrics = value.into(),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.layers < 1 {
            return Err(bad("layers", "must be at least 1"));
        }
        if self.hidden < 1 {
            return Err(bad("hidden", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(bad("lr_decay", "must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad("dropout", "must be in [0, 1)"));
        }
        if self.data.is_none() {
            return Err(ConfigError::Missing("data"));
        }
        if self.val_data.is_some() != self.test_data.is_some() {
            return Err(bad("val_data", "val_data and test_data must be given together"));
        }
        if self.split.iter().any(|f| *f < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(bad("split", "fractions must be non-negative and sum to 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file() {
        let c = RunConfig::parse("# comment\nlayers = 2\nhidden=16\nsplit = 0.5, 0.25, 0.25\ndata = x.csv\n").unwrap();
        assert_eq!((c.layers, c.hidden), (2, 16));
        assert_eq!(c.split, [0.5, 0.25, 0.25]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(RunConfig::parse("colour = red"), Err(ConfigError::UnknownKey("colour".into())));
        assert_eq!(RunConfig::parse("layers"), Err(ConfigError::Syntax { line: 1 }));
        assert!(RunConfig::parse("layers = two").is_err());
        let mut c = RunConfig { data: Some("x".into()), ..Default::default() };
        c.layers = 0;
        assert!(c.validate().is_err());
        c.layers = 1;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        c.dropout = 0.5;
        c.lr = 0.0;
        assert!(c.validate().is_err());
        c.lr = 1e-3;
        assert!(c.validate().is_ok());
        c.lr_decay = 1.5;
        assert!(c.validate().is_err());
        c.lr_decay = 0.0;
        assert!(c.validate().is_err());
    }
}
