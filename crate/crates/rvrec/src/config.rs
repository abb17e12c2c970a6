//! Flat `key = value` experiment configuration and the run manifest that
//! records everything needed to reproduce a result.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::BackboneKind;
use crate::dataset::{RatingsFormat, SplitMode};

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("config error: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MsvrMode {
    Off,
    UserOnly,
    ItemOnly,
    Both,
}

impl MsvrMode {
    pub fn user_side(&self) -> bool {
        matches!(self, MsvrMode::UserOnly | MsvrMode::Both)
    }

    pub fn item_side(&self) -> bool {
        matches!(self, MsvrMode::ItemOnly | MsvrMode::Both)
    }

    pub fn enabled(&self) -> bool {
        !matches!(self, MsvrMode::Off)
    }
}

impl std::str::FromStr for MsvrMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(MsvrMode::Off),
            "u" => Ok(MsvrMode::UserOnly),
            "i" => Ok(MsvrMode::ItemOnly),
            "ui" => Ok(MsvrMode::Both),
            other => Err(format!("unknown msvr_mode '{other}' (off|u|i|ui)")),
        }
    }
}

impl std::fmt::Display for MsvrMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MsvrMode::Off => "off",
            MsvrMode::UserOnly => "u",
            MsvrMode::ItemOnly => "i",
            MsvrMode::Both => "ui",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnhanceMode {
    Off,
    Replace,
}

impl std::str::FromStr for EnhanceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(EnhanceMode::Off),
            "replace" => Ok(EnhanceMode::Replace),
            other => Err(format!("unknown enhance mode '{other}' (off|replace)")),
        }
    }
}

impl std::fmt::Display for EnhanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EnhanceMode::Off => write!(f, "off"),
            EnhanceMode::Replace => write!(f, "replace"),
        }
    }
}

/// Every behavior toggle in one place. Defaults follow the reference
/// experimental setup: d=100, 100 epochs, batch 512, 20 popularity-sampled
/// training negatives, 99 uniform evaluation negatives, both loss weights 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: String,
    pub format: RatingsFormat,
    pub threshold: f64,
    pub k_core: usize,
    pub split: SplitMode,
    pub backbone: BackboneKind,
    pub d: usize,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub msvr_mode: MsvrMode,
    pub peo: bool,
    pub peo_bias: bool,
    pub enhance: EnhanceMode,
    pub coalition_cap: usize,
    pub train_negatives: usize,
    pub eval_negatives: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: String::new(),
            format: RatingsFormat::DoubleColon,
            threshold: 3.5,
            k_core: 5,
            split: SplitMode::LeaveOneOut,
            backbone: BackboneKind::Mf,
            d: 100,
            epochs: 100,
            batch: 512,
            learning_rate: 1e-3,
            lambda1: 1.0,
            lambda2: 1.0,
            msvr_mode: MsvrMode::Both,
            peo: true,
            peo_bias: true,
            enhance: EnhanceMode::Off,
            coalition_cap: 128,
            train_negatives: 20,
            eval_negatives: 99,
            seed: 42,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(format!("expected on/off, got '{other}'")),
    }
}

impl ExperimentConfig {
    /// Apply a single `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let err = |e: String| ConfigError::Invalid(format!("{key}: {e}"));
        match key {
            "data" => self.data = v.to_string(),
            "format" => self.format = v.parse().map_err(err)?,
            "threshold" => self.threshold = v.parse().map_err(|_| err("bad number".into()))?,
            "k_core" => self.k_core = v.parse().map_err(|_| err("bad count".into()))?,
            "split" => self.split = v.parse().map_err(err)?,
            "backbone" => self.backbone = v.parse().map_err(err)?,
            "d" => self.d = v.parse().map_err(|_| err("bad count".into()))?,
            "epochs" => self.epochs = v.parse().map_err(|_| err("bad count".into()))?,
            "batch" => self.batch = v.parse().map_err(|_| err("bad count".into()))?,
            "learning_rate" => {
                self.learning_rate = v.parse().map_err(|_| err("bad number".into()))?
            }
            "lambda1" => self.lambda1 = v.parse().map_err(|_| err("bad number".into()))?,
            "lambda2" => self.lambda2 = v.parse().map_err(|_| err("bad number".into()))?,
            "msvr_mode" => self.msvr_mode = v.parse().map_err(err)?,
            "peo" => self.peo = parse_bool(v).map_err(err)?,
            "peo_bias" => self.peo_bias = parse_bool(v).map_err(err)?,
            "enhance" => self.enhance = v.parse().map_err(err)?,
            "coalition_cap" => {
                self.coalition_cap = v.parse().map_err(|_| err("bad count".into()))?
            }
            "train_negatives" => {
                self.train_negatives = v.parse().map_err(|_| err("bad count".into()))?
            }
            "eval_negatives" => {
                self.eval_negatives = v.parse().map_err(|_| err("bad count".into()))?
            }
            "seed" => self.seed = v.parse().map_err(|_| err("bad integer".into()))?,
            other => {
                return Err(ConfigError::Invalid(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Parse flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Invalid(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    idx + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d < 1 {
            return Err(ConfigError::Invalid("d must be >= 1".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(ConfigError::Invalid("lambda weights must be >= 0".into()));
        }
        if !(self.threshold > 1.0 && self.threshold < 5.0) {
            return Err(ConfigError::Invalid(
                "threshold must lie strictly between 1 and 5".into(),
            ));
        }
        if self.k_core < 1 {
            return Err(ConfigError::Invalid("k_core must be >= 1".into()));
        }
        if self.batch < 1 || self.train_negatives < 1 {
            return Err(ConfigError::Invalid(
                "batch and train_negatives must be >= 1".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(ConfigError::Invalid("learning_rate must be > 0".into()));
        }
        Ok(())
    }

    /// The fully-resolved key/value view written into manifests.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("data".into(), self.data.clone());
        m.insert("format".into(), self.format.to_string());
        m.insert("threshold".into(), self.threshold.to_string());
        m.insert("k_core".into(), self.k_core.to_string());
        m.insert("split".into(), self.split.to_string());
        m.insert("backbone".into(), self.backbone.to_string());
        m.insert("d".into(), self.d.to_string());
        m.insert("epochs".into(), self.epochs.to_string());
        m.insert("batch".into(), self.batch.to_string());
        m.insert("learning_rate".into(), self.learning_rate.to_string());
        m.insert("lambda1".into(), self.lambda1.to_string());
        m.insert("lambda2".into(), self.lambda2.to_string());
        m.insert("msvr_mode".into(), self.msvr_mode.to_string());
        m.insert("peo".into(), if self.peo { "on" } else { "off" }.into());
        m.insert(
            "peo_bias".into(),
            if self.peo_bias { "on" } else { "off" }.into(),
        );
        m.insert("enhance".into(), self.enhance.to_string());
        m.insert("coalition_cap".into(), self.coalition_cap.to_string());
        m.insert("train_negatives".into(), self.train_negatives.to_string());
        m.insert("eval_negatives".into(), self.eval_negatives.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub sparsity: f64,
    pub avg_interactions_per_user: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochLosses {
    pub rec: f64,
    pub peo: f64,
    pub ms: f64,
    pub total: f64,
}

/// Everything a run produced: resolved config, dataset statistics, loss
/// trace, final metrics, and where the checkpoint went.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: BTreeMap<String, String>,
    pub dataset: DatasetStats,
    pub epoch_losses: Vec<EpochLosses>,
    pub metrics: Option<crate::eval::MetricsReport>,
    pub checkpoint: String,
}
