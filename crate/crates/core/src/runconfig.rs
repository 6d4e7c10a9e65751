//! The single structured document that defines a run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::datagen::StreamConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::tdmoe::RoutingStrategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillStrategy {
    None,
    Uniform,
    #[default]
    Fssd,
}

impl fmt::Display for DistillStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Uniform => "uniform",
            Self::Fssd => "fssd",
        })
    }
}

impl FromStr for DistillStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "uniform" => Ok(Self::Uniform),
            "fssd" => Ok(Self::Fssd),
            other => Err(Error::Config(format!(
                "unknown distillation strategy '{other}' (expected none, uniform or fssd)"
            ))),
        }
    }
}

/// Ablation rows: which components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Preset {
    /// Frozen backbone only, zero-shot.
    #[serde(rename = "idx1", alias = "ablation-idx1")]
    Idx1,
    /// Adapter with distillation, no experts.
    #[serde(rename = "idx2", alias = "ablation-idx2")]
    Idx2,
    /// Experts only, adapter frozen.
    #[serde(rename = "idx3", alias = "ablation-idx3")]
    Idx3,
    /// Adapter and experts, no distillation.
    #[serde(rename = "idx4", alias = "ablation-idx4")]
    Idx4,
    /// Everything.
    #[default]
    #[serde(rename = "idx5", alias = "ablation-idx5", alias = "full")]
    Idx5,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Self::Idx1, Self::Idx2, Self::Idx3, Self::Idx4, Self::Idx5];

    pub fn name(self) -> &'static str {
        match self {
            Self::Idx1 => "idx1",
            Self::Idx2 => "idx2",
            Self::Idx3 => "idx3",
            Self::Idx4 => "idx4",
            Self::Idx5 => "idx5",
        }
    }

    /// Component switches, with the preset's own distillation default.
    pub fn components(self) -> Components {
        let (adapter, moe, distill) = match self {
            Self::Idx1 => (false, false, DistillStrategy::None),
            Self::Idx2 => (true, false, DistillStrategy::Fssd),
            Self::Idx3 => (false, true, DistillStrategy::None),
            Self::Idx4 => (true, true, DistillStrategy::None),
            Self::Idx5 => (true, true, DistillStrategy::Fssd),
        };
        Components { adapter, moe, distill }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown preset '{s}' (expected idx1..idx5 or full)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub adapter: bool,
    pub moe: bool,
    pub distill: DistillStrategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs_first: usize,
    pub epochs_later: usize,
    pub batch_size: usize,
    pub w: f64,
    pub temperature: f64,
    pub eps: f64,
    pub routing: RoutingStrategy,
    /// `None` takes the preset's default.
    pub distill: Option<DistillStrategy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            lr: 0.01,
            epochs_first: 40,
            epochs_later: 20,
            batch_size: 16,
            w: loss.w,
            temperature: loss.temperature,
            eps: loss.eps,
            routing: RoutingStrategy::Td,
            distill: None,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            eps: self.eps,
            w: self.w,
            temperature: self.temperature,
        }
    }

    pub fn epochs_for(&self, task: usize) -> usize {
        if task == 0 {
            self.epochs_first
        } else {
            self.epochs_later
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("train.lr must be > 0 (got {})", self.lr));
        }
        if self.batch_size == 0 {
            problems.push("train.batch_size must be at least 1".to_string());
        }
        if let Err(Error::Config(m)) = self.loss().validate() {
            problems.push(m);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub model: ModelConfig,
    pub stream: StreamConfig,
    pub train: TrainConfig,
    /// Output directory; not part of the experiment identity.
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            preset: Preset::Idx5,
            model: ModelConfig::default(),
            stream: StreamConfig::default(),
            train: TrainConfig::default(),
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Parses a JSON document, rejecting unknown keys.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Reads a config file; the literal name `default` yields the defaults.
    pub fn load(path: &str) -> Result<Self> {
        if path == "default" {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(Path::new(path)).map_err(|e| Error::Config(format!("cannot read config '{path}': {e}")))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for r in [self.model.validate(), self.stream.validate(), self.train.validate()] {
            if let Err(e) = r {
                problems.push(match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                });
            }
        }
        if self.model.d_vt > self.model.d {
            problems.push(format!(
                "model.d_vt ({}) must not exceed model.d ({})",
                self.model.d_vt, self.model.d
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn components(&self) -> Components {
        let mut c = self.preset.components();
        if let Some(d) = self.train.distill {
            c.distill = d;
        }
        c
    }

    /// Copy with every default made explicit.
    pub fn resolved(&self) -> Self {
        let mut r = self.clone();
        r.train.distill = Some(self.components().distill);
        r
    }

    /// SHA-256 over the canonical JSON of the resolved config, without `out_dir`.
    pub fn config_hash(&self) -> String {
        let mut r = self.resolved();
        r.out_dir = None;
        let bytes = serde_json::to_vec(&r).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies a `dotted.path=value` override. The path must already exist;
    /// the value is parsed as JSON, falling back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' must look like key=value")))?;
        let path = path.trim();
        if path.is_empty() {
            return Err(Error::Config(format!("override '{assignment}' has an empty key")));
        }
        let value: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for key in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| Error::Config(format!("unknown config key '{path}'")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("override '{assignment}': {e}")))?;
        Ok(())
    }
}
