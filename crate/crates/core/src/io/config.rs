use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Activation;
use crate::data::{load_csv_dataset, make_synthetic_task, Dataset, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::gates::DEFAULT_SHARPNESS;
use crate::model::ModelConfig;
use crate::pruning::{OptimizerConfig, PruneConfig, ScheduleConfig, SnConfig};
use crate::spectral::SnMode;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Model shape. Vocabulary size, sequence length and class count come from
/// the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ffn: usize,
    pub activation: Activation,
    pub layer_norm_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            num_layers: m.num_layers,
            d_model: m.d_model,
            num_heads: m.num_heads,
            d_k: m.d_k,
            d_v: m.d_v,
            d_ffn: m.d_ffn,
            activation: m.activation,
            layer_norm_eps: m.layer_norm_eps,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, train: &Dataset, seq_len: usize) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            d_model: self.d_model,
            num_heads: self.num_heads,
            d_k: self.d_k,
            d_v: self.d_v,
            d_ffn: self.d_ffn,
            vocab_size: train.vocab.len(),
            max_seq_len: seq_len,
            num_classes: train.num_classes,
            activation: self.activation,
            layer_norm_eps: self.layer_norm_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub sn_enabled: bool,
    pub sn_target: f64,
    pub sn_mode: SnMode,
    /// Gate sharpness L.
    pub sharpness: f64,
    pub model: ModelSection,
    pub prune: PruneConfig,
    pub task: TaskSpec,
    pub optimizer: OptimizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sn = SnConfig::default();
        Self {
            seed: 0,
            out_dir: "runs/snip".into(),
            sn_enabled: sn.enabled,
            sn_target: sn.target,
            sn_mode: sn.mode,
            sharpness: DEFAULT_SHARPNESS,
            model: ModelSection::default(),
            prune: PruneConfig::default(),
            task: TaskSpec::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<config>", e.message()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let key = match (path.as_str(), unknown_field(&inner)) {
                (".", Some(f)) => f.to_string(),
                (".", None) => "<config>".to_string(),
                (_, Some(f)) => format!("{path}.{f}"),
                (_, None) => path,
            };
            Error::config(key, inner.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Report(format!("cannot serialise config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sn_target > 0.0) {
            return Err(Error::config("sn_target", "must be > 0"));
        }
        if !(self.sharpness > 0.0) {
            return Err(Error::config("sharpness", "must be > 0"));
        }
        self.prune.validate()?;
        self.task.validate()?;
        self.optimizer.validate()?;
        if self.optimizer.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size", "must be >= 1"));
        }
        let m = &self.model;
        for (k, v) in [
            ("model.num_layers", m.num_layers),
            ("model.d_model", m.d_model),
            ("model.num_heads", m.num_heads),
            ("model.d_k", m.d_k),
            ("model.d_v", m.d_v),
            ("model.d_ffn", m.d_ffn),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be >= 1"));
            }
        }
        if !(m.layer_norm_eps > 0.0) {
            return Err(Error::config("model.layer_norm_eps", "must be > 0"));
        }
        Ok(())
    }

    pub fn sn(&self) -> SnConfig {
        SnConfig {
            enabled: self.sn_enabled,
            target: self.sn_target,
            mode: self.sn_mode,
        }
    }

    /// Generates or loads the train/eval split.
    pub fn load_task(&self) -> Result<(Dataset, Dataset)> {
        let t = &self.task;
        match t.kind {
            TaskKind::Csv => {
                let path = t.path.as_deref().ok_or_else(|| Error::config("task.path", "required for csv tasks"))?;
                load_csv_dataset(Path::new(path), &t.text_column, &t.label_column, t.scheme, t.seq_len, t.seed)
            }
            _ => make_synthetic_task(t),
        }
    }

    pub fn schedule(&self, train: &Dataset) -> ScheduleConfig {
        ScheduleConfig {
            model: self.model.resolve(train, self.task.seq_len),
            prune: self.prune.clone(),
            optimizer: self.optimizer.clone(),
            sn: self.sn(),
            sharpness: self.sharpness,
            seed: self.seed,
        }
    }

    /// Writes the fully resolved configuration next to the run's outputs.
    pub fn echo_to(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml_string()?)?;
        Ok(path)
    }
}

/// Field name of an unknown-field error.
fn unknown_field(e: &toml::de::Error) -> Option<&str> {
    let msg = e.message();
    msg.split('`').nth(1).filter(|_| msg.starts_with("unknown field"))
}

/// Reads and validates a TOML run configuration.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
    RunConfig::from_toml_str(&text)
}
