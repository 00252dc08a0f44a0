//! TOML config files: a `[network]` topology plus optional `[task]` and
//! `[training]` sections. Unknown keys are rejected, and parse -> serialize
//! -> parse is the identity on the parsed value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkTopology;
use crate::training::{TaskKind, ToyTask, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub name: TaskKind,
    pub seq_len: usize,
    /// Future span for lookahead-parity, delay for delayed-copy.
    #[serde(default)]
    pub lookahead_span: usize,
    pub n_sequences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// Every random decision (init, data, shuffling) flows from this seed.
    pub seed: u64,
    pub network: NetworkTopology,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainConfig>,
}

impl ConfigFile {
    /// Parses and validates. TOML errors keep their line/column diagnostics.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ConfigFile =
            toml::from_str(text).map_err(|e| Error::Validation(format!("config parse error: {e}")))?;
        cfg.network.validate()?;
        if cfg.task.is_some() {
            cfg.to_task()?.validate()?;
        }
        if let Some(tr) = &cfg.training {
            tr.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The task with dimensions taken from the network section: input_dim
    /// from the input, num_classes from the output, seed from the config.
    pub fn to_task(&self) -> Result<ToyTask> {
        let section = self
            .task
            .as_ref()
            .ok_or_else(|| Error::Validation("config has no [task] section".into()))?;
        Ok(ToyTask {
            name: section.name,
            input_dim: self.network.input_dim,
            num_classes: self.network.output_dim,
            seq_len: section.seq_len,
            lookahead_span: section.lookahead_span,
            seed: self.seed,
        })
    }
}
