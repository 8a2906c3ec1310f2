use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{DecodeConfig, SamplingMode};
use crate::error::{ItcError, Result};
use crate::gridworld::GridConfig;
use crate::world_model::WmConfig;

/// Everything a desk-scale run needs, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub grid: GridConfig,
    /// `codebook_size` and the grid geometry are filled in from the data.
    pub world_model: WmConfig,
    pub decode: DecodeConfig,
    /// Episodes collected for the dataset.
    pub episodes: usize,
    /// Codebook growth threshold.
    pub tokenizer_tau: f32,
    pub tokenizer_capacity: usize,
    /// World-model optimizer updates.
    pub train_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_seed: u64,
    /// Sampling mode for imagination rollouts.
    pub rollout_sampling: SamplingMode,
    pub rollout_horizon: usize,
    pub rollouts: usize,
    /// Disables dropout during training.
    pub deterministic: bool,
    /// An existing dataset to train on instead of collecting one.
    pub dataset_path: Option<PathBuf>,
    /// Codebook the existing dataset was tokenized with.
    pub codebook_path: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            world_model: WmConfig::default(),
            decode: DecodeConfig::default(),
            episodes: 650,
            tokenizer_tau: 0.75,
            tokenizer_capacity: 4096,
            train_steps: 2500,
            batch_size: 4,
            seed: 0,
            eval_seed: 0,
            rollout_sampling: SamplingMode::Categorical,
            rollout_horizon: 10,
            rollouts: 100,
            deterministic: false,
            dataset_path: None,
            codebook_path: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| ItcError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// World-model settings adapted to the grid and an actual codebook size.
    pub fn model_config(&self, codebook_size: usize) -> WmConfig {
        WmConfig {
            grid_height: self.grid.height,
            grid_width: self.grid.width,
            codebook_size,
            num_actions: crate::gridworld::Action::COUNT,
            dropout_rate: if self.deterministic { 0.0 } else { self.world_model.dropout_rate },
            ..self.world_model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.model_config(1).validate()?;
        self.decode.ot.validate()?;
        if self.episodes == 0 && self.dataset_path.is_none() {
            return Err(ItcError::Config("episodes must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ItcError::Config("batch_size must be positive".into()));
        }
        if !(self.tokenizer_tau > 0.0) || self.tokenizer_capacity == 0 {
            return Err(ItcError::Config("tokenizer threshold and capacity must be positive".into()));
        }
        match (&self.dataset_path, &self.codebook_path) {
            (None, None) => {}
            (Some(d), Some(c)) => {
                for p in [d, c] {
                    if !p.is_file() {
                        return Err(ItcError::Config(format!("{} does not exist", p.display())));
                    }
                }
            }
            _ => return Err(ItcError::Config("dataset_path and codebook_path must be given together".into())),
        }
        Ok(())
    }
}
