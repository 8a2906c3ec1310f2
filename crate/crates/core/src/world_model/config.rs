use serde::{Deserialize, Serialize};

use crate::error::{ItcError, Result};
use crate::world_model::rope::{spatial_pairs, Rope3d};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WmConfig {
    pub num_blocks: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    /// Hidden width of the observation, reward and done heads.
    pub head_hidden: usize,
    pub dropout_rate: f64,
    /// Timesteps per training window (`T_WM`).
    pub seq_len: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub codebook_size: usize,
    pub num_actions: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub rope_base: f64,
    /// Spatial:temporal ratio of rotary dimension pairs.
    pub rope_split: (usize, usize),
    pub init_std: f64,
    /// Start the last layer of every head at zero (uniform predictions).
    pub zero_init_heads: bool,
}

impl Default for WmConfig {
    /// Desk-scale model for the 6x6 gridworld.
    fn default() -> Self {
        Self {
            num_blocks: 2,
            num_heads: 4,
            embed_dim: 64,
            mlp_dim: 128,
            head_hidden: 128,
            dropout_rate: 0.1,
            seq_len: 11,
            grid_height: 6,
            grid_width: 6,
            codebook_size: 5,
            num_actions: 5,
            learning_rate: 1e-3,
            grad_clip_norm: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            rope_base: 10_000.0,
            rope_split: (3, 1),
            init_std: 0.02,
            zero_init_heads: true,
        }
    }
}

impl WmConfig {
    /// The full-size architecture: 3 blocks, 8 heads, width 128, `T_WM = 20`.
    pub fn full_size(grid_height: usize, grid_width: usize, codebook_size: usize, num_actions: usize) -> Self {
        Self {
            num_blocks: 3,
            num_heads: 8,
            embed_dim: 128,
            mlp_dim: 512,
            seq_len: 20,
            grid_height,
            grid_width,
            codebook_size,
            num_actions,
            ..Self::default()
        }
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid_height * self.grid_width
    }

    /// Tokens per timestep block (state tokens plus one action token).
    pub fn block_len(&self) -> usize {
        self.tokens_per_frame() + 1
    }

    pub fn max_tokens(&self) -> usize {
        self.seq_len * self.block_len()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads.max(1)
    }

    pub fn vocab(&self) -> usize {
        self.codebook_size + self.num_actions
    }

    pub fn rope(&self) -> Result<Rope3d> {
        Rope3d::new(self.head_dim(), self.rope_base, self.rope_split)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ItcError::Config(m));
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(2 * self.num_heads) {
            return err(format!(
                "embed_dim {} must be divisible by 2 * num_heads ({})",
                self.embed_dim, self.num_heads
            ));
        }
        let pairs = self.head_dim() / 2;
        if !spatial_pairs(pairs, self.rope_split).is_multiple_of(2) {
            return err(format!("rope split {:?} leaves an odd spatial pair count for {pairs} pairs", self.rope_split));
        }
        if self.num_blocks == 0 || self.mlp_dim == 0 || self.head_hidden == 0 {
            return err("layer sizes must be positive".into());
        }
        if self.seq_len == 0 || self.tokens_per_frame() == 0 || self.codebook_size == 0 || self.num_actions == 0 {
            return err("sequence geometry must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip_norm > 0.0) {
            return err("learning rate and clip norm must be positive".into());
        }
        self.rope().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        WmConfig::default().validate().unwrap();
        WmConfig::full_size(9, 9, 4096, 17).validate().unwrap();
    }

    #[test]
    fn rejects_bad_head_split() {
        let cfg = WmConfig {
            embed_dim: 60,
            num_heads: 4,
            ..WmConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
