//! Interleaved state/action token sequences and the block-causal mask.

use std::collections::HashSet;

use ndarray::Array2;

use crate::error::{ItcError, Result};
use crate::frame::FrameTokens;
use crate::world_model::config::WmConfig;
use crate::world_model::rope::Coord3;

/// Embedding ids and rotary coordinates of `(s^1_t .. s^L_t, a_t)` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// Embedding row: state tokens use `0..K`, actions `K + a`.
    pub ids: Vec<usize>,
    pub coords: Vec<Coord3>,
    pub blocks: usize,
    pub block_len: usize,
}

impl TokenSequence {
    /// Builds blocks `first_block..first_block + frames.len()`.
    pub fn new(frames: &[FrameTokens], actions: &[u32], cfg: &WmConfig, first_block: usize) -> Result<Self> {
        if frames.len() != actions.len() || frames.is_empty() {
            return Err(ItcError::Shape {
                expected: format!("{} actions", frames.len()),
                got: format!("{}", actions.len()),
            });
        }
        let l = cfg.tokens_per_frame();
        let mut ids = Vec::with_capacity(frames.len() * (l + 1));
        let mut coords = Vec::with_capacity(ids.capacity());
        for (k, (frame, &action)) in frames.iter().zip(actions).enumerate() {
            let t = (first_block + k) as i64;
            if frame.len() != l || frame.shape().width != cfg.grid_width {
                return Err(ItcError::Geometry(format!("frame {:?} for a model of {l} tokens", frame.shape())));
            }
            frame.check_vocab(cfg.codebook_size)?;
            if action as usize >= cfg.num_actions {
                return Err(ItcError::Geometry(format!("action {action} outside {}", cfg.num_actions)));
            }
            for (i, &tok) in frame.tokens().iter().enumerate() {
                let c = frame.shape().coord(i);
                ids.push(tok as usize);
                coords.push(Coord3::new(c.x + t, c.y + t, 2 * t));
            }
            ids.push(cfg.codebook_size + action as usize);
            coords.push(Coord3::new(t, t, 2 * t + 1));
        }
        let seq = Self {
            ids,
            coords,
            blocks: frames.len(),
            block_len: l + 1,
        };
        debug_assert!(seq.coords_unique());
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn coords_unique(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.coords.len());
        self.coords.iter().all(|c| seen.insert(*c))
    }
}

/// `mask[q][k]` is true when query token `q` may attend to key token `k`:
/// every token sees its own timestep block and all earlier blocks.
pub fn block_causal_mask(timesteps: usize, state_tokens: usize) -> Array2<bool> {
    let b = state_tokens + 1;
    let n = timesteps * b;
    Array2::from_shape_fn((n, n), |(q, k)| k / b <= q / b)
}
