use ndarray::{Array1, Array2, Axis, NdFloat};

use crate::error::{ItcError, Result};
use crate::frame::FrameTokens;
use crate::world_model::model::{LayerKv, QueryGroup, WmOutput, WorldModel};
use crate::world_model::sequence::TokenSequence;

/// Incremental inference that caches keys and values, one timestep block per
/// call.
#[derive(Debug, Clone)]
pub struct Session<'a, F = f64> {
    model: &'a WorldModel<F>,
    kv: Vec<LayerKv<F>>,
    blocks: usize,
}

/// Logits produced by the newest block.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// `(L, K)` logits for the next frame.
    pub next_state: Array2<f64>,
    pub reward: Array1<f64>,
    pub done: Array1<f64>,
}

impl From<WmOutput> for StepOutput {
    fn from(out: WmOutput) -> Self {
        Self {
            next_state: out.next_state.index_axis_move(Axis(0), 0),
            reward: out.reward.index_axis_move(Axis(0), 0),
            done: out.done.index_axis_move(Axis(0), 0),
        }
    }
}

impl<'a, F: NdFloat> Session<'a, F> {
    pub fn new(model: &'a WorldModel<F>) -> Self {
        let d = model.config().embed_dim;
        Self {
            model,
            kv: (0..model.config().num_blocks).map(|_| LayerKv::empty(d)).collect(),
            blocks: 0,
        }
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    /// Appends `(frame, action)` and returns predictions for the next step.
    pub fn push(&mut self, frame: &FrameTokens, action: u32) -> Result<StepOutput> {
        let cfg = self.model.config();
        if self.blocks >= cfg.seq_len {
            return Err(ItcError::Shape {
                expected: format!("at most {} blocks", cfg.seq_len),
                got: format!("{}", self.blocks + 1),
            });
        }
        let seq = TokenSequence::new(std::slice::from_ref(frame), &[action], cfg, self.blocks)?;
        let b = cfg.block_len();
        let angles = self.model.token_angles(&seq.coords);
        let groups = [QueryGroup {
            start: 0,
            end: b,
            keys: (self.blocks + 1) * b,
        }];
        let mut x = self.model.embed(&seq.ids, self.blocks * b);
        for (bp, kv) in self.model.params().blocks.iter().zip(&mut self.kv) {
            x = self.model.block_forward(bp, &x, &angles, kv, &groups, None, false).0;
        }
        self.blocks += 1;
        Ok(self.model.heads_forward(&x, 1, false).0.into())
    }
}
