use ndarray::NdFloat;

use crate::dataset::Episode;
use crate::error::{ItcError, Result};
use crate::frame::{FrameTokens, GridShape, PredictionGrid};
use crate::world_model::{state_probs, Session, TokenSequence, WorldModel};

/// Anything that produces next-frame distributions for the evaluation
/// harness.
pub trait FramePredictor {
    fn shape(&self) -> GridShape;

    fn vocab(&self) -> usize;

    /// Hash of the codebook the predictor was built against, if it has one.
    fn codebook_hash(&self) -> Option<&str> {
        None
    }

    /// Distributions for frame `t + 1` of every transition `t` of `ep`.
    fn predict_episode(&self, ep: &Episode) -> Result<Vec<PredictionGrid>>;

    /// Longest rollout from a single context frame.
    fn max_horizon(&self) -> usize;

    /// Starts an imagination from the first frame of `ep`.
    fn stepper<'a>(&'a self, ep: &'a Episode) -> Box<dyn RolloutStepper + 'a>;
}

/// Feeds imagined frames back in one step at a time.
pub trait RolloutStepper {
    fn next(&mut self, frame: &FrameTokens, action: u32) -> Result<PredictionGrid>;
}

/// A trained world model paired with its codebook hash.
#[derive(Debug, Clone)]
pub struct ModelPredictor<F = f32> {
    pub model: WorldModel<F>,
    pub codebook_hash: String,
}

impl<F: NdFloat> ModelPredictor<F> {
    pub fn new(model: WorldModel<F>, codebook_hash: impl Into<String>) -> Self {
        Self {
            model,
            codebook_hash: codebook_hash.into(),
        }
    }
}

impl<F: NdFloat> FramePredictor for ModelPredictor<F> {
    fn shape(&self) -> GridShape {
        let c = self.model.config();
        GridShape::new(c.grid_height, c.grid_width)
    }

    fn vocab(&self) -> usize {
        self.model.config().codebook_size
    }

    fn codebook_hash(&self) -> Option<&str> {
        Some(&self.codebook_hash)
    }

    /// Conditions on up to `T_WM - 1` earlier frames. The first `T_WM`
    /// transitions share one forward pass since blocks never see later ones.
    fn predict_episode(&self, ep: &Episode) -> Result<Vec<PredictionGrid>> {
        let cfg = self.model.config();
        let shape = self.shape();
        let window = cfg.seq_len;
        let n = ep.len();
        let mut out = Vec::with_capacity(n);
        let head = window.min(n);
        if head > 0 {
            let seq = TokenSequence::new(&ep.frames[..head], &ep.actions[..head], cfg, 0)?;
            let logits = self.model.forward(&seq)?;
            for t in 0..head {
                out.push(PredictionGrid::new(shape, state_probs(&logits, t))?);
            }
        }
        for t in head..n {
            let start = t + 1 - window;
            let seq = TokenSequence::new(&ep.frames[start..=t], &ep.actions[start..=t], cfg, 0)?;
            let logits = self.model.forward(&seq)?;
            out.push(PredictionGrid::new(shape, state_probs(&logits, window - 1))?);
        }
        Ok(out)
    }

    fn max_horizon(&self) -> usize {
        self.model.config().seq_len - 1
    }

    fn stepper<'a>(&'a self, _ep: &'a Episode) -> Box<dyn RolloutStepper + 'a> {
        Box::new(ModelStepper {
            session: Session::new(&self.model),
            shape: self.shape(),
        })
    }
}

struct ModelStepper<'a, F> {
    session: Session<'a, F>,
    shape: GridShape,
}

impl<F: NdFloat> RolloutStepper for ModelStepper<'_, F> {
    fn next(&mut self, frame: &FrameTokens, action: u32) -> Result<PredictionGrid> {
        let step = self.session.push(frame, action)?;
        PredictionGrid::from_logits(self.shape, &step.next_state)
    }
}

/// Predicts the recorded next frame with certainty.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub shape: GridShape,
    pub vocab: usize,
}

impl FramePredictor for OraclePredictor {
    fn shape(&self) -> GridShape {
        self.shape
    }

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn predict_episode(&self, ep: &Episode) -> Result<Vec<PredictionGrid>> {
        ep.frames[1..].iter().map(|f| PredictionGrid::one_hot(f, self.vocab)).collect()
    }

    fn max_horizon(&self) -> usize {
        usize::MAX
    }

    fn stepper<'a>(&'a self, ep: &'a Episode) -> Box<dyn RolloutStepper + 'a> {
        Box::new(ReplayStepper {
            frames: &ep.frames,
            t: 0,
            vocab: self.vocab,
        })
    }
}

struct ReplayStepper<'a> {
    frames: &'a [FrameTokens],
    t: usize,
    vocab: usize,
}

impl RolloutStepper for ReplayStepper<'_> {
    fn next(&mut self, _frame: &FrameTokens, _action: u32) -> Result<PredictionGrid> {
        self.t += 1;
        let f = self.frames.get(self.t).ok_or_else(|| ItcError::Shape {
            expected: format!("at most {} replayed steps", self.frames.len() - 1),
            got: format!("{}", self.t),
        })?;
        PredictionGrid::one_hot(f, self.vocab)
    }
}

/// Predicts the input frame rolled cyclically by `(dx, dy)` cells.
#[derive(Debug, Clone)]
pub struct ShiftOracle {
    pub shape: GridShape,
    pub vocab: usize,
    pub dx: i64,
    pub dy: i64,
}

impl ShiftOracle {
    pub fn shifted(&self, frame: &FrameTokens) -> Result<FrameTokens> {
        shift_frame(frame, self.dx, self.dy)
    }
}

/// Cyclic shift: the token at `(x, y)` moves to `(x + dx, y + dy)` modulo
/// the grid.
pub fn shift_frame(frame: &FrameTokens, dx: i64, dy: i64) -> Result<FrameTokens> {
    let shape = frame.shape();
    let (w, h) = (shape.width as i64, shape.height as i64);
    let mut out = vec![0; shape.len()];
    for (i, &tok) in frame.tokens().iter().enumerate() {
        let c = shape.coord(i);
        let x = (c.x + dx).rem_euclid(w);
        let y = (c.y + dy).rem_euclid(h);
        out[(y * w + x) as usize] = tok;
    }
    FrameTokens::new(shape, out)
}

impl FramePredictor for ShiftOracle {
    fn shape(&self) -> GridShape {
        self.shape
    }

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn predict_episode(&self, ep: &Episode) -> Result<Vec<PredictionGrid>> {
        ep.frames[..ep.len()]
            .iter()
            .map(|f| PredictionGrid::one_hot(&self.shifted(f)?, self.vocab))
            .collect()
    }

    fn max_horizon(&self) -> usize {
        usize::MAX
    }

    fn stepper<'a>(&'a self, _ep: &'a Episode) -> Box<dyn RolloutStepper + 'a> {
        Box::new(ShiftStepper(self))
    }
}

struct ShiftStepper<'a>(&'a ShiftOracle);

impl RolloutStepper for ShiftStepper<'_> {
    fn next(&mut self, frame: &FrameTokens, _action: u32) -> Result<PredictionGrid> {
        PredictionGrid::one_hot(&self.0.shifted(frame)?, self.0.vocab)
    }
}
