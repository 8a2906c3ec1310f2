use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::Episode;
use crate::decoder::DecodeConfig;
use crate::error::{ItcError, Result};
use crate::frame::FrameTokens;
use crate::gridworld::Symbol;
use crate::harness::eval::{count_symbol, transition_seed, DecoderVariant, EvalReport};
use crate::harness::predictor::FramePredictor;

/// An imagined trajectory and its creature bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub variant: DecoderVariant,
    pub episode: usize,
    pub seed: u64,
    /// The initial frame followed by `horizon` imagined frames.
    pub frames: Vec<FrameTokens>,
    pub creature_counts: Vec<usize>,
    pub true_creatures: usize,
    /// Imagined frames with more creatures than the episode holds.
    pub duplication: usize,
    /// Imagined frames with fewer.
    pub disappearance: usize,
}

/// Imagines `horizon` frames from the first frame of `ep`, replaying its
/// recorded actions.
pub fn rollout(
    predictor: &dyn FramePredictor,
    variant: DecoderVariant,
    ep: &Episode,
    horizon: usize,
    symbols: &[Symbol],
    decode: &DecodeConfig,
    seed: u64,
) -> Result<RolloutResult> {
    if horizon > predictor.max_horizon() {
        return Err(ItcError::Config(format!(
            "horizon {horizon} exceeds the predictor limit of {}",
            predictor.max_horizon()
        )));
    }
    if horizon > ep.len() {
        return Err(ItcError::Config(format!(
            "horizon {horizon} exceeds the {} recorded actions of episode {}",
            ep.len(),
            ep.index
        )));
    }
    let first = ep.frames[0].clone();
    let true_creatures = count_symbol(&first, symbols, Symbol::Creature);
    let mut frames = vec![first];
    let mut stepper = predictor.stepper(ep);
    for t in 0..horizon {
        let prev = &frames[t];
        let pred = stepper.next(prev, ep.actions[t])?;
        let cfg = DecodeConfig {
            rng_seed: transition_seed(seed, ep.index, t),
            ..decode.clone()
        };
        let next = variant.decode(&pred, prev, &cfg)?;
        frames.push(next);
    }
    let creature_counts: Vec<usize> = frames.iter().map(|f| count_symbol(f, symbols, Symbol::Creature)).collect();
    let imagined = &creature_counts[1..];
    Ok(RolloutResult {
        variant,
        episode: ep.index,
        seed,
        duplication: imagined.iter().filter(|&&c| c > true_creatures).count(),
        disappearance: imagined.iter().filter(|&&c| c < true_creatures).count(),
        frames,
        creature_counts,
        true_creatures,
    })
}

/// Totals persistence counts over a set of rollouts of one variant.
pub fn rollout_report(variant: DecoderVariant, results: &[RolloutResult], horizon: usize) -> EvalReport {
    let mut report = EvalReport::recount(variant, &[]);
    report.duplication = results.iter().map(|r| r.duplication).sum();
    report.disappearance = results.iter().map(|r| r.disappearance).sum();
    report.rollout_length = horizon;
    report
}

/// One line of glyphs per grid row; unknown tokens show as `?`.
pub fn render_utf8(frame: &FrameTokens, symbols: &[Symbol]) -> String {
    render_strip(std::slice::from_ref(frame), symbols)
}

/// Frames side by side, separated by a blank column.
pub fn render_strip(frames: &[FrameTokens], symbols: &[Symbol]) -> String {
    let Some(first) = frames.first() else {
        return String::new();
    };
    let shape = first.shape();
    let mut out = String::new();
    for y in 0..shape.height {
        for (i, f) in frames.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            for x in 0..shape.width {
                let tok = f.tokens()[y * shape.width + x];
                out.push(symbols.get(tok as usize).map_or('?', |s| s.glyph()));
            }
        }
        out.push('\n');
    }
    out
}

fn gray(symbol: Option<&Symbol>) -> u8 {
    match symbol {
        Some(Symbol::Floor) => 255,
        Some(Symbol::Wall) => 64,
        Some(Symbol::Goal) => 200,
        Some(Symbol::Player) => 0,
        Some(Symbol::Creature) => 128,
        None => 32,
    }
}

/// Binary PGM (P5) of the frames laid out left to right, `scale` pixels per
/// cell with a one-cell gap between frames.
pub fn write_pgm<W: Write>(mut w: W, frames: &[FrameTokens], symbols: &[Symbol], scale: usize) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| ItcError::Config("no frames to render".into()))?;
    if scale == 0 {
        return Err(ItcError::Config("scale must be positive".into()));
    }
    let shape = first.shape();
    let cols = frames.len() * (shape.width + 1) - 1;
    let (width, height) = (cols * scale, shape.height * scale);
    write!(w, "P5\n{width} {height}\n255\n")?;
    let mut row = vec![0u8; width];
    for y in 0..shape.height {
        for (i, f) in frames.iter().enumerate() {
            let base = i * (shape.width + 1);
            for x in 0..shape.width {
                let v = gray(symbols.get(f.tokens()[y * shape.width + x] as usize));
                row[(base + x) * scale..(base + x + 1) * scale].fill(v);
            }
            if i + 1 < frames.len() {
                row[(base + shape.width) * scale..(base + shape.width + 1) * scale].fill(0);
            }
        }
        for _ in 0..scale {
            w.write_all(&row)?;
        }
    }
    Ok(())
}
