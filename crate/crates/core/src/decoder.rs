//! Copy-or-generate decoding of the next frame.

use ndarray::ArrayView1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{binarize, AssignmentPair, BinarizeConfig, Source};
use crate::error::{ItcError, Result};
use crate::frame::{argmax_lowest, check_distribution, FrameTokens, GridShape, PredictionGrid};
use crate::ot::{build_affinity, solve_decode_ot, OtConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Temperature-one categorical draw.
    Categorical,
    /// Argmax, ties to the lowest token id.
    #[default]
    Greedy,
}

/// Where the transport output replaces direct sampling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RegionMask {
    /// Every position.
    Full,
    /// Every position except the one-cell border.
    #[default]
    Interior,
    /// No position (plain transformer decoding).
    Empty,
    /// Explicit row-major mask.
    Mask(Vec<bool>),
}

impl RegionMask {
    pub fn resolve(&self, shape: GridShape) -> Result<Vec<bool>> {
        let l = shape.len();
        Ok(match self {
            RegionMask::Full => vec![true; l],
            RegionMask::Empty => vec![false; l],
            RegionMask::Interior => (0..l)
                .map(|i| {
                    let c = shape.coord(i);
                    c.x > 0 && c.y > 0 && (c.x as usize) + 1 < shape.width && (c.y as usize) + 1 < shape.height
                })
                .collect(),
            RegionMask::Mask(m) => {
                if m.len() != l {
                    return Err(ItcError::Geometry(format!("region mask has {} entries, frame has {l}", m.len())));
                }
                m.clone()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub ot: OtConfig,
    pub bin: BinarizeConfig,
    pub ot_region: RegionMask,
    pub sampling: SamplingMode,
    pub rng_seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            ot: OtConfig::default(),
            bin: BinarizeConfig::default(),
            ot_region: RegionMask::Interior,
            sampling: SamplingMode::Greedy,
            rng_seed: 0,
        }
    }
}

/// The generator used for position `j` of a decode seeded with `seed`.
pub fn position_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    rng
}

pub fn sample_token<R: Rng + ?Sized>(p: ArrayView1<'_, f64>, mode: SamplingMode, rng: &mut R) -> Result<u32> {
    check_distribution(p)?;
    Ok(match mode {
        SamplingMode::Greedy => argmax_lowest(p),
        SamplingMode::Categorical => {
            let u: f64 = rng.random::<f64>() * p.sum();
            let mut acc = 0.0;
            let mut last = 0;
            for (k, &pk) in p.iter().enumerate() {
                if pk > 0.0 {
                    last = k;
                    acc += pk;
                    if u < acc {
                        return Ok(k as u32);
                    }
                }
            }
            last as u32
        }
    })
}

/// How an output token was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Copied from this previous-frame position.
    Copied(usize),
    /// Wildcard inside the transport region, sampled from the prediction.
    Generated,
    /// Outside the transport region, sampled from the prediction.
    Direct,
}

#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    pub frame: FrameTokens,
    pub origins: Vec<Origin>,
    pub assignment: Option<AssignmentPair>,
}

pub fn decode_next_frame(pred: &PredictionGrid, prev: &FrameTokens, cfg: &DecodeConfig) -> Result<FrameTokens> {
    decode_next_frame_detailed(pred, prev, cfg).map(|o| o.frame)
}

pub fn decode_next_frame_detailed(pred: &PredictionGrid, prev: &FrameTokens, cfg: &DecodeConfig) -> Result<DecodeOutcome> {
    if pred.shape() != prev.shape() {
        return Err(ItcError::Geometry(format!(
            "prediction grid {:?} vs previous frame {:?}",
            pred.shape(),
            prev.shape()
        )));
    }
    let region = cfg.ot_region.resolve(prev.shape())?;
    let assignment = if region.iter().any(|&r| r) {
        let aff = build_affinity(pred, prev, &cfg.ot)?;
        let plan = solve_decode_ot(&aff, &cfg.ot)?;
        Some(binarize(&plan, &cfg.bin)?)
    } else {
        None
    };

    let l = prev.len();
    let mut tokens = Vec::with_capacity(l);
    let mut origins = Vec::with_capacity(l);
    for (j, &inside) in region.iter().enumerate() {
        let source = match (&assignment, inside) {
            (Some(a), true) => Some(a.sources()[j]),
            _ => None,
        };
        let (tok, origin) = match source {
            Some(Source::Prev(i)) => (prev.tokens()[i], Origin::Copied(i)),
            Some(Source::Gen) => (
                sample_token(pred.row(j), cfg.sampling, &mut position_rng(cfg.rng_seed, j))?,
                Origin::Generated,
            ),
            None => (
                sample_token(pred.row(j), cfg.sampling, &mut position_rng(cfg.rng_seed, j))?,
                Origin::Direct,
            ),
        };
        tokens.push(tok);
        origins.push(origin);
    }
    Ok(DecodeOutcome {
        frame: FrameTokens::new(prev.shape(), tokens)?,
        origins,
        assignment,
    })
}

/// Independent per-position sampling from the prediction, no transport.
pub fn sample_frame(pred: &PredictionGrid, mode: SamplingMode, seed: u64) -> Result<FrameTokens> {
    let tokens = (0..pred.len())
        .map(|j| sample_token(pred.row(j), mode, &mut position_rng(seed, j)))
        .collect::<Result<_>>()?;
    FrameTokens::new(pred.shape(), tokens)
}
