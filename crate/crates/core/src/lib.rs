//! Identifiable token correspondence: optimal-transport decoding for token
//! world models, plus the tokenizer, toy world model, gridworld and
//! evaluation harness used to exercise it.

// `!(x > 0.0)` checks are written that way so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod frame;
pub mod gridworld;
pub mod harness;
pub mod ot;
pub mod tokenizer;
pub mod world_model;

pub use assignment::{binarize, AssignmentPair, BinarizeConfig, Source};
pub use decoder::{decode_next_frame, sample_token, DecodeConfig, RegionMask, SamplingMode};
pub use error::{ItcError, Result};
pub use frame::{FrameTokens, GridCoord, GridShape, PredictionGrid};
pub use ot::{build_affinity, distance_cost, sinkhorn, solve_decode_ot, AffinityPair, OtConfig, TransportPair};
pub use gridworld::{GridConfig, Symbol};
pub use harness::{DecoderVariant, EvalReport, RunConfig};
pub use tokenizer::Codebook;
pub use world_model::{WmConfig, WorldModel};
