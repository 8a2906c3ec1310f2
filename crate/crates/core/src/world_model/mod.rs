//! Token world model: a block-causal transformer with 3D rotary and learned
//! absolute positional embeddings, trained by next-frame prediction.

mod checkpoint;
mod config;
mod layers;
mod model;
mod params;
mod rope;
mod sequence;
mod session;
mod train;

pub use checkpoint::{quantize_f32, read_checkpoint, write_checkpoint, CheckpointMeta};
pub use config::WmConfig;
pub use model::{state_probs, LossParts, Targets, WmOutput, WorldModel};
pub use params::{BlockParams, HeadParams, Params, TensorInfo};
pub use rope::{rope3d_rotate, Coord3, Rope3d, RopeAxis};
pub use sequence::{block_causal_mask, TokenSequence};
pub use session::{Session, StepOutput};
pub use train::{clip_grad_norm, train_step, Adam, StepMetrics, TrainWindow, WindowSampler};
