//! Run configuration, training orchestration, one-step evaluation and
//! imagination rollouts.

mod config;
mod eval;
mod pipeline;
mod predictor;
mod rollout;

pub use config::RunConfig;
pub use eval::{
    count_symbol, eval_accuracy, eval_variants, transition_seed, DecoderVariant, EvalReport, Evaluation,
    TransitionOutcome,
};
pub use pipeline::{
    load_codebook, load_dataset, load_predictor, prepare_data, train_model, train_pipeline, Artifacts, CHECKPOINT_FILE,
    CODEBOOK_FILE, DATASET_FILE, METRICS_FILE,
};
pub use predictor::{shift_frame, FramePredictor, ModelPredictor, OraclePredictor, RolloutStepper, ShiftOracle};
pub use rollout::{render_strip, render_utf8, rollout, rollout_report, write_pgm, RolloutResult};
