use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{build_dataset, Dataset};
use crate::error::{ItcError, Result};
use crate::gridworld::collect;
use crate::harness::config::RunConfig;
use crate::harness::predictor::ModelPredictor;
use crate::tokenizer::Codebook;
use crate::world_model::{read_checkpoint, train_step, write_checkpoint, Adam, CheckpointMeta, StepMetrics, WindowSampler, WorldModel};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const CODEBOOK_FILE: &str = "codebook.bin";
pub const CHECKPOINT_FILE: &str = "world_model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Files written by [`train_pipeline`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub dataset: PathBuf,
    pub codebook: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint_sha256: String,
    pub transitions: usize,
    pub codebook_size: usize,
    pub final_metrics: Option<StepMetrics>,
}

/// Collects episodes and grows the codebook, or loads an existing pair.
pub fn prepare_data(cfg: &RunConfig) -> Result<(Dataset, Codebook)> {
    if let (Some(d), Some(c)) = (&cfg.dataset_path, &cfg.codebook_path) {
        let dataset = Dataset::read_jsonl(BufReader::new(File::open(d)?)).map_err(ItcError::stage("load dataset"))?;
        let codebook = Codebook::read_from(BufReader::new(File::open(c)?)).map_err(ItcError::stage("load codebook"))?;
        if codebook.hash() != dataset.header.codebook_hash {
            return Err(ItcError::CodebookMismatch {
                model: codebook.hash(),
                dataset: dataset.header.codebook_hash,
            });
        }
        return Ok((dataset, codebook));
    }
    let records = collect(&cfg.grid, cfg.episodes, cfg.seed).map_err(ItcError::stage("collect"))?;
    let mut codebook = Codebook::new(cfg.grid.patch_shape(), cfg.tokenizer_tau, cfg.tokenizer_capacity);
    let dataset = build_dataset(&records, &cfg.grid, &mut codebook, cfg.seed).map_err(ItcError::stage("tokenize"))?;
    Ok((dataset, codebook))
}

/// Trains a fresh model on the training split, reporting every update.
pub fn train_model(
    cfg: &RunConfig,
    dataset: &Dataset,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<WorldModel<f32>> {
    let wm = cfg.model_config(dataset.header.codebook_size);
    wm.validate()?;
    let mut model = WorldModel::<f32>::new(wm.clone(), cfg.seed)?;
    let mut opt = Adam::new(model.params(), &wm);
    let sampler = WindowSampler::new(dataset.train_episodes(), wm.seq_len)?;
    let mut window_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    window_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    for step in 0..cfg.train_steps {
        let batch = (0..cfg.batch_size)
            .map(|_| sampler.sample(&mut window_rng, &wm))
            .collect::<Result<Vec<_>>>()?;
        let dropout = (!cfg.deterministic).then_some(&mut dropout_rng);
        let m = train_step(&mut model, &batch, &mut opt, dropout, step)?;
        on_step(&m)?;
    }
    Ok(model)
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Data collection, tokenizer growth and world-model training, with every
/// artifact written under `cfg.out_dir`.
pub fn train_pipeline(cfg: &RunConfig) -> Result<Artifacts> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let (dataset, codebook) = prepare_data(cfg)?;
    let dataset_path = out.join(DATASET_FILE);
    let codebook_path = out.join(CODEBOOK_FILE);
    let write_data = || -> Result<()> {
        let mut w = BufWriter::new(File::create(&dataset_path)?);
        dataset.write_jsonl(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(&codebook_path)?);
        codebook.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    };
    write_data().map_err(ItcError::stage("write data"))?;

    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut last = None;
    let model = train_model(cfg, &dataset, |m| {
        serde_json::to_writer(&mut metrics, m)?;
        metrics.write_all(b"\n")?;
        last = Some(*m);
        Ok(())
    })
    .map_err(ItcError::stage("train world model"))?;
    metrics.flush()?;

    let checkpoint_path = out.join(CHECKPOINT_FILE);
    let meta = CheckpointMeta {
        config: model.config().clone(),
        codebook_hash: codebook.hash(),
        param_count: model.params().num_params(),
        train_steps: cfg.train_steps,
        seed: cfg.seed,
    };
    let write_ckpt = || -> Result<()> {
        let mut w = BufWriter::new(File::create(&checkpoint_path)?);
        write_checkpoint(&mut w, &model, &meta)?;
        w.flush()?;
        Ok(())
    };
    write_ckpt().map_err(ItcError::stage("write checkpoint"))?;

    Ok(Artifacts {
        checkpoint_sha256: sha256_file(&checkpoint_path)?,
        dataset: dataset_path,
        codebook: codebook_path,
        checkpoint: checkpoint_path,
        metrics: metrics_path,
        transitions: dataset.num_transitions(),
        codebook_size: codebook.len(),
        final_metrics: last,
    })
}

pub fn load_predictor(checkpoint: &Path) -> Result<ModelPredictor<f32>> {
    let (model, meta) = read_checkpoint::<_, f32>(BufReader::new(File::open(checkpoint)?))?;
    Ok(ModelPredictor::new(model, meta.codebook_hash))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_jsonl(BufReader::new(File::open(path)?))
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    Codebook::read_from(BufReader::new(File::open(path)?))
}
