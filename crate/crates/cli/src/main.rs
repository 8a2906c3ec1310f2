use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use itc_core::dataset::symbol_table;
use itc_core::decoder::{decode_next_frame_detailed, Origin};
use itc_core::harness::{
    eval_variants, load_codebook, load_dataset, load_predictor, prepare_data, render_strip, rollout, train_pipeline,
    write_pgm, DecoderVariant, EvalReport, RunConfig, CHECKPOINT_FILE, CODEBOOK_FILE, DATASET_FILE,
};
use itc_core::ot::sinkhorn_naive;
use itc_core::{sinkhorn, FrameTokens, GridShape, ItcError, PredictionGrid, SamplingMode};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

mod costs;

#[derive(Parser, Debug)]
#[command(name = "itc", version, about = "Token correspondence decoding for token world models")]
struct Cli {
    /// JSON run configuration; unspecified fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Disable dropout so training is reproducible bit for bit.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect gridworld episodes, grow the codebook and write the dataset.
    GenData,
    /// Train the world model and write checkpoint and metrics.
    TrainWm(TrainArgs),
    /// One-step accuracy of both decoders on the held-out split.
    EvalAccuracy(EvalArgs),
    /// Imagine frames from an episode's first frame.
    Rollout(RolloutArgs),
    /// Decode one prediction grid against a previous frame.
    Decode(DecodeArgs),
    /// Solve a transport problem read from a cost file.
    SinkhornBench(SinkhornArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Existing dataset; requires --codebook.
    #[arg(long, requires = "codebook")]
    dataset: Option<PathBuf>,
    #[arg(long, requires = "dataset")]
    codebook: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelInputs {
    /// Defaults to `<out>/world_model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to `<out>/dataset.jsonl`.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    BaselineSample,
    Itc,
    Both,
}

impl VariantArg {
    fn variants(self) -> Vec<DecoderVariant> {
        match self {
            VariantArg::BaselineSample => vec![DecoderVariant::BaselineSample],
            VariantArg::Itc => vec![DecoderVariant::Itc],
            VariantArg::Both => DecoderVariant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SamplingArg {
    Greedy,
    Categorical,
}

impl From<SamplingArg> for SamplingMode {
    fn from(s: SamplingArg) -> Self {
        match s {
            SamplingArg::Greedy => SamplingMode::Greedy,
            SamplingArg::Categorical => SamplingMode::Categorical,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    inputs: ModelInputs,
    #[arg(long, value_enum, default_value = "both")]
    variant: VariantArg,
    #[arg(long, value_enum, default_value = "greedy")]
    sampling: SamplingArg,
    /// Evaluation seeds to average over (categorical sampling only).
    #[arg(long, default_value_t = 1)]
    samples: u64,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[command(flatten)]
    inputs: ModelInputs,
    /// Defaults to `<out>/codebook.bin`.
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// Index into the held-out episodes.
    #[arg(long, default_value_t = 0)]
    episode: usize,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_enum, default_value = "both")]
    variant: VariantArg,
    /// Also write PGM images, this many pixels per cell.
    #[arg(long)]
    pgm: Option<usize>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// JSON file with `height`, `width`, `prev` and `probs`.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct SinkhornArgs {
    /// Text file: `n m` on the first line, then `n` rows of `m` costs.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Use plain matrix scaling instead of the log domain.
    #[arg(long)]
    naive: bool,
}

#[derive(Debug, Deserialize)]
struct DecodeRequest {
    height: usize,
    width: usize,
    prev: Vec<u32>,
    /// One row of `K` probabilities per cell.
    probs: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct DecodeResponse {
    tokens: Vec<u32>,
    origins: Vec<String>,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_json_file(p).map_err(|e| match e {
            ItcError::Io(io) => ItcError::Config(format!("{}: {io}", p.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.eval_seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.deterministic |= cli.deterministic;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn or_default(p: &Option<PathBuf>, cfg: &RunConfig, file: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| cfg.out_dir.join(file))
}

fn gen_data(cfg: &RunConfig) -> anyhow::Result<()> {
    cfg.validate()?;
    let (dataset, codebook) = prepare_data(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = BufWriter::new(File::create(cfg.out_dir.join(DATASET_FILE))?);
    dataset.write_jsonl(&mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(cfg.out_dir.join(CODEBOOK_FILE))?);
    codebook.write_to(&mut w)?;
    w.flush()?;
    println!(
        "{} episodes, {} transitions, {} codes -> {}",
        dataset.episodes.len(),
        dataset.num_transitions(),
        codebook.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn train(mut cfg: RunConfig, args: &TrainArgs) -> anyhow::Result<()> {
    if args.dataset.is_some() {
        cfg.dataset_path = args.dataset.clone();
        cfg.codebook_path = args.codebook.clone();
    }
    let artifacts = train_pipeline(&cfg)?;
    write_json(&cfg.out_dir.join("artifacts.json"), &artifacts)?;
    if let Some(m) = artifacts.final_metrics {
        println!("step {} loss {:.4} token error {:.4}", m.step, m.loss, m.token_error_rate);
    }
    println!("checkpoint {} sha256 {}", artifacts.checkpoint.display(), artifacts.checkpoint_sha256);
    Ok(())
}

fn eval(cfg: &RunConfig, args: &EvalArgs) -> anyhow::Result<()> {
    let predictor = load_predictor(&or_default(&args.inputs.checkpoint, cfg, CHECKPOINT_FILE))?;
    let dataset = load_dataset(&or_default(&args.inputs.dataset, cfg, DATASET_FILE))?;
    let variants = args.variant.variants();
    let mut decode = cfg.decode.clone();
    decode.sampling = args.sampling.into();
    let samples = match decode.sampling {
        SamplingMode::Greedy => 1,
        SamplingMode::Categorical => args.samples.max(1),
    };
    let mut per_variant: Vec<Vec<EvalReport>> = vec![Vec::new(); variants.len()];
    for s in 0..samples {
        for (v, e) in eval_variants(&predictor, &variants, &dataset, &decode, cfg.eval_seed + s)?
            .into_iter()
            .enumerate()
        {
            per_variant[v].push(e.report);
        }
    }
    let reports = per_variant
        .iter()
        .map(|r| EvalReport::average(r))
        .collect::<itc_core::Result<Vec<_>>>()?;
    for r in &reports {
        println!(
            "{:<16} n={} overall {:.2}% with creatures {:.2}% without {:.2}% token error {:.3}%",
            r.variant.label(),
            r.transitions,
            100.0 * r.overall_accuracy,
            100.0 * r.accuracy_with_creatures,
            100.0 * r.accuracy_without_creatures,
            100.0 * r.token_error_rate
        );
    }
    fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("eval_report.json"), &reports)
}

fn run_rollout(cfg: &RunConfig, args: &RolloutArgs) -> anyhow::Result<()> {
    let predictor = load_predictor(&or_default(&args.inputs.checkpoint, cfg, CHECKPOINT_FILE))?;
    let dataset = load_dataset(&or_default(&args.inputs.dataset, cfg, DATASET_FILE))?;
    let codebook = load_codebook(&or_default(&args.codebook, cfg, CODEBOOK_FILE))?;
    if codebook.hash() != dataset.header.codebook_hash {
        return Err(ItcError::CodebookMismatch {
            model: codebook.hash(),
            dataset: dataset.header.codebook_hash,
        }
        .into());
    }
    let symbols = symbol_table(&codebook);
    let holdout = dataset.holdout_episodes();
    let Some(ep) = holdout.get(args.episode) else {
        bail!(ItcError::Config(format!("only {} held-out episodes", holdout.len())));
    };
    let horizon = args.horizon.unwrap_or(cfg.rollout_horizon);
    let mut decode = cfg.decode.clone();
    decode.sampling = cfg.rollout_sampling;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut results = Vec::new();
    for v in args.variant.variants() {
        let r = rollout(&predictor, v, ep, horizon, &symbols, &decode, cfg.eval_seed)?;
        println!(
            "{} (creatures {:?}, true {}, duplication {}, disappearance {})",
            v.label(),
            r.creature_counts,
            r.true_creatures,
            r.duplication,
            r.disappearance
        );
        print!("{}", render_strip(&r.frames, &symbols));
        if let Some(scale) = args.pgm {
            let path = cfg.out_dir.join(format!("rollout_{}.pgm", v.label()));
            write_pgm(BufWriter::new(File::create(&path)?), &r.frames, &symbols, scale)?;
        }
        results.push(r);
    }
    write_json(&cfg.out_dir.join("rollout.json"), &results)
}

fn decode(cfg: &RunConfig, args: &DecodeArgs, out: Option<&Path>) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let req: DecodeRequest = serde_json::from_str(&text).map_err(|e| ItcError::Config(format!("decode input: {e}")))?;
    let shape = GridShape::new(req.height, req.width);
    let k = req.probs.first().map_or(0, Vec::len);
    if req.probs.len() != shape.len() || req.probs.iter().any(|r| r.len() != k) {
        bail!(ItcError::Config(format!("probs must be {} rows of equal length", shape.len())));
    }
    let probs = Array2::from_shape_vec((shape.len(), k), req.probs.concat())?;
    let pred = PredictionGrid::new(shape, probs)?;
    let prev = FrameTokens::new(shape, req.prev)?;
    let decoded = decode_next_frame_detailed(&pred, &prev, &cfg.decode)?;
    let response = DecodeResponse {
        tokens: decoded.frame.tokens().to_vec(),
        origins: decoded
            .origins
            .iter()
            .map(|o| match o {
                Origin::Copied(i) => format!("copy:{i}"),
                Origin::Generated => "generated".into(),
                Origin::Direct => "direct".into(),
            })
            .collect(),
    };
    println!("{}", serde_json::to_string(&response)?);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("decoded.json"), &response)?;
    }
    Ok(())
}

fn sinkhorn_bench(cfg: &RunConfig, args: &SinkhornArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let cost = costs::parse_costs(&text)?;
    let eps = args.epsilon.unwrap_or(cfg.decode.ot.epsilon);
    let iters = args.iterations.unwrap_or(cfg.decode.ot.iterations);
    let plan = if args.naive {
        sinkhorn_naive(&cost, eps, iters)?
    } else {
        sinkhorn(&cost, eps, iters)?
    };
    print!("{}", costs::format_plan(&plan));
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData => gen_data(&cfg),
        Command::TrainWm(a) => train(cfg, a),
        Command::EvalAccuracy(a) => eval(&cfg, a),
        Command::Rollout(a) => run_rollout(&cfg, a),
        Command::Decode(a) => decode(&cfg, a, cli.out.as_deref()),
        Command::SinkhornBench(a) => sinkhorn_bench(&cfg, a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<ItcError>() {
        Some(e) if e.is_numerical() => 3,
        Some(ItcError::Io(_)) => 1,
        Some(ItcError::Stage { source, .. }) if matches!(**source, ItcError::Io(_)) => 1,
        Some(_) => 2,
        None if err.downcast_ref::<ndarray::ShapeError>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
