use std::time::Instant;

use itc_core::dataset::{symbol_table, Dataset};
use itc_core::harness::{
    eval_accuracy, eval_variants, load_dataset, load_predictor, prepare_data, render_strip, rollout, shift_frame,
    train_pipeline, write_pgm, DecoderVariant, EvalReport, ModelPredictor, OraclePredictor, RunConfig, ShiftOracle,
};
use itc_core::world_model::{StepMetrics, WorldModel};
use itc_core::{DecodeConfig, GridConfig, ItcError, Symbol};

fn small_config(out: &std::path::Path, episodes: usize, steps: usize) -> RunConfig {
    RunConfig {
        episodes,
        train_steps: steps,
        seed: 5,
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn small_data(episodes: usize) -> (Dataset, Vec<Symbol>) {
    let dir = tempfile::tempdir().unwrap();
    let (ds, cb) = prepare_data(&small_config(dir.path(), episodes, 0)).unwrap();
    (ds, symbol_table(&cb))
}

#[test]
fn oracle_predictions_score_perfectly_under_both_variants() {
    let (ds, _) = small_data(40);
    let oracle = OraclePredictor {
        shape: ds.shape(),
        vocab: ds.header.codebook_size,
    };
    let evals = eval_variants(&oracle, &DecoderVariant::ALL, &ds, &DecodeConfig::default(), 0).unwrap();
    for e in &evals {
        assert!(e.report.transitions > 0);
        assert_eq!(e.report.overall_accuracy, 1.0, "{}", e.report.variant);
        assert_eq!(e.report.token_error_rate, 0.0);
        assert_eq!(e.report, EvalReport::recount(e.report.variant, &e.outcomes));
    }
}

#[test]
fn recount_matches_streaming_for_an_untrained_model() {
    let (ds, _) = small_data(40);
    let cfg = RunConfig::default().model_config(ds.header.codebook_size);
    let model = WorldModel::<f32>::new(
        itc_core::WmConfig {
            zero_init_heads: false,
            ..cfg
        },
        1,
    )
    .unwrap();
    let predictor = ModelPredictor::new(model, ds.header.codebook_hash.clone());
    for variant in DecoderVariant::ALL {
        let e = eval_accuracy(&predictor, variant, &ds, &DecodeConfig::default(), 3).unwrap();
        assert_eq!(e.report, EvalReport::recount(variant, &e.outcomes));
        let r = &e.report;
        for acc in [r.overall_accuracy, r.accuracy_with_creatures, r.accuracy_without_creatures, r.token_error_rate] {
            assert!((0.0..=1.0).contains(&acc));
        }
        let holdout: usize = ds.holdout_episodes().iter().map(|ep| ep.len()).sum();
        assert_eq!(r.transitions, holdout);
    }
}

#[test]
fn mismatched_codebook_is_rejected() {
    let (ds, _) = small_data(20);
    let cfg = RunConfig::default().model_config(ds.header.codebook_size);
    let predictor = ModelPredictor::new(WorldModel::<f32>::new(cfg, 1).unwrap(), "not-the-hash");
    let err = eval_accuracy(&predictor, DecoderVariant::Itc, &ds, &DecodeConfig::default(), 0).unwrap_err();
    assert!(matches!(err, ItcError::CodebookMismatch { .. }), "{err}");
}

#[test]
fn horizon_zero_returns_the_initial_frame() {
    let (ds, symbols) = small_data(20);
    let oracle = OraclePredictor {
        shape: ds.shape(),
        vocab: ds.header.codebook_size,
    };
    let ep = &ds.episodes[0];
    let r = rollout(&oracle, DecoderVariant::Itc, ep, 0, &symbols, &DecodeConfig::default(), 0).unwrap();
    assert_eq!(r.frames, vec![ep.frames[0].clone()]);
    assert_eq!((r.duplication, r.disappearance), (0, 0));
}

#[test]
fn horizon_beyond_the_model_window_is_rejected() {
    let (ds, symbols) = small_data(20);
    let cfg = RunConfig::default().model_config(ds.header.codebook_size);
    let limit = cfg.seq_len - 1;
    let predictor = ModelPredictor::new(WorldModel::<f32>::new(cfg, 1).unwrap(), ds.header.codebook_hash.clone());
    let ep = ds.episodes.iter().find(|e| e.len() > limit + 1).unwrap();
    let d = DecodeConfig::default();
    assert!(rollout(&predictor, DecoderVariant::Itc, ep, limit, &symbols, &d, 0).is_ok());
    assert!(matches!(
        rollout(&predictor, DecoderVariant::Itc, ep, limit + 1, &symbols, &d, 0),
        Err(ItcError::Config(_))
    ));
}

#[test]
fn shift_oracle_rollouts_keep_every_creature() {
    let grid = GridConfig {
        creature_episode_prob: 1.0,
        ..GridConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        grid,
        ..small_config(dir.path(), 30, 0)
    };
    let (ds, cb) = prepare_data(&cfg).unwrap();
    let symbols = symbol_table(&cb);
    let decode = DecodeConfig::default();
    for (dx, dy) in [(1, 0), (0, -1), (1, 1), (-2, 0)] {
        let oracle = ShiftOracle {
            shape: ds.shape(),
            vocab: ds.header.codebook_size,
            dx,
            dy,
        };
        for ep in &ds.episodes {
            let h = ep.len().min(40);
            let r = rollout(&oracle, DecoderVariant::Itc, ep, h, &symbols, &decode, 9).unwrap();
            assert!(r.true_creatures > 0);
            assert_eq!((r.duplication, r.disappearance), (0, 0), "shift ({dx},{dy}) episode {}", ep.index);
            for w in r.frames.windows(2) {
                assert_eq!(w[1], shift_frame(&w[0], dx, dy).unwrap());
            }
        }
    }
}

#[test]
fn rendering_produces_glyph_rows_and_pgm() {
    let (ds, symbols) = small_data(5);
    let frames = &ds.episodes[0].frames[..3];
    let text = render_strip(frames, &symbols);
    let lines: Vec<&str> = text.lines().collect();
    let shape = ds.shape();
    assert_eq!(lines.len(), shape.height);
    assert!(lines.iter().all(|l| l.chars().count() == 3 * shape.width + 2));
    let mut pgm = Vec::new();
    write_pgm(&mut pgm, frames, &symbols, 4).unwrap();
    let header = format!("P5\n{} {}\n255\n", (3 * (shape.width + 1) - 1) * 4, shape.height * 4);
    assert!(pgm.starts_with(header.as_bytes()));
    assert_eq!(pgm.len(), header.len() + (3 * (shape.width + 1) - 1) * 4 * shape.height * 4);
}

#[test]
fn tiny_pipeline_is_fast_deterministic_and_ordered() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let first = train_pipeline(&small_config(a.path(), 30, 200)).unwrap();
    let elapsed = t0.elapsed();
    assert!(first.transitions >= 500, "{} transitions", first.transitions);
    assert!(elapsed.as_secs_f64() < 60.0, "{elapsed:?}");
    let second = train_pipeline(&small_config(b.path(), 30, 200)).unwrap();
    assert_eq!(first.checkpoint_sha256, second.checkpoint_sha256);

    let text = std::fs::read_to_string(&first.metrics).unwrap();
    let steps: Vec<usize> = text
        .lines()
        .map(|l| serde_json::from_str::<StepMetrics>(l).unwrap().step)
        .collect();
    assert_eq!(steps.len(), 200);
    assert!(steps.windows(2).all(|w| w[1] > w[0]));

    let predictor = load_predictor(&first.checkpoint).unwrap();
    let ds = load_dataset(&first.dataset).unwrap();
    let e = eval_accuracy(&predictor, DecoderVariant::Itc, &ds, &DecodeConfig::default(), 0).unwrap();
    assert!(e.report.transitions > 0);
}

#[test]
fn pipeline_errors_carry_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let bad = RunConfig {
        batch_size: 0,
        ..small_config(dir.path(), 3, 1)
    };
    assert!(matches!(train_pipeline(&bad), Err(ItcError::Config(_))));

    let data = dir.path().join("broken.jsonl");
    let codebook = dir.path().join("codebook.bin");
    std::fs::write(&data, "{not json}\n").unwrap();
    std::fs::write(&codebook, b"junk").unwrap();
    let cfg = RunConfig {
        dataset_path: Some(data),
        codebook_path: Some(codebook),
        ..small_config(&dir.path().join("out"), 3, 1)
    };
    match train_pipeline(&cfg) {
        Err(ItcError::Stage { stage, .. }) => assert_eq!(stage, "load dataset"),
        other => panic!("expected a stage error, got {other:?}"),
    }
}
