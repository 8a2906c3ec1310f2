use itc_core::frame::{FrameTokens, GridShape};
use itc_core::world_model::{
    clip_grad_norm, rope3d_rotate, Adam, Coord3, Params, Session, Targets, TokenSequence, TrainWindow, WmConfig,
    WorldModel,
};
use itc_core::dataset::Episode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> WmConfig {
    WmConfig {
        num_blocks: 2,
        num_heads: 1,
        embed_dim: 8,
        mlp_dim: 16,
        head_hidden: 8,
        dropout_rate: 0.0,
        seq_len: 3,
        grid_height: 2,
        grid_width: 2,
        codebook_size: 3,
        num_actions: 2,
        rope_split: (1, 1),
        init_std: 0.5,
        zero_init_heads: false,
        ..WmConfig::default()
    }
}

fn random_frames(cfg: &WmConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<FrameTokens> {
    let shape = GridShape::new(cfg.grid_height, cfg.grid_width);
    (0..n)
        .map(|_| {
            let toks = (0..shape.len()).map(|_| rng.random_range(0..cfg.codebook_size as u32)).collect();
            FrameTokens::new(shape, toks).unwrap()
        })
        .collect()
}

fn random_window(cfg: &WmConfig, t: usize, rng: &mut ChaCha8Rng) -> (TokenSequence, Targets) {
    let frames = random_frames(cfg, t + 1, rng);
    let actions: Vec<u32> = (0..t).map(|_| rng.random_range(0..cfg.num_actions as u32)).collect();
    let seq = TokenSequence::new(&frames[..t], &actions, cfg, 0).unwrap();
    let targets = Targets {
        next_tokens: frames[1..].iter().flat_map(|f| f.tokens().to_vec()).collect(),
        rewards: (0..t).map(|_| rng.random_bool(0.5)).collect(),
        dones: (0..t).map(|_| rng.random_bool(0.5)).collect(),
    };
    (seq, targets)
}

#[test]
fn gradients_match_central_differences() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = WorldModel::<f64>::new(cfg.clone(), 3).unwrap();
    let (seq, targets) = random_window(&cfg, 3, &mut rng);
    let mut grads = model.params().zeros_like();
    model.loss_and_grad(&seq, &targets, None, &mut grads, 1.0).unwrap();
    let analytic: Vec<f64> = grads.slices().concat();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut idx = 0;
    let n_slices = model.params().slices().len();
    for s in 0..n_slices {
        let len = model.params().slices()[s].len();
        for i in 0..len {
            let orig = model.params().slices()[s][i];
            model.params_mut().slices_mut()[s][i] = orig + h;
            let up = model.loss(&seq, &targets).unwrap().total();
            model.params_mut().slices_mut()[s][i] = orig - h;
            let down = model.loss(&seq, &targets).unwrap().total();
            model.params_mut().slices_mut()[s][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
            idx += 1;
        }
    }
    assert_eq!(idx, model.params().num_params());
    assert!(worst < 1e-3, "max relative error {worst}");
}

#[test]
fn kv_cache_matches_full_forward() {
    let cfg = WmConfig {
        zero_init_heads: false,
        dropout_rate: 0.0,
        seq_len: 4,
        ..WmConfig::default()
    };
    let model = WorldModel::<f64>::new(cfg.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frames = random_frames(&cfg, 4, &mut rng);
    let actions = [0, 3, 1, 4];
    let full = model.forward(&TokenSequence::new(&frames, &actions, &cfg, 0).unwrap()).unwrap();
    let mut session = Session::new(&model);
    let mut worst: f64 = 0.0;
    for (t, (f, &a)) in frames.iter().zip(&actions).enumerate() {
        let step = session.push(f, a).unwrap();
        let diff = |a: f64, b: f64| (a - b).abs();
        for (x, y) in step.next_state.iter().zip(full.next_state.index_axis(ndarray::Axis(0), t)) {
            worst = worst.max(diff(*x, *y));
        }
        for k in 0..2 {
            worst = worst.max(diff(step.reward[k], full.reward[[t, k]]));
            worst = worst.max(diff(step.done[k], full.done[[t, k]]));
        }
    }
    assert!(worst <= 1e-6, "max difference {worst}");
    assert!(session.push(&frames[0], 0).is_err());
}

#[test]
fn future_blocks_do_not_affect_past_outputs() {
    let cfg = WmConfig {
        zero_init_heads: false,
        seq_len: 4,
        ..WmConfig::default()
    };
    let model = WorldModel::<f64>::new(cfg.clone(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let frames = random_frames(&cfg, 4, &mut rng);
    let actions = [1, 2, 3, 0];
    let base = model.forward(&TokenSequence::new(&frames, &actions, &cfg, 0).unwrap()).unwrap();
    for t_future in 1..4 {
        let mut changed = frames.clone();
        let mut acts = actions;
        for f in changed.iter_mut().skip(t_future) {
            let toks: Vec<u32> = f.tokens().iter().map(|&x| (x + 1) % cfg.codebook_size as u32).collect();
            *f = FrameTokens::new(f.shape(), toks).unwrap();
        }
        for a in acts.iter_mut().skip(t_future) {
            *a = (*a + 2) % cfg.num_actions as u32;
        }
        let out = model.forward(&TokenSequence::new(&changed, &acts, &cfg, 0).unwrap()).unwrap();
        for t in 0..t_future {
            let a = base.next_state.index_axis(ndarray::Axis(0), t);
            let b = out.next_state.index_axis(ndarray::Axis(0), t);
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()), "block {t} changed");
            assert_eq!(base.reward.row(t), out.reward.row(t));
            assert_eq!(base.done.row(t), out.done.row(t));
        }
    }
}

#[test]
fn rope_inner_products_depend_only_on_offsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let configs = [
        (WmConfig::default().head_dim(), WmConfig::default().rope_split),
        (
            WmConfig::full_size(6, 6, 5, 5).head_dim(),
            WmConfig::full_size(6, 6, 5, 5).rope_split,
        ),
        (tiny_config().head_dim(), tiny_config().rope_split),
    ];
    for (dh, split) in configs {
        for _ in 0..200 {
            let q: Vec<f64> = (0..dh).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..dh).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut c = || Coord3::new(rng.random_range(-20..20), rng.random_range(-20..20), rng.random_range(0..40));
            let (c1, c2) = (c(), c());
            let delta = rng.random_range(-50..50);
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let rot = |v: &[f64], c| rope3d_rotate(v, c, 10_000.0, split).unwrap();
            let before = dot(&rot(&q, c1), &rot(&k, c2));
            let after = dot(&rot(&q, c1.shifted(delta)), &rot(&k, c2.shifted(delta)));
            assert!((before - after).abs() <= 1e-5, "dh {dh}: {before} vs {after}");
        }
    }
}

#[test]
fn uniform_heads_give_the_uniform_loss() {
    let cfg = WmConfig::default();
    let model = WorldModel::<f64>::new(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (seq, targets) = random_window(&cfg, 5, &mut rng);
    let loss = model.loss(&seq, &targets).unwrap();
    let l = cfg.tokens_per_frame() as f64;
    let expected = l * (cfg.codebook_size as f64).ln() + 2.0 * 2f64.ln();
    assert!((loss.total() - expected).abs() < 1e-9, "{} vs {expected}", loss.total());
    let out = model.forward(&seq).unwrap();
    assert_eq!(out.next_state.dim(), (5, cfg.tokens_per_frame(), cfg.codebook_size));
    assert_eq!(out.reward.dim(), (5, 2));
    assert_eq!(out.done.dim(), (5, 2));
}

#[test]
fn clipping_bounds_the_global_norm() {
    let cfg = tiny_config();
    let model = WorldModel::<f64>::new(cfg.clone(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (seq, targets) = random_window(&cfg, 3, &mut rng);
    let mut grads = model.params().zeros_like();
    model.loss_and_grad(&seq, &targets, None, &mut grads, 100.0).unwrap();
    let before = clip_grad_norm(&mut grads, 0.5);
    assert!(before > 0.5);
    assert!(grads.global_norm() <= 0.5 + 1e-9);
}

#[test]
fn repeated_transition_is_memorized() {
    let cfg = WmConfig {
        seq_len: 1,
        ..WmConfig::default()
    };
    let mut model = WorldModel::<f64>::new(cfg.clone(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let frames = random_frames(&cfg, 2, &mut rng);
    let ep = Episode {
        index: 0,
        frames: frames.clone(),
        actions: vec![2],
        rewards: vec![0],
        dones: vec![false],
        has_creature: vec![false],
    };
    let window = TrainWindow::from_episode(&ep, 0, 1, &cfg).unwrap();
    let mut opt = Adam::new(model.params(), &cfg);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
    let mut last = None;
    for step in 0..500 {
        let m = itc_core::world_model::train_step(
            &mut model,
            std::slice::from_ref(&window),
            &mut opt,
            Some(&mut drop_rng),
            step,
        )
        .unwrap();
        last = Some(m);
    }
    let out = model.forward(&window.seq).unwrap();
    let predicted: Vec<u32> = out
        .next_state
        .index_axis(ndarray::Axis(0), 0)
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for k in 0..r.len() {
                if r[k] > r[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect();
    assert_eq!(predicted, frames[1].tokens(), "final metrics {last:?}");
}

#[test]
fn params_round_trip_through_tensor_info() {
    let cfg = WmConfig::default();
    let p = Params::<f64>::init(&cfg, 1);
    let info = p.tensor_info();
    let total: usize = info.iter().map(|t| t.dims.iter().product::<usize>()).sum();
    assert_eq!(total, p.num_params());
    assert_eq!(info[0].name, "tok_emb");
    assert_eq!(info[0].dims, vec![cfg.vocab(), cfg.embed_dim]);
}
