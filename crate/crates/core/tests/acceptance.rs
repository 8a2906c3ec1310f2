//! Acceptance criteria. Each criterion prints one `PASS` or `FAIL` line; the
//! process exits non-zero if any criterion fails.
//!
//! Pass a substring as the first argument to run only matching criteria, e.g.
//! `cargo test -p itc-core --test acceptance -- sinkhorn`.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use itc_core::assignment::{binarize_traced, Source};
use itc_core::dataset::{symbol_table, Dataset};
use itc_core::harness::{
    count_symbol, eval_variants, prepare_data, rollout, train_model, DecoderVariant, EvalReport, ModelPredictor,
    RunConfig, ShiftOracle,
};
use itc_core::ot::{sinkhorn_naive, TransportPair};
use itc_core::world_model::{rope3d_rotate, Coord3, Session, Targets, TokenSequence, WmConfig, WorldModel};
use itc_core::{
    decode_next_frame, sinkhorn, BinarizeConfig, DecodeConfig, FrameTokens, GridShape, PredictionGrid, RegionMask,
    Symbol,
};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Mean greedy/optimal binarization value ratio over 1,000 seeded 4x4..6x6
// plans, measured when the suite was written.
const BINARIZE_RATIO_BASELINE: f64 = 0.9605;
const TABLE4_BUDGET: Duration = Duration::from_secs(15 * 60);
const TRAIN_SEEDS: [u64; 3] = [1, 2, 3];

fn random_cost(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, m), || rng.random::<f64>())
}

struct Marginals {
    col: f64,
    row: f64,
    path_gap: f64,
}

fn sinkhorn_marginals(seed: u64, scale: f64) -> Result<Marginals, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Marginals {
        col: 0.0,
        row: 0.0,
        path_gap: 0.0,
    };
    for _ in 0..1000 {
        let cost = random_cost(&mut rng, 20, 20) * scale;
        let plan = sinkhorn(&cost, 1e-2, 200).map_err(|e| e.to_string())?;
        for s in plan.sum_axis(Axis(0)) {
            m.col = m.col.max((s - 1.0 / 20.0).abs());
        }
        for s in plan.sum_axis(Axis(1)) {
            m.row = m.row.max((s - 1.0 / 20.0).abs());
        }
        let naive = sinkhorn_naive(&cost, 1e-2, 200).map_err(|e| e.to_string())?;
        for (a, b) in plan.iter().zip(naive.iter()) {
            if a.is_finite() && b.is_finite() {
                m.path_gap = m.path_gap.max((a - b).abs());
            }
        }
    }
    Ok(m)
}

fn sinkhorn_correctness() -> Check {
    let t0 = Instant::now();
    let m = sinkhorn_marginals(1000, 1.0)?;
    let elapsed = t0.elapsed();
    // Same instances shrunk to a 0.1 cost range, for diagnosis only.
    let narrow = sinkhorn_marginals(1000, 0.1)?;
    ensure(
        m.col <= 1e-12 && m.row <= 1e-6 && m.path_gap <= 1e-9 && elapsed < Duration::from_secs(5),
        format!(
            "costs U[0,1): column dev {:.2e}, row dev {:.2e}, log vs naive {:.2e}, {elapsed:.2?}; costs U[0,0.1): row dev {:.2e}",
            m.col, m.row, m.path_gap, narrow.row
        ),
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn epsilon_limit() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let perms = permutations(4);
    let mut hits = 0;
    for _ in 0..500 {
        let cost = random_cost(&mut rng, 4, 4);
        let best = perms
            .iter()
            .min_by(|a, b| {
                let ca: f64 = a.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
                let cb: f64 = b.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
                ca.total_cmp(&cb)
            })
            .expect("non-empty");
        let plan = sinkhorn(&cost, 1e-4, 20_000).map_err(|e| e.to_string())?;
        let argmax: Vec<usize> = plan
            .rows()
            .into_iter()
            .map(|r| (0..4).fold(0, |b, j| if r[j] > r[b] { j } else { b }))
            .collect();
        hits += (&argmax == best) as usize;
    }
    let rate = hits as f64 / 500.0;
    ensure(rate >= 0.99, format!("{hits}/500 instances match the optimal permutation"))
}

fn random_plan(rng: &mut ChaCha8Rng, l: usize) -> TransportPair {
    TransportPair {
        prev: Array2::from_shape_simple_fn((l, l), || rng.random::<f64>()),
        gen: Array1::from_shape_simple_fn(l, || rng.random::<f64>()),
    }
}

/// Best total value over assignments where each destination takes one
/// previous token (each used at most once) or its own wildcard.
fn optimal_value(plan: &TransportPair) -> f64 {
    let l = plan.len();
    let mut best = vec![f64::NEG_INFINITY; 1 << l];
    best[0] = 0.0;
    for j in 0..l {
        let mut next = vec![f64::NEG_INFINITY; 1 << l];
        for (mask, &v) in best.iter().enumerate() {
            if v == f64::NEG_INFINITY {
                continue;
            }
            next[mask] = next[mask].max(v + plan.gen[j]);
            for i in 0..l {
                if mask & (1 << i) == 0 {
                    let m = mask | (1 << i);
                    next[m] = next[m].max(v + plan.prev[[i, j]]);
                }
            }
        }
        best = next;
    }
    best.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

fn binarization_validity() -> Check {
    let cfg = BinarizeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let mut worst_rounds = 0.0f64;
    for n in 0..10_000 {
        let l = rng.random_range(2..=8);
        let plan = random_plan(&mut rng, l);
        let (a, trace) = binarize_traced(&plan, &cfg).map_err(|e| format!("instance {n}: {e}"))?;
        let mut used = vec![false; l];
        if a.len() != l {
            return Err(format!("instance {n}: {} destinations for L = {l}", a.len()));
        }
        for s in a.sources() {
            if let Source::Prev(i) = *s {
                if i >= l || used[i] {
                    return Err(format!("instance {n}: previous token {i} reused"));
                }
                used[i] = true;
            }
        }
        let rounds = trace.rounds.len();
        if rounds > l * 2 * l {
            return Err(format!("instance {n}: {rounds} rounds for L = {l}"));
        }
        worst_rounds = worst_rounds.max(rounds as f64 / (2 * l * l) as f64);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4_006);
    let mut ratio_sum = 0.0;
    let mut ratio_min = f64::INFINITY;
    for _ in 0..1000 {
        let l = rng.random_range(4..=6);
        let plan = random_plan(&mut rng, l);
        let a = binarize_traced(&plan, &cfg).map_err(|e| e.to_string())?.0;
        let r = a.value(&plan) / optimal_value(&plan);
        ratio_sum += r;
        ratio_min = ratio_min.min(r);
    }
    let mean = ratio_sum / 1000.0;
    ensure(
        mean >= BINARIZE_RATIO_BASELINE,
        format!(
            "10000 valid, max rounds {:.0}% of L*2L; greedy/optimal mean {mean:.6} (baseline {BINARIZE_RATIO_BASELINE}), min {ratio_min:.4}",
            100.0 * worst_rounds
        ),
    )
}

fn shift_preservation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1_001);
    let shape = GridShape::new(6, 6);
    let shifts: Vec<(i64, i64)> = (-2..=2i64)
        .flat_map(|dx| (-2..=2i64).map(move |dy| (dx, dy)))
        .filter(|&(dx, dy)| dx * dx + dy * dy <= 4)
        .collect();
    let cfg = DecodeConfig {
        ot_region: RegionMask::Full,
        ..DecodeConfig::default()
    };
    for trial in 0..1000 {
        let k = rng.random_range(2..=8u32);
        let prev: Vec<u32> = (0..shape.len()).map(|_| rng.random_range(0..k)).collect();
        let (dx, dy) = shifts[rng.random_range(0..shifts.len())];
        let mut next = vec![0; shape.len()];
        for (j, slot) in next.iter_mut().enumerate() {
            let (x, y) = ((j % 6) as i64 - dx, (j / 6) as i64 - dy);
            *slot = if (0..6).contains(&x) && (0..6).contains(&y) {
                prev[(y * 6 + x) as usize]
            } else {
                rng.random_range(0..k)
            };
        }
        let prev = FrameTokens::new(shape, prev).map_err(|e| e.to_string())?;
        let next = FrameTokens::new(shape, next).map_err(|e| e.to_string())?;
        let pred = PredictionGrid::one_hot(&next, k as usize).map_err(|e| e.to_string())?;
        let out = decode_next_frame(&pred, &prev, &cfg).map_err(|e| e.to_string())?;
        if out != next {
            return Err(format!("trial {trial}: shift ({dx},{dy}) with K = {k} was not reproduced"));
        }
        let mut want = vec![0; k as usize];
        let mut got = vec![0; k as usize];
        for j in 0..shape.len() {
            let row = pred.row(j);
            want[(0..k as usize).fold(0, |b, t| if row[t] > row[b] { t } else { b })] += 1;
            got[out.tokens()[j] as usize] += 1;
        }
        if want != got {
            return Err(format!("trial {trial}: token counts {got:?}, expected {want:?}"));
        }
    }
    Ok(format!("1000 frames, {} shifts within the cap, exact and count-preserving", shifts.len()))
}

fn random_frames(cfg: &WmConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<FrameTokens> {
    let shape = GridShape::new(cfg.grid_height, cfg.grid_width);
    (0..n)
        .map(|_| {
            let toks = (0..shape.len()).map(|_| rng.random_range(0..cfg.codebook_size as u32)).collect();
            FrameTokens::new(shape, toks).expect("valid frame")
        })
        .collect()
}

fn rope_mask_kv() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rope_gap = 0f64;
    for cfg in [WmConfig::default(), WmConfig::full_size(6, 6, 5, 5)] {
        let dh = cfg.head_dim();
        for _ in 0..500 {
            let q: Vec<f64> = (0..dh).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..dh).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut c = || Coord3::new(rng.random_range(-20..20), rng.random_range(-20..20), rng.random_range(0..60));
            let (c1, c2) = (c(), c());
            let delta = rng.random_range(-50..50);
            let rot = |v: &[f64], c| rope3d_rotate(v, c, cfg.rope_base, cfg.rope_split).expect("valid head dim");
            let dot = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>();
            let before = dot(rot(&q, c1), rot(&k, c2));
            let after = dot(rot(&q, c1.shifted(delta)), rot(&k, c2.shifted(delta)));
            rope_gap = rope_gap.max((before - after).abs());
        }
    }

    let cfg = WmConfig {
        zero_init_heads: false,
        seq_len: 5,
        ..WmConfig::default()
    };
    let model = WorldModel::<f64>::new(cfg.clone(), 3).map_err(|e| e.to_string())?;
    let frames = random_frames(&cfg, 5, &mut rng);
    let actions = [0, 4, 2, 1, 3];
    let seq = TokenSequence::new(&frames, &actions, &cfg, 0).map_err(|e| e.to_string())?;
    let full = model.forward(&seq).map_err(|e| e.to_string())?;
    let mut causal = true;
    for t_future in 1..5 {
        let mut changed = frames.clone();
        for f in changed.iter_mut().skip(t_future) {
            let toks = f.tokens().iter().map(|&x| (x + 1) % cfg.codebook_size as u32).collect();
            *f = FrameTokens::new(f.shape(), toks).map_err(|e| e.to_string())?;
        }
        let acts: Vec<u32> = actions.iter().enumerate().map(|(t, &a)| if t >= t_future { (a + 1) % 5 } else { a }).collect();
        let out = model
            .forward(&TokenSequence::new(&changed, &acts, &cfg, 0).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        for t in 0..t_future {
            let same = |a: ndarray::ArrayView2<f64>, b: ndarray::ArrayView2<f64>| {
                a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            };
            causal &= same(full.next_state.index_axis(Axis(0), t), out.next_state.index_axis(Axis(0), t));
            causal &= full.reward.row(t) == out.reward.row(t) && full.done.row(t) == out.done.row(t);
        }
    }

    let mut session = Session::new(&model);
    let mut kv_gap = 0f64;
    for (t, (f, &a)) in frames.iter().zip(&actions).enumerate() {
        let step = session.push(f, a).map_err(|e| e.to_string())?;
        for (x, y) in step.next_state.iter().zip(full.next_state.index_axis(Axis(0), t)) {
            kv_gap = kv_gap.max((x - y).abs());
        }
        for k in 0..2 {
            kv_gap = kv_gap.max((step.reward[k] - full.reward[[t, k]]).abs());
            kv_gap = kv_gap.max((step.done[k] - full.done[[t, k]]).abs());
        }
    }
    ensure(
        rope_gap <= 1e-5 && causal && kv_gap <= 1e-6,
        format!("rope offset gap {rope_gap:.2e}, past blocks bitwise unchanged: {causal}, kv gap {kv_gap:.2e}"),
    )
}

fn gradient_check() -> Check {
    let cfg = WmConfig {
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
    };
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let mut model = WorldModel::<f64>::new(cfg.clone(), 5).map_err(|e| e.to_string())?;
    let frames = random_frames(&cfg, 4, &mut rng);
    let actions: Vec<u32> = (0..3).map(|_| rng.random_range(0..2)).collect();
    let seq = TokenSequence::new(&frames[..3], &actions, &cfg, 0).map_err(|e| e.to_string())?;
    let targets = Targets {
        next_tokens: frames[1..].iter().flat_map(|f| f.tokens().to_vec()).collect(),
        rewards: vec![true, false, true],
        dones: vec![false, false, true],
    };
    let mut grads = model.params().zeros_like();
    model
        .loss_and_grad(&seq, &targets, None, &mut grads, 1.0)
        .map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = grads.slices().concat();
    let h = 1e-4;
    let (mut idx, mut worst) = (0, 0f64);
    for s in 0..model.params().slices().len() {
        for i in 0..model.params().slices()[s].len() {
            let orig = model.params().slices()[s][i];
            model.params_mut().slices_mut()[s][i] = orig + h;
            let up = model.loss(&seq, &targets).map_err(|e| e.to_string())?.total();
            model.params_mut().slices_mut()[s][i] = orig - h;
            let down = model.loss(&seq, &targets).map_err(|e| e.to_string())?.total();
            model.params_mut().slices_mut()[s][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic[idx] - numeric).abs() / analytic[idx].abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
            idx += 1;
        }
    }
    ensure(worst < 1e-3, format!("{idx} parameters, max relative error {worst:.2e}"))
}

struct Trained {
    seed: u64,
    predictor: ModelPredictor<f32>,
}

struct Shared {
    cfg: RunConfig,
    dataset: Dataset,
    symbols: Vec<Symbol>,
    models: Vec<Trained>,
    elapsed: Duration,
}

fn shared() -> Result<&'static Shared, String> {
    static CELL: OnceLock<Result<Shared, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let t0 = Instant::now();
        let cfg = RunConfig::default();
        let (dataset, codebook) = prepare_data(&cfg).map_err(|e| e.to_string())?;
        let mut models = Vec::new();
        for seed in TRAIN_SEEDS {
            let run = RunConfig { seed, ..cfg.clone() };
            let model = train_model(&run, &dataset, |_| Ok(())).map_err(|e| e.to_string())?;
            models.push(Trained {
                seed,
                predictor: ModelPredictor::new(model, codebook.hash()),
            });
        }
        Ok(Shared {
            symbols: symbol_table(&codebook),
            cfg,
            dataset,
            models,
            elapsed: t0.elapsed(),
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn table4_direction() -> Check {
    let s = shared()?;
    let t0 = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    let mut pooled = Vec::new();
    for m in &s.models {
        let evals = eval_variants(&m.predictor, &DecoderVariant::ALL, &s.dataset, &s.cfg.decode, s.cfg.eval_seed)
            .map_err(|e| e.to_string())?;
        let (b, i): (&EvalReport, &EvalReport) = (&evals[0].report, &evals[1].report);
        for e in &evals {
            ok &= e.report == EvalReport::recount(e.report.variant, &e.outcomes);
        }
        let seed_ok = b.transitions >= 2000
            && i.overall_accuracy >= b.overall_accuracy
            && i.accuracy_with_creatures >= b.accuracy_with_creatures
            && i.token_error_rate <= b.token_error_rate;
        ok &= seed_ok;
        pooled.push((b.clone(), i.clone()));
        lines.push(format!(
            "seed {} n={} overall {:.2}%/{:.2}% creatures {:.2}%/{:.2}% token err {:.3}%/{:.3}%",
            m.seed,
            b.transitions,
            100.0 * b.overall_accuracy,
            100.0 * i.overall_accuracy,
            100.0 * b.accuracy_with_creatures,
            100.0 * i.accuracy_with_creatures,
            100.0 * b.token_error_rate,
            100.0 * i.token_error_rate,
        ));
    }
    let (bs, is): (Vec<EvalReport>, Vec<EvalReport>) = pooled.into_iter().unzip();
    let b = EvalReport::average(&bs).map_err(|e| e.to_string())?;
    let i = EvalReport::average(&is).map_err(|e| e.to_string())?;
    lines.push(format!(
        "seed mean overall {:.2}%/{:.2}% creatures {:.2}%/{:.2}% token err {:.3}%/{:.3}%",
        100.0 * b.overall_accuracy,
        100.0 * i.overall_accuracy,
        100.0 * b.accuracy_with_creatures,
        100.0 * i.accuracy_with_creatures,
        100.0 * b.token_error_rate,
        100.0 * i.token_error_rate,
    ));
    let total = s.elapsed + t0.elapsed();
    ok &= total <= TABLE4_BUDGET;
    ensure(
        ok,
        format!("baseline/itc; {}; {:.1?} end to end", lines.join("; "), total),
    )
}

fn rollout_persistence() -> Check {
    let s = shared()?;
    let holdout = s.dataset.holdout_episodes();
    let mut shift_artifacts = 0;
    let mut shift_frames = 0;
    for (dx, dy) in [(1, 0), (0, 1), (-1, -1), (2, 0)] {
        let oracle = ShiftOracle {
            shape: s.dataset.shape(),
            vocab: s.dataset.header.codebook_size,
            dx,
            dy,
        };
        for ep in holdout.iter().filter(|e| e.has_creature[0]) {
            let r = rollout(&oracle, DecoderVariant::Itc, ep, ep.len(), &s.symbols, &s.cfg.decode, 0)
                .map_err(|e| e.to_string())?;
            shift_artifacts += r.duplication + r.disappearance;
            shift_frames += ep.len();
        }
    }

    let horizon = s.cfg.rollout_horizon;
    let starts: Vec<_> = holdout
        .iter()
        .filter(|e| e.len() >= horizon && count_symbol(&e.frames[0], &s.symbols, Symbol::Creature) > 0)
        .collect();
    if starts.is_empty() {
        return Err("no held-out episode with creatures is long enough".into());
    }
    let decode = DecodeConfig {
        sampling: s.cfg.rollout_sampling,
        ..s.cfg.decode.clone()
    };
    let mut ok = shift_artifacts == 0;
    let mut lines = Vec::new();
    for m in &s.models {
        let mut counts = [0usize; 2];
        for r in 0..s.cfg.rollouts {
            let ep = starts[r % starts.len()];
            let seed = s.cfg.eval_seed + r as u64;
            for (c, v) in counts.iter_mut().zip(DecoderVariant::ALL) {
                let out = rollout(&m.predictor, v, ep, horizon, &s.symbols, &decode, seed).map_err(|e| e.to_string())?;
                *c += out.duplication + out.disappearance;
            }
        }
        ok &= counts[1] <= counts[0];
        lines.push(format!("seed {} baseline {} itc {}", m.seed, counts[0], counts[1]));
    }
    ensure(
        ok,
        format!(
            "shift oracle {shift_artifacts} artifacts over {shift_frames} frames; {} paired {horizon}-step rollouts, dup+dis: {}",
            s.cfg.rollouts,
            lines.join(", ")
        ),
    )
}

type Criterion = (&'static str, fn() -> Check);

fn main() -> ExitCode {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [Criterion; 8] = [
        ("sinkhorn correctness", sinkhorn_correctness),
        ("epsilon-limit oracle", epsilon_limit),
        ("binarization validity", binarization_validity),
        ("copy-identity and shift preservation", shift_preservation),
        ("rope, mask and kv cache", rope_mask_kv),
        ("gradient check", gradient_check),
        ("accuracy direction over 3 seeds", table4_direction),
        ("rollout persistence", rollout_persistence),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let t0 = Instant::now();
        let (tag, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {name} [{:.1?}]: {detail}", t0.elapsed());
    }
    if filter.is_none() {
        println!("NOTE benchmark returns (Craftax, MinAtar, Atari 100K) are not reproduced; no criterion depends on them");
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
