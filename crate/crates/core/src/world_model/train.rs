use ndarray::NdFloat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Episode;
use crate::error::{ItcError, Result};
use crate::world_model::config::WmConfig;
use crate::world_model::layers::cast;
use crate::world_model::model::{LossParts, Targets, WorldModel};
use crate::world_model::params::Params;
use crate::world_model::sequence::TokenSequence;

/// Input blocks `start..start + len` of an episode with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainWindow {
    pub seq: TokenSequence,
    pub targets: Targets,
}

impl TrainWindow {
    pub fn from_episode(ep: &Episode, start: usize, len: usize, cfg: &WmConfig) -> Result<Self> {
        if len == 0 || start + len > ep.len() {
            return Err(ItcError::Shape {
                expected: format!("window inside {} transitions", ep.len()),
                got: format!("{start}..{}", start + len),
            });
        }
        let end = start + len;
        let seq = TokenSequence::new(&ep.frames[start..end], &ep.actions[start..end], cfg, 0)?;
        let next_tokens = ep.frames[start + 1..=end].iter().flat_map(|f| f.tokens().iter().copied()).collect();
        let targets = Targets {
            next_tokens,
            rewards: ep.rewards[start..end].iter().map(|&r| r > 0).collect(),
            dones: ep.dones[start..end].to_vec(),
        };
        Ok(Self { seq, targets })
    }
}

/// Draws windows of up to `seq_len` transitions, choosing episodes in
/// proportion to their length and a uniform start inside each.
#[derive(Debug, Clone)]
pub struct WindowSampler<'a> {
    episodes: &'a [Episode],
    cumulative: Vec<usize>,
    seq_len: usize,
}

impl<'a> WindowSampler<'a> {
    pub fn new(episodes: &'a [Episode], seq_len: usize) -> Result<Self> {
        let mut total = 0;
        let cumulative = episodes
            .iter()
            .map(|e| {
                total += e.len();
                total
            })
            .collect();
        if total == 0 || seq_len == 0 {
            return Err(ItcError::Config("no training transitions to sample".into()));
        }
        Ok(Self {
            episodes,
            cumulative,
            seq_len,
        })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, cfg: &WmConfig) -> Result<TrainWindow> {
        let total = *self.cumulative.last().expect("non-empty");
        let pick = rng.random_range(0..total);
        let e = self.cumulative.partition_point(|&c| c <= pick);
        let ep = &self.episodes[e];
        let len = self.seq_len.min(ep.len());
        let start = rng.random_range(0..=ep.len() - len);
        TrainWindow::from_episode(ep, start, len, cfg)
    }
}

#[derive(Debug, Clone)]
pub struct Adam<F = f64> {
    m: Params<F>,
    v: Params<F>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<F: NdFloat> Adam<F> {
    pub fn new(params: &Params<F>, cfg: &WmConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut Params<F>, grads: &Params<F>) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1: F = cast(1.0 - b1.powi(self.t as i32));
        let c2: F = cast(1.0 - b2.powi(self.t as i32));
        let (lr, eps): (F, F) = (cast(self.lr), cast(self.eps));
        let (b1, b2): (F, F) = (cast(b1), cast(b2));
        let one = F::one();
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<F: NdFloat>(grads: &mut Params<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub loss_state: f64,
    pub loss_reward: f64,
    pub loss_done: f64,
    pub token_error_rate: f64,
    pub grad_norm: f64,
}

fn fingerprint(batch: &[TrainWindow]) -> String {
    let mut h = Sha256::new();
    for w in batch {
        for &id in &w.seq.ids {
            h.update((id as u32).to_le_bytes());
        }
        for &t in &w.targets.next_tokens {
            h.update(t.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

/// One optimizer update on the mean loss of `batch`.
pub fn train_step<F: NdFloat>(
    model: &mut WorldModel<F>,
    batch: &[TrainWindow],
    opt: &mut Adam<F>,
    mut dropout: Option<&mut ChaCha8Rng>,
    step: usize,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(ItcError::Config("empty training batch".into()));
    }
    let mut grads = model.params().zeros_like();
    let w = 1.0 / batch.len() as f64;
    let mut parts = LossParts::default();
    for win in batch {
        let p = model.loss_and_grad(&win.seq, &win.targets, dropout.as_deref_mut(), &mut grads, w)?;
        parts.accumulate(&p, w);
    }
    let loss = parts.total();
    if !loss.is_finite() || !grads.is_finite() {
        return Err(ItcError::NonFiniteLoss {
            loss,
            fingerprint: fingerprint(batch),
        });
    }
    let grad_norm = clip_grad_norm(&mut grads, model.config().grad_clip_norm);
    opt.step(model.params_mut(), &grads);
    Ok(StepMetrics {
        step,
        loss,
        loss_state: parts.state,
        loss_reward: parts.reward,
        loss_done: parts.done,
        token_error_rate: parts.token_errors as f64 / parts.tokens.max(1) as f64,
        grad_norm,
    })
}
