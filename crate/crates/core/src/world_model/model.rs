//! Block-causal transformer over interleaved state/action tokens.
//!
//! Each block is pre-norm:
//!
//! ```text
//! x = x + Dropout(W_o · Attn(RoPE(Q), RoPE(K), V))      on LN1(x)
//! x = x + W_proj · Dropout(GELU(W_fc · LN2(x)))
//! ```
//!
//! After the final layer norm, state rows feed the observation head and action
//! rows feed the reward and done heads.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, Axis, NdFloat};
use rand_chacha::ChaCha8Rng;

use crate::error::{ItcError, Result};
use crate::world_model::config::WmConfig;
use crate::world_model::layers::{
    apply_mask, cast, dropout_mask, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, softmax_rows,
    LnCache,
};
use crate::world_model::params::{BlockParams, HeadParams, Params};
use crate::world_model::rope::{apply, Coord3, Rope3d};
use crate::world_model::sequence::TokenSequence;

/// Logits for every timestep of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct WmOutput {
    /// `(T, L, K)`: position `i` of block `t` predicts token `i` of frame `t + 1`.
    pub next_state: Array3<f64>,
    /// `(T, 2)`, read from the action token.
    pub reward: Array2<f64>,
    /// `(T, 2)`, read from the action token.
    pub done: Array2<f64>,
}

/// Supervision for one window: frame `t + 1`, reward and done of step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// `T * L` token ids, block-major.
    pub next_tokens: Vec<u32>,
    pub rewards: Vec<bool>,
    pub dones: Vec<bool>,
}

/// Cross-entropy components, each averaged over timesteps.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub state: f64,
    pub reward: f64,
    pub done: f64,
    pub token_errors: usize,
    pub tokens: usize,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.state + self.reward + self.done
    }

    pub fn accumulate(&mut self, other: &LossParts, weight: f64) {
        self.state += weight * other.state;
        self.reward += weight * other.reward;
        self.done += weight * other.done;
        self.token_errors += other.token_errors;
        self.tokens += other.tokens;
    }
}

#[derive(Debug, Clone)]
pub struct WorldModel<F = f64> {
    cfg: WmConfig,
    rope: Rope3d,
    params: Params<F>,
}

/// Query rows `start..end` attend to keys `0..keys`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct QueryGroup {
    pub start: usize,
    pub end: usize,
    pub keys: usize,
}

/// Rotated keys and raw values of one layer, one row per token seen so far.
#[derive(Debug, Clone)]
pub(crate) struct LayerKv<F> {
    pub k: Array2<F>,
    pub v: Array2<F>,
}

impl<F: NdFloat> LayerKv<F> {
    pub(crate) fn empty(d: usize) -> Self {
        Self {
            k: Array2::zeros((0, d)),
            v: Array2::zeros((0, d)),
        }
    }
}

pub(crate) struct BlockCache<F> {
    ln1: LnCache<F>,
    h1: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    groups: Vec<QueryGroup>,
    probs: Vec<Vec<Array2<F>>>,
    attn: Array2<F>,
    drop_attn: Option<Array2<F>>,
    ln2: LnCache<F>,
    h2: Array2<F>,
    u: Array2<F>,
    g: Array2<F>,
    drop_mlp: Option<Array2<F>>,
}

pub(crate) struct HeadCache<F> {
    input: Array2<F>,
    hidden: Array2<F>,
}

struct ForwardCache<F> {
    blocks: Vec<BlockCache<F>>,
    lnf: LnCache<F>,
    obs: HeadCache<F>,
    reward: HeadCache<F>,
    done: HeadCache<F>,
}

impl<F: NdFloat> WorldModel<F> {
    pub fn new(cfg: WmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = Params::init(&cfg, seed);
        Self::from_params(cfg, params)
    }

    pub fn from_params(cfg: WmConfig, params: Params<F>) -> Result<Self> {
        cfg.validate()?;
        let expected = Params::<F>::init(&WmConfig { init_std: 1.0, ..cfg.clone() }, 0).tensor_info();
        let got = params.tensor_info();
        if expected != got {
            return Err(ItcError::Shape {
                expected: format!("{} tensors for {:?}", expected.len(), cfg),
                got: format!("{} tensors", got.len()),
            });
        }
        let rope = cfg.rope()?;
        Ok(Self { cfg, rope, params })
    }

    pub fn config(&self) -> &WmConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<F> {
        &mut self.params
    }

    pub fn into_params(self) -> Params<F> {
        self.params
    }

    fn check_len(&self, seq: &TokenSequence) -> Result<()> {
        if seq.is_empty() || seq.len() > self.cfg.max_tokens() || seq.block_len != self.cfg.block_len() {
            return Err(ItcError::Shape {
                expected: format!("1..={} tokens in blocks of {}", self.cfg.max_tokens(), self.cfg.block_len()),
                got: format!("{} tokens in blocks of {}", seq.len(), seq.block_len),
            });
        }
        Ok(())
    }

    /// Inference without dropout.
    pub fn forward(&self, seq: &TokenSequence) -> Result<WmOutput> {
        self.check_len(seq)?;
        let (out, _) = self.run(seq, None, false);
        Ok(out)
    }

    /// Loss without gradients or dropout.
    pub fn loss(&self, seq: &TokenSequence, targets: &Targets) -> Result<LossParts> {
        let out = self.forward(seq)?;
        let (parts, _) = self.loss_terms(seq, &out, targets, 0.0)?;
        Ok(parts)
    }

    /// Adds `scale * d(loss)/d(params)` into `grads`.
    pub fn loss_and_grad(
        &self,
        seq: &TokenSequence,
        targets: &Targets,
        dropout: Option<&mut ChaCha8Rng>,
        grads: &mut Params<F>,
        scale: f64,
    ) -> Result<LossParts> {
        self.check_len(seq)?;
        let (out, cache) = self.run(seq, dropout, true);
        let cache = cache.expect("cache requested");
        let (parts, d_logits) = self.loss_terms(seq, &out, targets, scale)?;
        self.backward(seq, &cache, d_logits, grads);
        Ok(parts)
    }

    pub(crate) fn token_angles(&self, coords: &[Coord3]) -> Vec<Vec<(F, F)>> {
        coords
            .iter()
            .map(|&c| self.rope.angles(c).into_iter().map(|(a, b)| (cast(a), cast(b))).collect())
            .collect()
    }

    pub(crate) fn embed(&self, ids: &[usize], first_pos: usize) -> Array2<F> {
        let p = &self.params;
        let mut x = p.tok_emb.select(Axis(0), ids);
        x += &p.pos_emb.slice(s![first_pos..first_pos + ids.len(), ..]);
        x
    }

    fn run(&self, seq: &TokenSequence, mut rng: Option<&mut ChaCha8Rng>, keep: bool) -> (WmOutput, Option<ForwardCache<F>>) {
        let b = seq.block_len;
        let angles = self.token_angles(&seq.coords);
        let groups: Vec<QueryGroup> = (0..seq.blocks)
            .map(|t| QueryGroup {
                start: t * b,
                end: (t + 1) * b,
                keys: (t + 1) * b,
            })
            .collect();
        let mut x = self.embed(&seq.ids, 0);
        let mut caches = Vec::new();
        for bp in &self.params.blocks {
            let mut kv = LayerKv::empty(self.cfg.embed_dim);
            let (y, c) = self.block_forward(bp, &x, &angles, &mut kv, &groups, rng.as_deref_mut(), keep);
            if let Some(c) = c {
                caches.push(c);
            }
            x = y;
        }
        let (out, heads) = self.heads_forward(&x, seq.blocks, keep);
        let cache = heads.map(|(lnf, obs, reward, done)| ForwardCache {
            blocks: caches,
            lnf,
            obs,
            reward,
            done,
        });
        (out, cache)
    }

    /// Runs one transformer block on new rows `x`, appending their keys and
    /// values to `kv`. Rows of each group attend to the group's key prefix.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn block_forward(
        &self,
        bp: &BlockParams<F>,
        x: &Array2<F>,
        angles: &[Vec<(F, F)>],
        kv: &mut LayerKv<F>,
        groups: &[QueryGroup],
        mut rng: Option<&mut ChaCha8Rng>,
        keep: bool,
    ) -> (Array2<F>, Option<BlockCache<F>>) {
        let d = self.cfg.embed_dim;
        let rate = self.cfg.dropout_rate;
        let (h1, ln1) = layer_norm(x, &bp.ln1_g, &bp.ln1_b);
        let qkv = linear(h1.view(), &bp.w_qkv, &bp.b_qkv);
        let mut q = qkv.slice(s![.., 0..d]).to_owned();
        let mut k = qkv.slice(s![.., d..2 * d]).to_owned();
        let v = qkv.slice(s![.., 2 * d..]).to_owned();
        self.rotate_rows(&mut q, angles, false);
        self.rotate_rows(&mut k, angles, false);
        kv.k.append(Axis(0), k.view()).expect("matching width");
        kv.v.append(Axis(0), v.view()).expect("matching width");
        let (attn, probs) = self.attention(&q, &kv.k, &kv.v, groups, keep);
        let mut proj = linear(attn.view(), &bp.w_o, &bp.b_o);
        let drop_attn = dropout_mask(proj.dim(), rate, rng.as_deref_mut());
        apply_mask(&mut proj, &drop_attn);
        let x_mid = x + &proj;
        let (h2, ln2) = layer_norm(&x_mid, &bp.ln2_g, &bp.ln2_b);
        let u = linear(h2.view(), &bp.w_fc, &bp.b_fc);
        let mut g = u.mapv(gelu);
        let drop_mlp = dropout_mask(g.dim(), rate, rng);
        apply_mask(&mut g, &drop_mlp);
        let y = &x_mid + &linear(g.view(), &bp.w_proj, &bp.b_proj);
        let cache = keep.then(|| BlockCache {
            ln1,
            h1,
            q,
            k: kv.k.clone(),
            v: kv.v.clone(),
            groups: groups.to_vec(),
            probs,
            attn,
            drop_attn,
            ln2,
            h2,
            u,
            g,
            drop_mlp,
        });
        (y, cache)
    }

    fn rotate_rows(&self, m: &mut Array2<F>, angles: &[Vec<(F, F)>], inverse: bool) {
        let dh = self.cfg.head_dim();
        for (mut row, a) in m.rows_mut().into_iter().zip(angles) {
            let row = row.as_slice_mut().expect("standard layout");
            for head in row.chunks_exact_mut(dh) {
                apply(head, a, inverse);
            }
        }
    }

    fn attention(
        &self,
        q: &Array2<F>,
        k: &Array2<F>,
        v: &Array2<F>,
        groups: &[QueryGroup],
        keep: bool,
    ) -> (Array2<F>, Vec<Vec<Array2<F>>>) {
        let dh = self.cfg.head_dim();
        let scale: F = cast(1.0 / (dh as f64).sqrt());
        let mut out = Array2::zeros(q.dim());
        let mut probs = Vec::new();
        for h in 0..self.cfg.num_heads {
            let hc = h * dh..(h + 1) * dh;
            let mut head_probs = Vec::new();
            for g in groups {
                let mut p = q.slice(s![g.start..g.end, hc.clone()]).dot(&k.slice(s![..g.keys, hc.clone()]).t());
                p *= scale;
                softmax_rows(&mut p);
                out.slice_mut(s![g.start..g.end, hc.clone()])
                    .assign(&p.dot(&v.slice(s![..g.keys, hc.clone()])));
                if keep {
                    head_probs.push(p);
                }
            }
            probs.push(head_probs);
        }
        (out, probs)
    }

    #[allow(clippy::type_complexity)]
    pub(crate) fn heads_forward(
        &self,
        x: &Array2<F>,
        blocks: usize,
        keep: bool,
    ) -> (WmOutput, Option<(LnCache<F>, HeadCache<F>, HeadCache<F>, HeadCache<F>)>) {
        let p = &self.params;
        let l = self.cfg.tokens_per_frame();
        let b = l + 1;
        let (z, lnf) = layer_norm(x, &p.lnf_g, &p.lnf_b);
        let state_rows: Vec<usize> = (0..blocks).flat_map(|t| (0..l).map(move |i| t * b + i)).collect();
        let action_rows: Vec<usize> = (0..blocks).map(|t| t * b + l).collect();
        let zs = z.select(Axis(0), &state_rows);
        let za = z.select(Axis(0), &action_rows);
        let (obs, obs_c) = head_forward(&p.obs, zs);
        let (reward, reward_c) = head_forward(&p.reward, za.clone());
        let (done, done_c) = head_forward(&p.done, za);
        let to64 = |a: Array2<F>| a.mapv(|v| v.to_f64().expect("float"));
        let (obs, reward, done) = (to64(obs), to64(reward), to64(done));
        let next_state = obs
            .into_shape_with_order((blocks, l, self.cfg.codebook_size))
            .expect("state rows are block-major");
        let out = WmOutput { next_state, reward, done };
        (out, keep.then_some((lnf, obs_c, reward_c, done_c)))
    }

    /// Cross-entropy and its logit gradients scaled by `scale / T`.
    fn loss_terms(
        &self,
        seq: &TokenSequence,
        out: &WmOutput,
        targets: &Targets,
        scale: f64,
    ) -> Result<(LossParts, [Array2<f64>; 3])> {
        let t = seq.blocks;
        let l = self.cfg.tokens_per_frame();
        let k = self.cfg.codebook_size;
        if targets.next_tokens.len() != t * l || targets.rewards.len() != t || targets.dones.len() != t {
            return Err(ItcError::Shape {
                expected: format!("{} next tokens and {t} rewards/dones", t * l),
                got: format!(
                    "{} next tokens, {} rewards, {} dones",
                    targets.next_tokens.len(),
                    targets.rewards.len(),
                    targets.dones.len()
                ),
            });
        }
        if let Some(&bad) = targets.next_tokens.iter().find(|&&x| x as usize >= k) {
            return Err(ItcError::Geometry(format!("target token {bad} outside codebook of {k}")));
        }
        let w = scale / t as f64;
        let states = out.next_state.view().into_shape_with_order((t * l, k)).expect("contiguous logits");
        let tok: Vec<usize> = targets.next_tokens.iter().map(|&x| x as usize).collect();
        let (ls, ds, errors) = cross_entropy(states, &tok, w);
        let rew: Vec<usize> = targets.rewards.iter().map(|&r| r as usize).collect();
        let (lr, dr, _) = cross_entropy(out.reward.view(), &rew, w);
        let done: Vec<usize> = targets.dones.iter().map(|&d| d as usize).collect();
        let (ld, dd, _) = cross_entropy(out.done.view(), &done, w);
        let parts = LossParts {
            state: ls / t as f64,
            reward: lr / t as f64,
            done: ld / t as f64,
            token_errors: errors,
            tokens: t * l,
        };
        Ok((parts, [ds, dr, dd]))
    }

    fn backward(&self, seq: &TokenSequence, cache: &ForwardCache<F>, d_logits: [Array2<f64>; 3], grads: &mut Params<F>) {
        let p = &self.params;
        let n = seq.len();
        let d = self.cfg.embed_dim;
        let l = self.cfg.tokens_per_frame();
        let b = l + 1;
        let [d_obs, d_rew, d_done] = d_logits.map(|a| a.mapv(cast::<F>));
        let d_zs = head_backward(&p.obs, &cache.obs, &d_obs, &mut grads.obs);
        let mut d_za = head_backward(&p.reward, &cache.reward, &d_rew, &mut grads.reward);
        d_za += &head_backward(&p.done, &cache.done, &d_done, &mut grads.done);
        let mut dz = Array2::zeros((n, d));
        let mut s_iter = d_zs.rows().into_iter();
        let mut a_iter = d_za.rows().into_iter();
        for (r, mut row) in dz.rows_mut().into_iter().enumerate() {
            let src = if r % b == l { a_iter.next() } else { s_iter.next() };
            row.assign(&src.expect("row counts match"));
        }
        let mut dx = layer_norm_backward(&dz, &p.lnf_g, &cache.lnf, &mut grads.lnf_g, &mut grads.lnf_b);
        let angles = self.token_angles(&seq.coords);
        for ((bp, bc), bg) in p.blocks.iter().zip(&cache.blocks).zip(grads.blocks.iter_mut()).rev() {
            dx = self.block_backward(bp, bc, bg, &angles, dx);
        }
        for (r, (&id, row)) in seq.ids.iter().zip(dx.rows()).enumerate() {
            let mut t = grads.tok_emb.row_mut(id);
            t += &row;
            let mut pe = grads.pos_emb.row_mut(r);
            pe += &row;
        }
    }

    fn block_backward(
        &self,
        bp: &BlockParams<F>,
        c: &BlockCache<F>,
        g: &mut BlockParams<F>,
        angles: &[Vec<(F, F)>],
        dy: Array2<F>,
    ) -> Array2<F> {
        let d = self.cfg.embed_dim;
        let dh = self.cfg.head_dim();
        let scale: F = cast(1.0 / (dh as f64).sqrt());
        let mut d_g = linear_backward(c.g.view(), &bp.w_proj, &dy, &mut g.w_proj, &mut g.b_proj);
        apply_mask(&mut d_g, &c.drop_mlp);
        d_g.zip_mut_with(&c.u, |dg, &u| *dg *= gelu_grad(u));
        let d_h2 = linear_backward(c.h2.view(), &bp.w_fc, &d_g, &mut g.w_fc, &mut g.b_fc);
        let mut d_mid = layer_norm_backward(&d_h2, &bp.ln2_g, &c.ln2, &mut g.ln2_g, &mut g.ln2_b);
        d_mid += &dy;
        let mut d_proj = d_mid.clone();
        apply_mask(&mut d_proj, &c.drop_attn);
        let d_attn = linear_backward(c.attn.view(), &bp.w_o, &d_proj, &mut g.w_o, &mut g.b_o);
        let n = c.q.nrows();
        let mut d_qkv = Array2::zeros((n, 3 * d));
        for (h, head_probs) in c.probs.iter().enumerate() {
            let hc = h * dh..(h + 1) * dh;
            for (g, p) in c.groups.iter().zip(head_probs) {
                let rows = g.start..g.end;
                let d_o = d_attn.slice(s![rows.clone(), hc.clone()]);
                let keys = s![..g.keys, hc.clone()];
                general_mat_mul(F::one(), &p.t(), &d_o, F::one(), &mut d_qkv.slice_mut(s![..g.keys, 2 * d + h * dh..2 * d + (h + 1) * dh]));
                let mut ds = d_o.dot(&c.v.slice(keys).t());
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot = row.dot(&prow);
                    row.zip_mut_with(&prow, |x, &pp| *x = pp * (*x - dot) * scale);
                }
                general_mat_mul(F::one(), &ds, &c.k.slice(keys), F::one(), &mut d_qkv.slice_mut(s![rows.clone(), hc.clone()]));
                general_mat_mul(
                    F::one(),
                    &ds.t(),
                    &c.q.slice(s![rows, hc.clone()]),
                    F::one(),
                    &mut d_qkv.slice_mut(s![..g.keys, d + h * dh..d + (h + 1) * dh]),
                );
            }
        }
        let mut dq = d_qkv.slice(s![.., 0..d]).to_owned();
        let mut dk = d_qkv.slice(s![.., d..2 * d]).to_owned();
        self.rotate_rows(&mut dq, angles, true);
        self.rotate_rows(&mut dk, angles, true);
        d_qkv.slice_mut(s![.., 0..d]).assign(&dq);
        d_qkv.slice_mut(s![.., d..2 * d]).assign(&dk);
        let d_h1 = linear_backward(c.h1.view(), &bp.w_qkv, &d_qkv, &mut g.w_qkv, &mut g.b_qkv);
        let mut dx = layer_norm_backward(&d_h1, &bp.ln1_g, &c.ln1, &mut g.ln1_g, &mut g.ln1_b);
        dx += &d_mid;
        dx
    }
}

fn head_forward<F: NdFloat>(hp: &HeadParams<F>, input: Array2<F>) -> (Array2<F>, HeadCache<F>) {
    let hidden = linear(input.view(), &hp.w1, &hp.b1).mapv_into(|v| v.max(F::zero()));
    let out = linear(hidden.view(), &hp.w2, &hp.b2);
    (out, HeadCache { input, hidden })
}

fn head_backward<F: NdFloat>(hp: &HeadParams<F>, c: &HeadCache<F>, d_out: &Array2<F>, g: &mut HeadParams<F>) -> Array2<F> {
    let mut d_hidden = linear_backward(c.hidden.view(), &hp.w2, d_out, &mut g.w2, &mut g.b2);
    d_hidden.zip_mut_with(&c.hidden, |dh, &h| {
        if h <= F::zero() {
            *dh = F::zero()
        }
    });
    linear_backward(c.input.view(), &hp.w1, &d_hidden, &mut g.w1, &mut g.b1)
}

/// Summed cross-entropy, `w * (softmax - onehot)`, and the argmax error count.
fn cross_entropy(logits: ArrayView2<'_, f64>, targets: &[usize], w: f64) -> (f64, Array2<f64>, usize) {
    let mut probs = logits.to_owned();
    softmax_rows(&mut probs);
    let mut loss = 0.0;
    let mut errors = 0;
    for ((mut row, lrow), &t) in probs.rows_mut().into_iter().zip(logits.rows()).zip(targets) {
        let max = lrow.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + lrow.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - lrow[t];
        if crate::frame::argmax_lowest(lrow) as usize != t {
            errors += 1;
        }
        row[t] -= 1.0;
        row *= w;
    }
    (loss, probs, errors)
}

/// Next-state distributions of timestep `t` as a row-stochastic `(L, K)` array.
pub fn state_probs(out: &WmOutput, t: usize) -> Array2<f64> {
    let mut p = out.next_state.index_axis(Axis(0), t).to_owned();
    softmax_rows(&mut p);
    p
}
