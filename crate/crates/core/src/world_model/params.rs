use ndarray::{Array1, Array2, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::world_model::config::WmConfig;
use crate::world_model::layers::cast;

type Visitor<'a, F> = dyn FnMut(String, &[usize], &[F]) + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub ln1_g: Array1<F>,
    pub ln1_b: Array1<F>,
    pub w_qkv: Array2<F>,
    pub b_qkv: Array1<F>,
    pub w_o: Array2<F>,
    pub b_o: Array1<F>,
    pub ln2_g: Array1<F>,
    pub ln2_b: Array1<F>,
    pub w_fc: Array2<F>,
    pub b_fc: Array1<F>,
    pub w_proj: Array2<F>,
    pub b_proj: Array1<F>,
}

/// Two-layer ReLU MLP head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<F> {
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<F = f64> {
    pub tok_emb: Array2<F>,
    pub pos_emb: Array2<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub lnf_g: Array1<F>,
    pub lnf_b: Array1<F>,
    pub obs: HeadParams<F>,
    pub reward: HeadParams<F>,
    pub done: HeadParams<F>,
}

/// Shape of one named tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub dims: Vec<usize>,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn matrix<F: NdFloat>(&mut self, r: usize, c: usize) -> Array2<F> {
        Array2::from_shape_simple_fn((r, c), || cast(self.normal.sample(&mut self.rng)))
    }
}

impl<F: NdFloat> HeadParams<F> {
    fn new(init: &mut Init, d: usize, hidden: usize, out: usize, zero_out: bool) -> Self {
        Self {
            w1: init.matrix(d, hidden),
            b1: Array1::zeros(hidden),
            w2: if zero_out {
                Array2::zeros((hidden, out))
            } else {
                init.matrix(hidden, out)
            },
            b2: Array1::zeros(out),
        }
    }
}

impl<F: NdFloat> Params<F> {
    pub fn init(cfg: &WmConfig, seed: u64) -> Self {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, cfg.init_std).expect("finite std"),
        };
        let d = cfg.embed_dim;
        let blocks = (0..cfg.num_blocks)
            .map(|_| BlockParams {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                w_qkv: init.matrix(d, 3 * d),
                b_qkv: Array1::zeros(3 * d),
                w_o: init.matrix(d, d),
                b_o: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w_fc: init.matrix(d, cfg.mlp_dim),
                b_fc: Array1::zeros(cfg.mlp_dim),
                w_proj: init.matrix(cfg.mlp_dim, d),
                b_proj: Array1::zeros(d),
            })
            .collect();
        Self {
            tok_emb: init.matrix(cfg.vocab(), d),
            pos_emb: init.matrix(cfg.max_tokens(), d),
            blocks,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            obs: HeadParams::new(&mut init, d, cfg.head_hidden, cfg.codebook_size, cfg.zero_init_heads),
            reward: HeadParams::new(&mut init, d, cfg.head_hidden, 2, cfg.zero_init_heads),
            done: HeadParams::new(&mut init, d, cfg.head_hidden, 2, cfg.zero_init_heads),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|s| s.fill(F::zero()));
        z
    }

    /// Names and shapes in canonical order.
    pub fn tensor_info(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        self.walk(&mut |name, dims, _| {
            out.push(TensorInfo {
                name,
                dims: dims.to_vec(),
            })
        });
        out
    }

    pub fn slices(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        macro_rules! push {
            ($a:expr) => {
                out.push($a.as_slice().expect("standard layout"))
            };
        }
        push!(self.tok_emb);
        push!(self.pos_emb);
        for b in &self.blocks {
            push!(b.ln1_g);
            push!(b.ln1_b);
            push!(b.w_qkv);
            push!(b.b_qkv);
            push!(b.w_o);
            push!(b.b_o);
            push!(b.ln2_g);
            push!(b.ln2_b);
            push!(b.w_fc);
            push!(b.b_fc);
            push!(b.w_proj);
            push!(b.b_proj);
        }
        push!(self.lnf_g);
        push!(self.lnf_b);
        for h in [&self.obs, &self.reward, &self.done] {
            push!(h.w1);
            push!(h.b1);
            push!(h.w2);
            push!(h.b2);
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        macro_rules! push {
            ($a:expr) => {
                out.push($a.as_slice_mut().expect("standard layout"))
            };
        }
        push!(self.tok_emb);
        push!(self.pos_emb);
        for b in &mut self.blocks {
            push!(b.ln1_g);
            push!(b.ln1_b);
            push!(b.w_qkv);
            push!(b.b_qkv);
            push!(b.w_o);
            push!(b.b_o);
            push!(b.ln2_g);
            push!(b.ln2_b);
            push!(b.w_fc);
            push!(b.b_fc);
            push!(b.w_proj);
            push!(b.b_proj);
        }
        push!(self.lnf_g);
        push!(self.lnf_b);
        for h in [&mut self.obs, &mut self.reward, &mut self.done] {
            push!(h.w1);
            push!(h.b1);
            push!(h.w2);
            push!(h.b2);
        }
        out
    }

    fn walk(&self, f: &mut Visitor<'_, F>) {
        let names = tensor_names(self.blocks.len());
        let shapes = self.shapes();
        for ((name, dims), data) in names.into_iter().zip(shapes).zip(self.slices()) {
            f(name, &dims, data);
        }
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let m = |a: &Array2<F>| a.shape().to_vec();
        let v = |a: &Array1<F>| a.shape().to_vec();
        let mut out = vec![m(&self.tok_emb), m(&self.pos_emb)];
        for b in &self.blocks {
            out.extend([
                v(&b.ln1_g),
                v(&b.ln1_b),
                m(&b.w_qkv),
                v(&b.b_qkv),
                m(&b.w_o),
                v(&b.b_o),
                v(&b.ln2_g),
                v(&b.ln2_b),
                m(&b.w_fc),
                v(&b.b_fc),
                m(&b.w_proj),
                v(&b.b_proj),
            ]);
        }
        out.extend([v(&self.lnf_g), v(&self.lnf_b)]);
        for h in [&self.obs, &self.reward, &self.done] {
            out.extend([m(&h.w1), v(&h.b1), m(&h.w2), v(&h.b2)]);
        }
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut [F])) {
        for s in self.slices_mut() {
            f(s);
        }
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Euclidean norm of all parameters, accumulated in `f64`.
    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| {
                let v = v.to_f64().expect("finite float");
                v * v
            })
            .sum();
        sq.sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        let k: F = cast(k);
        self.for_each_mut(|s| s.iter_mut().for_each(|v| *v *= k));
    }

    pub fn add_assign(&mut self, other: &Params<F>) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Converts every tensor to another float type.
    pub fn cast<G: NdFloat>(&self) -> Params<G> {
        let conv1 = |a: &Array1<F>| a.mapv(|v| cast::<G>(v.to_f64().expect("float")));
        let conv2 = |a: &Array2<F>| a.mapv(|v| cast::<G>(v.to_f64().expect("float")));
        let head = |h: &HeadParams<F>| HeadParams {
            w1: conv2(&h.w1),
            b1: conv1(&h.b1),
            w2: conv2(&h.w2),
            b2: conv1(&h.b2),
        };
        Params {
            tok_emb: conv2(&self.tok_emb),
            pos_emb: conv2(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_g: conv1(&b.ln1_g),
                    ln1_b: conv1(&b.ln1_b),
                    w_qkv: conv2(&b.w_qkv),
                    b_qkv: conv1(&b.b_qkv),
                    w_o: conv2(&b.w_o),
                    b_o: conv1(&b.b_o),
                    ln2_g: conv1(&b.ln2_g),
                    ln2_b: conv1(&b.ln2_b),
                    w_fc: conv2(&b.w_fc),
                    b_fc: conv1(&b.b_fc),
                    w_proj: conv2(&b.w_proj),
                    b_proj: conv1(&b.b_proj),
                })
                .collect(),
            lnf_g: conv1(&self.lnf_g),
            lnf_b: conv1(&self.lnf_b),
            obs: head(&self.obs),
            reward: head(&self.reward),
            done: head(&self.done),
        }
    }
}

fn tensor_names(blocks: usize) -> Vec<String> {
    let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
    for i in 0..blocks {
        for n in [
            "ln1.g", "ln1.b", "attn.w_qkv", "attn.b_qkv", "attn.w_o", "attn.b_o", "ln2.g", "ln2.b", "mlp.w_fc", "mlp.b_fc",
            "mlp.w_proj", "mlp.b_proj",
        ] {
            names.push(format!("blocks.{i}.{n}"));
        }
    }
    names.extend(["ln_f.g".to_string(), "ln_f.b".to_string()]);
    for h in ["obs_head", "reward_head", "done_head"] {
        for n in ["w1", "b1", "w2", "b2"] {
            names.push(format!("{h}.{n}"));
        }
    }
    names
}
