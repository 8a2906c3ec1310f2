//! Dense-layer building blocks with hand-written backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, NdFloat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn cast<F: NdFloat>(x: f64) -> F {
    F::from(x).expect("representable constant")
}

pub(crate) fn linear<F: NdFloat>(x: ArrayView2<'_, F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Accumulates `dw`, `db`; returns the input gradient.
pub(crate) fn linear_backward<F: NdFloat>(
    x: ArrayView2<'_, F>,
    w: &Array2<F>,
    dy: &Array2<F>,
    dw: &mut Array2<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    general_mat_mul(F::one(), &x.t(), dy, F::one(), dw);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

pub(crate) fn layer_norm<F: NdFloat>(x: &Array2<F>, g: &Array1<F>, b: &Array1<F>) -> (Array2<F>, LnCache<F>) {
    let d = cast::<F>(x.ncols() as f64);
    let eps = cast::<F>(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        *s = F::one() / (var + eps).sqrt();
        row *= *s;
    }
    let mut y = &xhat * g;
    y += b;
    (y, LnCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward<F: NdFloat>(
    dy: &Array2<F>,
    g: &Array1<F>,
    cache: &LnCache<F>,
    dg: &mut Array1<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = cast::<F>(dy.ncols() as f64);
    let mut dx = dy * g;
    for ((mut row, xh), &s) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
        let mean = row.sum() / d;
        let proj = row.dot(&xh) / d;
        row.zip_mut_with(&xh, |v, &h| *v = s * (*v - mean - h * proj));
    }
    dx
}

pub(crate) fn gelu<F: NdFloat>(x: F) -> F {
    let (c, a, half) = (cast::<F>(GELU_C), cast::<F>(GELU_A), cast::<F>(0.5));
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: NdFloat>(x: F) -> F {
    let (c, a, half) = (cast::<F>(GELU_C), cast::<F>(GELU_A), cast::<F>(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + cast::<F>(3.0) * a * x * x)
}

/// Inverted-dropout mask (`0` or `1 / (1 - p)`), or `None` when inactive.
pub(crate) fn dropout_mask<F: NdFloat>(
    shape: (usize, usize),
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Option<Array2<F>> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = cast::<F>(1.0 / (1.0 - rate));
            Some(Array2::from_shape_simple_fn(shape, || {
                if rng.random::<f64>() < rate {
                    F::zero()
                } else {
                    keep
                }
            }))
        }
        _ => None,
    }
}

pub(crate) fn apply_mask<F: NdFloat>(x: &mut Array2<F>, mask: &Option<Array2<F>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows<F: NdFloat>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
}
