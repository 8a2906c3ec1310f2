//! Affinity construction and entropic optimal transport.
//!
//! The decoder scores every (previous token, destination) pair and every
//! (wildcard, destination) pair, stacks both score blocks next to `L`
//! zero-affinity sink columns, and solves the resulting square transport
//! problem with uniform marginals. The left `L` columns of the plan are the
//! partial plans handed to binarization.
//!
//! Sinkhorn runs in the log domain: with `epsilon = 1e-5` the Gibbs kernel
//! `exp(-C / epsilon)` over- and underflows for any affinity of order one.
//! [`sinkhorn_naive`] keeps the plain scaling form for cross-checks at large
//! epsilon.

use ndarray::{s, Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{ItcError, Result};
use crate::frame::{FrameTokens, GridCoord, PredictionGrid};

/// Parameters of the affinity model and the Sinkhorn solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OtConfig {
    /// Cost per unit of squared displacement.
    pub c_d: f64,
    /// Penalty for admitting a newly generated token.
    pub c_w: f64,
    /// Largest squared displacement a copied token may travel.
    pub cap: f64,
    /// Entropic regularization.
    pub epsilon: f64,
    /// Sinkhorn iteration count.
    pub iterations: usize,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            c_d: 0.6,
            c_w: 0.3,
            cap: 4.0,
            epsilon: 1e-5,
            iterations: 10,
        }
    }
}

impl OtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(ItcError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(ItcError::Config("iterations must be at least 1".into()));
        }
        if !(self.cap >= 0.0) || !(self.c_d >= 0.0) {
            return Err(ItcError::Config("cap and c_d must be nonnegative".into()));
        }
        if !self.c_w.is_finite() {
            return Err(ItcError::Config("c_w must be finite".into()));
        }
        Ok(())
    }
}

/// Squared Euclidean displacement, or `+inf` beyond `cap`.
pub fn distance_cost(a: GridCoord, b: GridCoord, cap: f64) -> f64 {
    let dx = (a.x - b.x) as f64;
    let dy = (a.y - b.y) as f64;
    let d = dx * dx + dy * dy;
    if d <= cap {
        d
    } else {
        f64::INFINITY
    }
}

/// Copy affinities (`L x L`, source row, destination column) and the
/// diagonal of the wildcard affinities. Forbidden copies hold `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityPair {
    pub prev: Array2<f64>,
    pub gen: Array1<f64>,
}

impl AffinityPair {
    pub fn new(prev: Array2<f64>, gen: Array1<f64>) -> Result<Self> {
        let l = gen.len();
        if l == 0 || prev.dim() != (l, l) {
            return Err(ItcError::Geometry(format!(
                "affinity blocks {:?} and {} do not agree",
                prev.dim(),
                l
            )));
        }
        if prev.iter().any(|v| v.is_nan() || *v == f64::INFINITY) || gen.iter().any(|v| !v.is_finite()) {
            return Err(ItcError::Geometry("affinities must be finite or -inf".into()));
        }
        Ok(Self { prev, gen })
    }

    pub fn len(&self) -> usize {
        self.gen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gen.is_empty()
    }
}

pub fn build_affinity(pred: &PredictionGrid, prev: &FrameTokens, cfg: &OtConfig) -> Result<AffinityPair> {
    if pred.shape() != prev.shape() {
        return Err(ItcError::Geometry(format!(
            "prediction grid {:?} vs previous frame {:?}",
            pred.shape(),
            prev.shape()
        )));
    }
    prev.check_vocab(pred.vocab())?;
    let shape = pred.shape();
    let l = shape.len();

    let mut a_prev = Array2::from_elem((l, l), f64::NEG_INFINITY);
    for (i, &tok) in prev.tokens().iter().enumerate() {
        let ci = shape.coord(i);
        for j in 0..l {
            let d = distance_cost(ci, shape.coord(j), cfg.cap);
            if d.is_finite() {
                a_prev[[i, j]] = pred.probs()[[j, tok as usize]] - cfg.c_d * d;
            }
        }
    }
    let gen = pred
        .probs()
        .rows()
        .into_iter()
        .map(|p| p.fold(0.0_f64, |m, &v| m.max(v)) - cfg.c_w)
        .collect();
    AffinityPair::new(a_prev, gen)
}

fn check_feasible(cost: &Array2<f64>) -> Result<()> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(ItcError::Geometry("empty cost matrix".into()));
    }
    if cost.iter().any(|c| c.is_nan() || *c == f64::NEG_INFINITY) {
        return Err(ItcError::Geometry("costs must be finite or +inf".into()));
    }
    for (i, row) in cost.rows().into_iter().enumerate() {
        if !row.iter().any(|c| c.is_finite()) {
            return Err(ItcError::Infeasible { axis: "row", index: i });
        }
    }
    for (j, col) in cost.columns().into_iter().enumerate() {
        if !col.iter().any(|c| c.is_finite()) {
            return Err(ItcError::Infeasible { axis: "column", index: j });
        }
    }
    Ok(())
}

/// `log sum_k exp(a_k + b_k)`, skipping `-inf` terms.
fn log_sum_exp(a: ArrayView1<'_, f64>, b: &Array1<f64>) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (x, y) in a.iter().zip(b) {
        max = max.max(x + y);
    }
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x + y)
        .filter(|v| *v > f64::NEG_INFINITY)
        .map(|v| (v - max).exp())
        .sum();
    max + sum.ln()
}

/// Scaled dual potentials of a log-domain Sinkhorn run.
#[derive(Debug, Clone)]
pub struct SinkhornPotentials {
    /// Log kernel `-C / epsilon`.
    pub log_kernel: Array2<f64>,
    /// Row potentials divided by epsilon.
    pub row: Array1<f64>,
    /// Column potentials divided by epsilon.
    pub col: Array1<f64>,
}

impl SinkhornPotentials {
    pub fn plan(&self) -> Array2<f64> {
        let mut plan = self.log_kernel.clone();
        for ((i, j), v) in plan.indexed_iter_mut() {
            *v = if *v == f64::NEG_INFINITY {
                0.0
            } else {
                (*v + self.row[i] + self.col[j]).exp()
            };
        }
        plan
    }
}

/// Log-domain Sinkhorn returning the dual potentials.
pub fn sinkhorn_potentials(cost: &Array2<f64>, epsilon: f64, iterations: usize) -> Result<SinkhornPotentials> {
    check_feasible(cost)?;
    if !(epsilon > 0.0) || iterations == 0 {
        return Err(ItcError::Config("sinkhorn needs epsilon > 0 and iterations >= 1".into()));
    }
    let (n, m) = cost.dim();
    let log_r = -(n as f64).ln();
    let log_c = -(m as f64).ln();
    let log_kernel = cost.mapv(|c| if c.is_finite() { -c / epsilon } else { f64::NEG_INFINITY });
    let mut row = Array1::zeros(n);
    let mut col = Array1::zeros(m);
    let kt = log_kernel.t();
    for _ in 0..iterations {
        for i in 0..n {
            row[i] = log_r - log_sum_exp(log_kernel.row(i), &col);
        }
        for j in 0..m {
            col[j] = log_c - log_sum_exp(kt.row(j), &row);
        }
    }
    Ok(SinkhornPotentials { log_kernel, row, col })
}

/// Entropic transport plan with uniform marginals `1/n` (rows) and `1/m`
/// (columns). The last update is the column scaling, so column sums are exact.
pub fn sinkhorn(cost: &Array2<f64>, epsilon: f64, iterations: usize) -> Result<Array2<f64>> {
    Ok(sinkhorn_potentials(cost, epsilon, iterations)?.plan())
}

/// Plain matrix-scaling Sinkhorn. Only usable when `exp(-C / epsilon)`
/// stays within floating-point range.
pub fn sinkhorn_naive(cost: &Array2<f64>, epsilon: f64, iterations: usize) -> Result<Array2<f64>> {
    check_feasible(cost)?;
    let (n, m) = cost.dim();
    let kernel = cost.mapv(|c| if c.is_finite() { (-c / epsilon).exp() } else { 0.0 });
    let r = 1.0 / n as f64;
    let c = 1.0 / m as f64;
    let mut u = Array1::<f64>::ones(n);
    let mut v = Array1::<f64>::ones(m);
    for _ in 0..iterations {
        u = kernel.dot(&v).mapv(|x| r / x);
        v = kernel.t().dot(&u).mapv(|x| c / x);
    }
    let mut plan = kernel;
    for ((i, j), p) in plan.indexed_iter_mut() {
        *p *= u[i] * v[j];
    }
    Ok(plan)
}

/// Continuous partial plans: `prev` is `L x L`, `gen` the diagonal of the
/// wildcard block.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPair {
    pub prev: Array2<f64>,
    pub gen: Array1<f64>,
}

impl TransportPair {
    pub fn len(&self) -> usize {
        self.gen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gen.is_empty()
    }
}

/// The `2L x 2L` cost matrix `-[[A_prev, 0], [A_gen, 0]]`; off-diagonal
/// wildcard entries are `+inf`.
pub fn stacked_cost(aff: &AffinityPair) -> Array2<f64> {
    let l = aff.len();
    let mut cost = Array2::zeros((2 * l, 2 * l));
    cost.slice_mut(s![..l, ..l]).assign(&aff.prev.mapv(|a| -a));
    cost.slice_mut(s![l.., ..l]).fill(f64::INFINITY);
    for j in 0..l {
        cost[[l + j, j]] = -aff.gen[j];
    }
    cost
}

/// Full `2L x 2L` plan of the stacked decode problem.
pub fn decode_plan(aff: &AffinityPair, cfg: &OtConfig) -> Result<Array2<f64>> {
    sinkhorn(&stacked_cost(aff), cfg.epsilon, cfg.iterations)
}

pub fn solve_decode_ot(aff: &AffinityPair, cfg: &OtConfig) -> Result<TransportPair> {
    cfg.validate()?;
    let l = aff.len();
    let plan = decode_plan(aff, cfg)?;
    let prev = plan.slice(s![..l, ..l]).to_owned();
    let gen = (0..l).map(|j| plan[[l + j, j]]).collect();
    Ok(TransportPair { prev, gen })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::GridShape;
    use ndarray::array;

    fn c(x: i64, y: i64) -> GridCoord {
        GridCoord::new(x, y)
    }

    #[test]
    fn distance_cost_examples() {
        assert_eq!(distance_cost(c(0, 0), c(0, 0), 4.0), 0.0);
        assert_eq!(distance_cost(c(0, 0), c(1, 1), 4.0), 2.0);
        assert_eq!(distance_cost(c(0, 0), c(3, 0), 4.0), f64::INFINITY);
        assert_eq!(distance_cost(c(0, 0), c(2, 0), 4.0), 4.0);
    }

    #[test]
    fn affinity_examples() {
        let shape = GridShape::new(1, 2);
        let cfg = OtConfig::default();
        let prev = FrameTokens::new(shape, vec![1, 0]).unwrap();
        let pred = PredictionGrid::new(shape, array![[0.0, 1.0], [0.0, 1.0]]).unwrap();
        let aff = build_affinity(&pred, &prev, &cfg).unwrap();
        assert!((aff.prev[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((aff.prev[[0, 1]] - 0.4).abs() < 1e-12);
        assert!((aff.prev[[1, 1]] - 0.0).abs() < 1e-15);

        let shape = GridShape::new(1, 1);
        let prev = FrameTokens::new(shape, vec![0]).unwrap();
        let pred = PredictionGrid::new(shape, array![[0.25, 0.25, 0.25, 0.25]]).unwrap();
        let aff = build_affinity(&pred, &prev, &cfg).unwrap();
        assert!((aff.gen[0] - (-0.05)).abs() < 1e-12);
    }

    #[test]
    fn affinity_beyond_cap_is_neg_inf() {
        let shape = GridShape::new(1, 4);
        let prev = FrameTokens::new(shape, vec![0; 4]).unwrap();
        let pred = PredictionGrid::one_hot(&prev, 2).unwrap();
        let aff = build_affinity(&pred, &prev, &OtConfig::default()).unwrap();
        assert_eq!(aff.prev[[0, 3]], f64::NEG_INFINITY);
        assert!(aff.prev[[0, 2]].is_finite());
    }

    #[test]
    fn affinity_rejects_geometry_mismatch() {
        let prev = FrameTokens::new(GridShape::new(2, 1), vec![0, 0]).unwrap();
        let pred = PredictionGrid::one_hot(&FrameTokens::new(GridShape::new(1, 2), vec![0, 0]).unwrap(), 2).unwrap();
        assert!(matches!(
            build_affinity(&pred, &prev, &OtConfig::default()),
            Err(ItcError::Geometry(_))
        ));
    }

    #[test]
    fn sinkhorn_trivial_cases() {
        let p = sinkhorn(&array![[0.0]], 1e-5, 10).unwrap();
        assert!((p[[0, 0]] - 1.0).abs() < 1e-15);
        let p = sinkhorn(&Array2::zeros((2, 2)), 1e-5, 10).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn sinkhorn_small_epsilon_recovers_assignment() {
        let p = sinkhorn(&array![[0.0, 10.0], [10.0, 0.0]], 1e-3, 100).unwrap();
        assert!((p[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((p[[1, 1]] - 0.5).abs() < 1e-12);
        assert!(p[[0, 1]] < 1e-9 && p[[1, 0]] < 1e-9);
    }

    #[test]
    fn sinkhorn_reports_infeasible_rows_and_columns() {
        let inf = f64::INFINITY;
        assert!(matches!(
            sinkhorn(&array![[inf, inf], [0.0, 1.0]], 0.1, 5),
            Err(ItcError::Infeasible { axis: "row", index: 0 })
        ));
        assert!(matches!(
            sinkhorn(&array![[0.0, inf], [0.0, inf]], 0.1, 5),
            Err(ItcError::Infeasible { axis: "column", index: 1 })
        ));
    }

    #[test]
    fn infinite_cost_gives_exact_zero() {
        let inf = f64::INFINITY;
        let p = sinkhorn(&array![[0.0, inf], [0.3, 0.1]], 1e-5, 10).unwrap();
        assert_eq!(p[[0, 1]], 0.0);
    }

    #[test]
    fn decode_ot_single_token() {
        let aff = AffinityPair::new(array![[1.0]], array![0.5]).unwrap();
        let tp = solve_decode_ot(&aff, &OtConfig::default()).unwrap();
        assert!(tp.prev[[0, 0]] > tp.gen[0]);
    }

    #[test]
    fn decode_ot_all_copies_forbidden() {
        let ninf = f64::NEG_INFINITY;
        let aff = AffinityPair::new(array![[ninf, ninf], [ninf, ninf]], array![0.2, -0.1]).unwrap();
        let tp = solve_decode_ot(&aff, &OtConfig::default()).unwrap();
        assert!(tp.prev.iter().all(|&v| v == 0.0));
        for j in 0..2 {
            assert!((tp.gen[j] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn gen_block_off_diagonal_is_zero() {
        let aff = AffinityPair::new(array![[0.3, 0.1], [0.2, 0.9]], array![0.4, 0.4]).unwrap();
        let plan = decode_plan(&aff, &OtConfig::default()).unwrap();
        assert_eq!(plan[[2, 1]], 0.0);
        assert_eq!(plan[[3, 0]], 0.0);
    }
}
