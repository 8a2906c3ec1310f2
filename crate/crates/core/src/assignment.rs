//! Greedy binarization of the partial transport plans.
//!
//! Rows of the working matrix are sources (`L` previous tokens followed by
//! `L` wildcards), columns are destinations. Each round every source proposes
//! to its best remaining destination, every destination keeps its best
//! proposal, and rejected proposals are pushed down by `v`. A destination that
//! has accepted a proposal stays covered in every later round, and its held
//! value never decreases.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{ItcError, Result};
use crate::ot::TransportPair;

/// Plan values closer than this fraction of the largest plan entry count as
/// ties, so rounding noise cannot override the lowest-index rule.
pub const TIE_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinarizeConfig {
    /// Suppression value subtracted from rejected proposals.
    pub v: f64,
    /// Safety bound on the number of rounds.
    pub max_rounds: usize,
}

impl Default for BinarizeConfig {
    fn default() -> Self {
        Self {
            v: 1e6,
            max_rounds: 100_000,
        }
    }
}

/// Which source explains a destination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    /// Copy of the previous-frame token at this index.
    Prev(usize),
    /// Newly generated token.
    Gen,
}

/// One source per destination; each previous token used at most once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentPair {
    sources: Vec<Source>,
}

impl AssignmentPair {
    pub fn new(sources: Vec<Source>) -> Result<Self> {
        let pair = Self { sources };
        if !pair.is_valid() {
            return Err(ItcError::Geometry("assignment reuses a previous token".into()));
        }
        Ok(pair)
    }

    /// Reads the binary matrix form. Fails unless every destination column
    /// has exactly one set entry.
    pub fn from_binary(prev: &Array2<u8>, gen: &Array1<u8>) -> Result<Self> {
        let l = gen.len();
        if prev.dim() != (l, l) {
            return Err(ItcError::Geometry("assignment blocks disagree".into()));
        }
        let mut sources = Vec::with_capacity(l);
        for j in 0..l {
            let copies: Vec<usize> = (0..l).filter(|&i| prev[[i, j]] == 1).collect();
            match (copies.as_slice(), gen[j]) {
                ([i], 0) => sources.push(Source::Prev(*i)),
                ([], 1) => sources.push(Source::Gen),
                _ => return Err(ItcError::Geometry(format!("destination {j} is not explained exactly once"))),
            }
        }
        Self::new(sources)
    }

    pub fn sources(&self) -> &[Source] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        let l = self.sources.len();
        let mut used = vec![false; l];
        for s in &self.sources {
            if let Source::Prev(i) = *s {
                if i >= l || used[i] {
                    return false;
                }
                used[i] = true;
            }
        }
        true
    }

    /// Binary `L x L` copy matrix (source row, destination column).
    pub fn prev_matrix(&self) -> Array2<u8> {
        let l = self.sources.len();
        let mut m = Array2::zeros((l, l));
        for (j, s) in self.sources.iter().enumerate() {
            if let Source::Prev(i) = *s {
                m[[i, j]] = 1;
            }
        }
        m
    }

    /// Diagonal of the binary wildcard matrix.
    pub fn gen_vector(&self) -> Array1<u8> {
        self.sources.iter().map(|s| u8::from(*s == Source::Gen)).collect()
    }

    /// The assignment as a 0/1 transport plan.
    pub fn to_plan(&self) -> TransportPair {
        TransportPair {
            prev: self.prev_matrix().mapv(f64::from),
            gen: self.gen_vector().mapv(f64::from),
        }
    }

    /// Sum of the plan entries selected by this assignment.
    pub fn value(&self, plan: &TransportPair) -> f64 {
        self.sources
            .iter()
            .enumerate()
            .map(|(j, s)| match *s {
                Source::Prev(i) => plan.prev[[i, j]],
                Source::Gen => plan.gen[j],
            })
            .sum()
    }
}

/// Winners per destination after each round (row index into the `2L`
/// working matrix).
#[derive(Debug, Clone, Default)]
pub struct BinarizeTrace {
    pub rounds: Vec<Vec<Option<usize>>>,
}

pub fn binarize(plan: &TransportPair, cfg: &BinarizeConfig) -> Result<AssignmentPair> {
    binarize_traced(plan, cfg).map(|(a, _)| a)
}

pub fn binarize_traced(plan: &TransportPair, cfg: &BinarizeConfig) -> Result<(AssignmentPair, BinarizeTrace)> {
    let l = plan.len();
    if l == 0 || plan.prev.dim() != (l, l) {
        return Err(ItcError::Geometry(format!("plan blocks {:?} and {}", plan.prev.dim(), l)));
    }
    if !(cfg.v > 0.0) || cfg.max_rounds < l {
        return Err(ItcError::Config("binarization needs v > 0 and max_rounds >= L".into()));
    }
    let n = 2 * l;

    // Wildcard rows may only ever reach their own destination.
    let mut work = Array2::from_elem((n, l), f64::NEG_INFINITY);
    work.slice_mut(ndarray::s![..l, ..]).assign(&plan.prev);
    for j in 0..l {
        work[[l + j, j]] = plan.gen[j];
    }

    let scale = plan.prev.iter().chain(plan.gen.iter()).fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = TIE_RTOL * scale;
    let mut trace = BinarizeTrace::default();
    let mut previous: Option<Vec<Option<usize>>> = None;
    for _ in 0..cfg.max_rounds {
        let target: Vec<usize> = (0..n).map(|i| row_argmax(&work, i, tol)).collect();

        let mut winners = vec![None; l];
        for (j, winner) in winners.iter_mut().enumerate() {
            // Column argmax of C = P * picked - v * (1 - picked), lowest index on ties.
            let mut best: Option<(usize, f64)> = None;
            for (i, &t) in target.iter().enumerate() {
                let c = if t == j { work[[i, j]] } else { -cfg.v };
                if best.is_none_or(|(_, b)| c > b + tol) {
                    best = Some((i, c));
                }
            }
            if let Some((i, _)) = best {
                if target[i] == j {
                    *winner = Some(i);
                }
            }
        }

        let mut accepted = vec![false; n];
        for &i in winners.iter().flatten() {
            accepted[i] = true;
        }
        for (i, &t) in target.iter().enumerate() {
            if !accepted[i] {
                work[[i, t]] -= cfg.v;
            }
        }

        log::debug!("binarize round {}: winners {:?}", trace.rounds.len() + 1, winners);
        trace.rounds.push(winners.clone());
        let covered = winners.iter().all(Option::is_some);
        if covered && previous.as_ref() == Some(&winners) {
            let sources = winners
                .into_iter()
                .map(|w| match w {
                    Some(i) if i < l => Source::Prev(i),
                    _ => Source::Gen,
                })
                .collect();
            return Ok((AssignmentPair::new(sources)?, trace));
        }
        previous = Some(winners);
    }
    Err(ItcError::BinarizeExhausted { rounds: cfg.max_rounds })
}

fn row_argmax(work: &Array2<f64>, i: usize, tol: f64) -> usize {
    let row = work.row(i);
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] + tol {
            best = j;
        }
    }
    best
}
