//! Three-axis rotary position embedding.
//!
//! Dimension pairs are ordered by decreasing rotation frequency. The
//! high-frequency pairs rotate with the spatial coordinates, alternating
//! `x, y, x, y, ...`; the remaining low-frequency pairs rotate with the
//! temporal index.

use ndarray::NdFloat;
use serde::{Deserialize, Serialize};

use crate::error::{ItcError, Result};

/// Spatial `(x, y)` and temporal coordinate of one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coord3 {
    pub x: i64,
    pub y: i64,
    pub t: i64,
}

impl Coord3 {
    pub fn new(x: i64, y: i64, t: i64) -> Self {
        Self { x, y, t }
    }

    pub fn shifted(self, d: i64) -> Self {
        Self::new(self.x + d, self.y + d, self.t + d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RopeAxis {
    X,
    Y,
    T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rope3d {
    axes: Vec<RopeAxis>,
    freqs: Vec<f64>,
}

impl Rope3d {
    /// Standard geometric schedule `base^(-2i/head_dim)`, pairs split
    /// `spatial:temporal` between the two kinds of axis.
    pub fn new(head_dim: usize, base: f64, split: (usize, usize)) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(ItcError::Config(format!("rotary head dimension must be even, got {head_dim}")));
        }
        let (s, t) = split;
        if s + t == 0 {
            return Err(ItcError::Config("rope split must not be 0:0".into()));
        }
        let pairs = head_dim / 2;
        let spatial = spatial_pairs(pairs, split);
        if !spatial.is_multiple_of(2) {
            return Err(ItcError::Config(format!(
                "{pairs} rotary pairs split {s}:{t} leaves {spatial} spatial pairs, which cannot split evenly between x and y"
            )));
        }
        let axes = (0..pairs)
            .map(|p| match p {
                p if p >= spatial => RopeAxis::T,
                p if p % 2 == 0 => RopeAxis::X,
                _ => RopeAxis::Y,
            })
            .collect();
        let freqs = (0..pairs).map(|p| base.powf(-2.0 * p as f64 / head_dim as f64)).collect();
        Ok(Self { axes, freqs })
    }

    /// Explicit per-pair axes and angular frequencies.
    pub fn from_parts(axes: Vec<RopeAxis>, freqs: Vec<f64>) -> Result<Self> {
        if axes.len() != freqs.len() || axes.is_empty() {
            return Err(ItcError::Config("one frequency per rotary pair".into()));
        }
        Ok(Self { axes, freqs })
    }

    pub fn head_dim(&self) -> usize {
        2 * self.axes.len()
    }

    pub fn axes(&self) -> &[RopeAxis] {
        &self.axes
    }

    /// `(cos, sin)` of every pair angle at `c`.
    pub fn angles(&self, c: Coord3) -> Vec<(f64, f64)> {
        self.axes
            .iter()
            .zip(&self.freqs)
            .map(|(axis, f)| {
                let pos = match axis {
                    RopeAxis::X => c.x,
                    RopeAxis::Y => c.y,
                    RopeAxis::T => c.t,
                } as f64;
                let a = f * pos;
                (a.cos(), a.sin())
            })
            .collect()
    }

    pub fn rotate(&self, v: &[f64], c: Coord3) -> Result<Vec<f64>> {
        if v.len() != self.head_dim() {
            return Err(ItcError::Shape {
                expected: format!("{} dims", self.head_dim()),
                got: format!("{}", v.len()),
            });
        }
        let mut out = v.to_vec();
        apply(&mut out, &self.angles(c), false);
        Ok(out)
    }
}

pub(crate) fn spatial_pairs(pairs: usize, (s, t): (usize, usize)) -> usize {
    (pairs * s + (s + t) / 2) / (s + t)
}

/// Rotates consecutive pairs of `v` in place; `inverse` rotates backwards.
pub(crate) fn apply<F: NdFloat>(v: &mut [F], angles: &[(F, F)], inverse: bool) {
    for (pair, &(cos, sin)) in v.chunks_exact_mut(2).zip(angles) {
        let sin = if inverse { -sin } else { sin };
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos - b * sin;
        pair[1] = a * sin + b * cos;
    }
}

/// Rotates `vec` by the position `coords` under the default schedule.
pub fn rope3d_rotate(vec: &[f64], coords: Coord3, base: f64, split: (usize, usize)) -> Result<Vec<f64>> {
    Rope3d::new(vec.len(), base, split)?.rotate(vec, coords)
}
