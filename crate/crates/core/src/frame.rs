//! Token frames and per-position predictive distributions.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{ItcError, Result};

/// Tolerance on the row sums of a categorical distribution.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// Height and width of a token grid, in token cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    /// Number of tokens per frame.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinate of the `index`-th token in row-major order.
    pub fn coord(&self, index: usize) -> GridCoord {
        GridCoord {
            x: (index % self.width) as i64,
            y: (index / self.width) as i64,
        }
    }

    pub fn index(&self, coord: GridCoord) -> Option<usize> {
        if coord.x < 0 || coord.y < 0 {
            return None;
        }
        let (x, y) = (coord.x as usize, coord.y as usize);
        (x < self.width && y < self.height).then_some(y * self.width + x)
    }
}

/// Column (`x`) and row (`y`) of a token cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCoord {
    pub x: i64,
    pub y: i64,
}

impl GridCoord {
    pub fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }
}

/// One frame as a row-major grid of token identifiers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameTokens {
    shape: GridShape,
    tokens: Vec<u32>,
}

impl FrameTokens {
    pub fn new(shape: GridShape, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != shape.len() || shape.is_empty() {
            return Err(ItcError::Geometry(format!(
                "{} tokens for a {}x{} grid",
                tokens.len(),
                shape.height,
                shape.width
            )));
        }
        Ok(Self { shape, tokens })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<u32> {
        self.tokens
    }

    /// Checks every identifier against a codebook of size `k`.
    pub fn check_vocab(&self, k: usize) -> Result<()> {
        match self.tokens.iter().find(|&&t| t as usize >= k) {
            Some(t) => Err(ItcError::Geometry(format!(
                "token {t} outside codebook of size {k}"
            ))),
            None => Ok(()),
        }
    }
}

/// Per-position categorical distributions over the codebook (`L x K`).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid {
    shape: GridShape,
    probs: Array2<f64>,
}

impl PredictionGrid {
    /// Validates that every row is a probability distribution.
    pub fn new(shape: GridShape, probs: Array2<f64>) -> Result<Self> {
        if probs.nrows() != shape.len() || probs.ncols() == 0 {
            return Err(ItcError::Geometry(format!(
                "prediction grid has {} rows, grid has {} cells",
                probs.nrows(),
                shape.len()
            )));
        }
        for row in probs.rows() {
            check_distribution(row)?;
        }
        Ok(Self { shape, probs })
    }

    /// Row-wise softmax of raw logits.
    pub fn from_logits(shape: GridShape, logits: &Array2<f64>) -> Result<Self> {
        let mut probs = logits.clone();
        for mut row in probs.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        Self::new(shape, probs)
    }

    /// Exact one-hot encoding of a frame.
    pub fn one_hot(frame: &FrameTokens, k: usize) -> Result<Self> {
        frame.check_vocab(k)?;
        let mut probs = Array2::zeros((frame.len(), k));
        for (j, &t) in frame.tokens().iter().enumerate() {
            probs[[j, t as usize]] = 1.0;
        }
        Ok(Self {
            shape: frame.shape(),
            probs,
        })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    /// Codebook size.
    pub fn vocab(&self) -> usize {
        self.probs.ncols()
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn row(&self, j: usize) -> ArrayView1<'_, f64> {
        self.probs.row(j)
    }

    /// Argmax token per position, ties to the lowest index.
    pub fn argmax_frame(&self) -> FrameTokens {
        let tokens = self.probs.rows().into_iter().map(argmax_lowest).collect();
        FrameTokens {
            shape: self.shape,
            tokens,
        }
    }
}

pub(crate) fn check_distribution(row: ArrayView1<'_, f64>) -> Result<()> {
    let sum: f64 = row.sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL || row.iter().any(|&p| !(p >= 0.0)) {
        return Err(ItcError::NotNormalized { sum });
    }
    Ok(())
}

pub(crate) fn argmax_lowest(row: ArrayView1<'_, f64>) -> u32 {
    let mut best = 0;
    for (k, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = k;
        }
    }
    best as u32
}
