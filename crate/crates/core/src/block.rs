//! Block shapes and the block grid laid over a row-major matrix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim, param, Error, Result};

/// Shape of one block, `rows x cols`. `1x1` is the elementwise layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockShape {
    pub rows: usize,
    pub cols: usize,
}

impl BlockShape {
    pub const ELEMENTWISE: BlockShape = BlockShape { rows: 1, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(param(format!("block shape {rows}x{cols} must be positive")));
        }
        Ok(Self { rows, cols })
    }

    /// An `n x 1` column block.
    pub fn column(n: usize) -> Result<Self> {
        Self::new(n, 1)
    }

    pub fn is_elementwise(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn area(&self) -> usize {
        self.rows * self.cols
    }
}

impl Default for BlockShape {
    fn default() -> Self {
        Self::ELEMENTWISE
    }
}

impl fmt::Display for BlockShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for BlockShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (r, c) = s
            .trim()
            .split_once(['x', 'X', '*'])
            .ok_or_else(|| param(format!("block shape `{s}` is not of the form NxM")))?;
        let r = r.trim().parse().map_err(|_| param(format!("bad block rows in `{s}`")))?;
        let c = c.trim().parse().map_err(|_| param(format!("bad block cols in `{s}`")))?;
        Self::new(r, c)
    }
}

/// The grid of blocks covering a `rows x cols` matrix. Edge blocks are
/// partial when the dimensions are not multiples of the block shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGrid {
    pub rows: usize,
    pub cols: usize,
    pub shape: BlockShape,
    pub block_rows: usize,
    pub block_cols: usize,
}

impl BlockGrid {
    /// Builds the grid, rejecting non-divisible dimensions unless `pad` is set.
    pub fn new(rows: usize, cols: usize, shape: BlockShape, pad: bool) -> Result<Self> {
        if !pad && (rows % shape.rows != 0 || cols % shape.cols != 0) {
            return Err(dim(format!(
                "{rows}x{cols} matrix is not divisible into {shape} blocks (enable padding)"
            )));
        }
        Ok(Self {
            rows,
            cols,
            shape,
            block_rows: rows.div_ceil(shape.rows),
            block_cols: cols.div_ceil(shape.cols),
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.block_rows * self.block_cols
    }

    /// Real (unpadded) row range of block-row `br`.
    #[inline]
    pub fn row_range(&self, br: usize) -> std::ops::Range<usize> {
        let start = br * self.shape.rows;
        start..(start + self.shape.rows).min(self.rows)
    }

    /// Real (unpadded) column range of block-column `bc`.
    #[inline]
    pub fn col_range(&self, bc: usize) -> std::ops::Range<usize> {
        let start = bc * self.shape.cols;
        start..(start + self.shape.cols).min(self.cols)
    }

    /// Frobenius norm of every block of a row-major matrix, in grid order.
    pub fn block_norms(&self, values: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_blocks());
        for br in 0..self.block_rows {
            for bc in 0..self.block_cols {
                let mut sq = 0.0;
                for r in self.row_range(br) {
                    for c in self.col_range(bc) {
                        let v = values[r * self.cols + c];
                        sq += v * v;
                    }
                }
                out.push(sq.sqrt());
            }
        }
        out
    }
}
