//! Block Sparse Row storage.
//!
//! A [`BsrMatrix`] keeps, for each block-row, the ascending block-column
//! indices of its stored blocks (`indices`, delimited by `indptr`) and the
//! blocks themselves packed row-major in `data`. Dimensions are the logical
//! matrix dimensions; when they are not multiples of the block shape the last
//! block-row / block-column is padded with zeros.

mod kernels;
pub mod simd;

use std::fmt::Debug;

use num_traits::Float;

use crate::block::{BlockGrid, BlockShape};
use crate::error::{dim, param, Error, Result};

pub use kernels::{
    dense_mm, dense_mm_with, max_threads, spmm, spmm_with, spmv, spmv_with, KernelConfig, KernelPath,
};

/// Element type of the kernels.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    /// `y += a * x` on the platform's widest available vector unit.
    fn axpy_vectorized(a: Self, x: &[Self], y: &mut [Self]);

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn axpy_vectorized(a: f32, x: &[f32], y: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        if simd::has_avx2_fma() {
            // SAFETY: features checked above.
            unsafe { simd::x86::axpy_f32(a, x, y) };
            return;
        }
        simd::axpy_unrolled(a, x, y)
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn axpy_vectorized(a: f64, x: &[f64], y: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if simd::has_avx2_fma() {
            // SAFETY: features checked above.
            unsafe { simd::x86::axpy_f64(a, x, y) };
            return;
        }
        simd::axpy_unrolled(a, x, y)
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Block Sparse Row matrix. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct BsrMatrix<T> {
    rows: usize,
    cols: usize,
    shape: BlockShape,
    indptr: Vec<u32>,
    indices: Vec<u32>,
    data: Vec<T>,
}

impl<T: Scalar> BsrMatrix<T> {
    /// Assembles a matrix from raw arrays, checking every structural
    /// invariant. Entries of partial edge blocks that fall outside the
    /// logical matrix must be zero.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        shape: BlockShape,
        indptr: Vec<u32>,
        indices: Vec<u32>,
        data: Vec<T>,
    ) -> Result<Self> {
        let structural = |m: String| Error::Structural(m);
        if shape.rows == 0 || shape.cols == 0 {
            return Err(structural(format!("block shape {shape} must be positive")));
        }
        let grid = BlockGrid::new(rows, cols, shape, true)?;
        if indptr.len() != grid.block_rows + 1 {
            return Err(structural(format!(
                "indptr has length {}, expected {}",
                indptr.len(),
                grid.block_rows + 1
            )));
        }
        if indptr[0] != 0 {
            return Err(structural(format!("indptr[0] = {}, expected 0", indptr[0])));
        }
        if let Some(w) = indptr.windows(2).position(|w| w[0] > w[1]) {
            return Err(structural(format!("indptr decreases at position {w}")));
        }
        let nblocks = *indptr.last().unwrap() as usize;
        if indices.len() != nblocks {
            return Err(structural(format!(
                "{} block indices but indptr ends at {nblocks}",
                indices.len()
            )));
        }
        if data.len() != nblocks * shape.area() {
            return Err(structural(format!(
                "data has {} values, expected {} blocks of {}",
                data.len(),
                nblocks,
                shape
            )));
        }
        for br in 0..grid.block_rows {
            let seg = &indices[indptr[br] as usize..indptr[br + 1] as usize];
            if let Some(&bad) = seg.iter().find(|&&j| j as usize >= grid.block_cols) {
                return Err(structural(format!(
                    "block-column {bad} out of range in block-row {br} (limit {})",
                    grid.block_cols
                )));
            }
            if seg.windows(2).any(|w| w[0] >= w[1]) {
                return Err(structural(format!("block-row {br} indices not strictly ascending")));
            }
        }
        let m = Self {
            rows,
            cols,
            shape,
            indptr,
            indices,
            data,
        };
        if rows % shape.rows != 0 || cols % shape.cols != 0 {
            for (br, bc, blk) in m.blocks() {
                for ii in 0..shape.rows {
                    for jj in 0..shape.cols {
                        let outside = br * shape.rows + ii >= rows || bc * shape.cols + jj >= cols;
                        if outside && blk[ii * shape.cols + jj] != T::zero() {
                            return Err(structural(format!(
                                "nonzero padding entry in block ({br}, {bc})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(m)
    }

    /// A matrix with no stored blocks.
    pub fn empty(rows: usize, cols: usize, shape: BlockShape) -> Result<Self> {
        let grid = BlockGrid::new(rows, cols, shape, true)?;
        Self::from_parts(rows, cols, shape, vec![0; grid.block_rows + 1], vec![], vec![])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn block_shape(&self) -> BlockShape {
        self.shape
    }

    pub fn indptr(&self) -> &[u32] {
        &self.indptr
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn grid(&self) -> BlockGrid {
        BlockGrid::new(self.rows, self.cols, self.shape, true).expect("validated at construction")
    }

    pub fn num_blocks(&self) -> usize {
        self.indices.len()
    }

    /// Fraction of grid blocks that are stored.
    pub fn block_density(&self) -> f64 {
        let total = self.grid().num_blocks();
        if total == 0 {
            0.0
        } else {
            self.num_blocks() as f64 / total as f64
        }
    }

    /// Stored blocks as `(block_row, block_col, values)`, in storage order.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize, &[T])> + '_ {
        let area = self.shape.area();
        (0..self.indptr.len() - 1).flat_map(move |br| {
            (self.indptr[br] as usize..self.indptr[br + 1] as usize)
                .map(move |p| (br, self.indices[p] as usize, &self.data[p * area..(p + 1) * area]))
        })
    }

    /// Dense reconstruction; unstored blocks are exactly zero.
    pub fn to_dense(&self) -> DenseMatrix<T> {
        bsr_to_dense(self)
    }

    /// Same values on a different element type.
    pub fn cast<U: Scalar>(&self) -> BsrMatrix<U> {
        BsrMatrix {
            rows: self.rows,
            cols: self.cols,
            shape: self.shape,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Converts a dense matrix, storing every block that holds an entry with
/// `|value| > zero_tol`. Non-divisible dimensions need `pad`.
pub fn dense_to_bsr<T: Scalar>(
    dense: &DenseMatrix<T>,
    shape: BlockShape,
    zero_tol: f64,
    pad: bool,
) -> Result<BsrMatrix<T>> {
    if !(zero_tol >= 0.0) {
        return Err(param(format!("zero_tol must be >= 0, got {zero_tol}")));
    }
    let grid = BlockGrid::new(dense.rows, dense.cols, shape, pad)?;
    let tol = T::from_f64(zero_tol);
    let mut indptr = Vec::with_capacity(grid.block_rows + 1);
    let mut indices = Vec::new();
    let mut data = Vec::new();
    indptr.push(0u32);
    let mut block = vec![T::zero(); shape.area()];
    for br in 0..grid.block_rows {
        for bc in 0..grid.block_cols {
            let mut keep = false;
            block.iter_mut().for_each(|v| *v = T::zero());
            for (ii, r) in grid.row_range(br).enumerate() {
                for (jj, c) in grid.col_range(bc).enumerate() {
                    let v = dense.data[r * dense.cols + c];
                    keep |= v.abs() > tol;
                    block[ii * shape.cols + jj] = v;
                }
            }
            if keep {
                indices.push(to_u32(bc)?);
                data.extend_from_slice(&block);
            }
        }
        indptr.push(to_u32(indices.len())?);
    }
    BsrMatrix::from_parts(dense.rows, dense.cols, shape, indptr, indices, data)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| dim(format!("{v} exceeds the 32-bit block index range")))
}

/// Exact dense reconstruction.
pub fn bsr_to_dense<T: Scalar>(m: &BsrMatrix<T>) -> DenseMatrix<T> {
    let mut out = DenseMatrix::zeros(m.rows, m.cols);
    let s = m.shape;
    for (br, bc, blk) in m.blocks() {
        for ii in 0..s.rows {
            let r = br * s.rows + ii;
            if r >= m.rows {
                break;
            }
            for jj in 0..s.cols {
                let c = bc * s.cols + jj;
                if c >= m.cols {
                    break;
                }
                out.data[r * m.cols + c] = blk[ii * s.cols + jj];
            }
        }
    }
    out
}

/// Zeroes the `floor(target * num_blocks)` blocks with the smallest Frobenius
/// norm, ties going to the earlier block in (block-row, block-col) order.
/// Returns the pruned matrix and the kept-block mask in grid order.
pub fn prune_to_blocks<T: Scalar>(
    dense: &DenseMatrix<T>,
    shape: BlockShape,
    target_block_sparsity: f64,
    pad: bool,
) -> Result<(DenseMatrix<T>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&target_block_sparsity) {
        return Err(param(format!(
            "target block sparsity must lie in [0, 1], got {target_block_sparsity}"
        )));
    }
    let grid = BlockGrid::new(dense.rows, dense.cols, shape, pad)?;
    let wide: Vec<f64> = dense.data.iter().map(|v| v.as_f64()).collect();
    let norms = grid.block_norms(&wide);
    let nblocks = norms.len();
    let drop = ((target_block_sparsity * nblocks as f64).floor() as usize).min(nblocks);
    let mut order: Vec<usize> = (0..nblocks).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let mut keep = vec![true; nblocks];
    for &b in &order[..drop] {
        keep[b] = false;
    }
    let mut out = dense.clone();
    for (b, _) in keep.iter().enumerate().filter(|(_, k)| !**k) {
        let (br, bc) = (b / grid.block_cols, b % grid.block_cols);
        for r in grid.row_range(br) {
            for c in grid.col_range(bc) {
                out.data[r * dense.cols + c] = T::zero();
            }
        }
    }
    Ok((out, keep))
}
