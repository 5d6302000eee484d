//! SpMM / SpMV over [`BsrMatrix`] and the dense baseline.
//!
//! Accumulation order is fixed: block-rows outer, stored blocks in index
//! order, block columns in order. Work is split only across independent
//! output block-rows, so results do not depend on the thread count.

use serde::{Deserialize, Serialize};

use super::{BsrMatrix, DenseMatrix, Scalar};
use crate::error::{dim, param, Result};

/// Which inner kernel to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelPath {
    /// Scalar loops, one output entry at a time.
    Reference,
    /// Row-panel axpy on the platform's vector unit.
    Vectorized,
}

impl KernelPath {
    pub fn as_str(&self) -> &'static str {
        match self {
            KernelPath::Reference => "reference",
            KernelPath::Vectorized => "vectorized",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "reference" => Ok(Self::Reference),
            "vectorized" => Ok(Self::Vectorized),
            other => Err(param(format!("unknown kernel path `{other}`"))),
        }
    }
}

/// Tiling and parallel decomposition of one kernel invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Width of the output column panel; 0 means the full width.
    pub col_panel: usize,
    /// Block-rows per parallel work item.
    pub grain_block_rows: usize,
    /// Upper bound on worker threads (further capped by `PSBR_THREADS`).
    pub threads: usize,
}

impl KernelConfig {
    /// Whole block-rows, split evenly over `cores`.
    pub fn fallback(block_rows: usize, cores: usize) -> Self {
        let cores = cores.max(1);
        Self {
            col_panel: 0,
            grain_block_rows: block_rows.div_ceil(cores).max(1),
            threads: cores,
        }
    }

    pub fn serial() -> Self {
        Self {
            col_panel: 0,
            grain_block_rows: usize::MAX,
            threads: 1,
        }
    }
}

/// Thread cap: `PSBR_THREADS` if set, else the available parallelism.
pub fn max_threads() -> usize {
    let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("PSBR_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n >= 1 => n,
        _ => hw,
    }
}

/// `a * b` on the vectorized path with the default decomposition.
pub fn spmm<T: Scalar>(a: &BsrMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let cfg = KernelConfig::fallback(a.grid().block_rows, max_threads());
    spmm_with(a, b, KernelPath::Vectorized, &cfg)
}

pub fn spmm_with<T: Scalar>(
    a: &BsrMatrix<T>,
    b: &DenseMatrix<T>,
    path: KernelPath,
    cfg: &KernelConfig,
) -> Result<DenseMatrix<T>> {
    if a.cols() != b.rows {
        return Err(dim(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows,
            b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows(), b.cols);
    let n = b.cols;
    if n == 0 || a.rows() == 0 {
        return Ok(out);
    }
    let r = a.block_shape().rows;
    let block_rows = a.grid().block_rows;
    let panel = if cfg.col_panel == 0 { n } else { cfg.col_panel.min(n) };
    for_each_block_row_chunk(&mut out.data, a.rows(), r, n, block_rows, cfg, |br0, br1, chunk| match path {
        KernelPath::Reference => spmm_reference_rows(a, b, br0, br1, chunk),
        KernelPath::Vectorized => spmm_vectorized_rows(a, b, br0, br1, panel, chunk),
    });
    Ok(out)
}

/// Splits `out` into chunks of `grain` block-rows and runs `f` on each,
/// on up to `threads` scoped workers.
fn for_each_block_row_chunk<T, F>(
    out: &mut [T],
    rows: usize,
    r: usize,
    row_len: usize,
    block_rows: usize,
    cfg: &KernelConfig,
    f: F,
) where
    T: Send,
    F: Fn(usize, usize, &mut [T]) + Sync,
{
    let grain = cfg.grain_block_rows.clamp(1, block_rows.max(1));
    let nchunks = block_rows.div_ceil(grain);
    let threads = cfg.threads.min(max_threads()).min(nchunks).max(1);
    if threads == 1 {
        let mut rest = out;
        for c in 0..nchunks {
            let (br0, br1) = (c * grain, ((c + 1) * grain).min(block_rows));
            let take = ((br1 * r).min(rows) - br0 * r) * row_len;
            let (head, tail) = rest.split_at_mut(take);
            f(br0, br1, head);
            rest = tail;
        }
        return;
    }
    let mut buckets: Vec<Vec<(usize, usize, &mut [T])>> = (0..threads).map(|_| Vec::new()).collect();
    let mut rest = out;
    for c in 0..nchunks {
        let (br0, br1) = (c * grain, ((c + 1) * grain).min(block_rows));
        let take = ((br1 * r).min(rows) - br0 * r) * row_len;
        let (head, tail) = rest.split_at_mut(take);
        buckets[c % threads].push((br0, br1, head));
        rest = tail;
    }
    std::thread::scope(|s| {
        for bucket in buckets {
            let f = &f;
            s.spawn(move || {
                for (br0, br1, chunk) in bucket {
                    f(br0, br1, chunk);
                }
            });
        }
    });
}

fn spmm_reference_rows<T: Scalar>(
    a: &BsrMatrix<T>,
    b: &DenseMatrix<T>,
    br0: usize,
    br1: usize,
    out: &mut [T],
) {
    let s = a.block_shape();
    let grid = a.grid();
    let (indptr, indices, data) = (a.indptr(), a.indices(), a.data());
    let n = b.cols;
    let row0 = br0 * s.rows;
    for br in br0..br1 {
        let rows = grid.row_range(br);
        for i in rows.clone() {
            let ii = i - rows.start;
            for k in 0..n {
                let mut acc = T::zero();
                for p in indptr[br] as usize..indptr[br + 1] as usize {
                    let bc = indices[p] as usize;
                    let blk = &data[p * s.area()..(p + 1) * s.area()];
                    for (jj, j) in grid.col_range(bc).enumerate() {
                        acc = acc + blk[ii * s.cols + jj] * b.data[j * n + k];
                    }
                }
                out[(i - row0) * n + k] = acc;
            }
        }
    }
}

fn spmm_vectorized_rows<T: Scalar>(
    a: &BsrMatrix<T>,
    b: &DenseMatrix<T>,
    br0: usize,
    br1: usize,
    panel: usize,
    out: &mut [T],
) {
    let s = a.block_shape();
    let grid = a.grid();
    let (indptr, indices, data) = (a.indptr(), a.indices(), a.data());
    let n = b.cols;
    let row0 = br0 * s.rows;
    for br in br0..br1 {
        let rows = grid.row_range(br);
        let (lo, hi) = (indptr[br] as usize, indptr[br + 1] as usize);
        let mut p0 = 0;
        while p0 < n {
            let p1 = (p0 + panel).min(n);
            for p in lo..hi {
                let bc = indices[p] as usize;
                let blk = &data[p * s.area()..(p + 1) * s.area()];
                let cols = grid.col_range(bc);
                for i in rows.clone() {
                    let ii = i - rows.start;
                    let o = (i - row0) * n;
                    let dst = &mut out[o + p0..o + p1];
                    for (jj, j) in cols.clone().enumerate() {
                        let w = blk[ii * s.cols + jj];
                        T::axpy_vectorized(w, &b.data[j * n + p0..j * n + p1], dst);
                    }
                }
            }
            p0 = p1;
        }
    }
}

/// `a * x` on the vectorized path.
pub fn spmv<T: Scalar>(a: &BsrMatrix<T>, x: &[T]) -> Result<Vec<T>> {
    spmv_with(a, x, KernelPath::Vectorized)
}

pub fn spmv_with<T: Scalar>(a: &BsrMatrix<T>, x: &[T], path: KernelPath) -> Result<Vec<T>> {
    if a.cols() != x.len() {
        return Err(dim(format!(
            "cannot multiply {}x{} by a vector of length {}",
            a.rows(),
            a.cols(),
            x.len()
        )));
    }
    let s = a.block_shape();
    let grid = a.grid();
    let (indptr, indices, data) = (a.indptr(), a.indices(), a.data());
    let mut out = vec![T::zero(); a.rows()];
    for br in 0..grid.block_rows {
        let rows = grid.row_range(br);
        let (lo, hi) = (indptr[br] as usize, indptr[br + 1] as usize);
        match path {
            KernelPath::Vectorized if s.cols == 1 => {
                // n x 1 blocks are contiguous columns: one axpy per block
                let dst = &mut out[rows.clone()];
                for p in lo..hi {
                    let j = indices[p] as usize;
                    let blk = &data[p * s.rows..p * s.rows + dst.len()];
                    T::axpy_vectorized(x[j], blk, dst);
                }
            }
            _ => {
                for i in rows.clone() {
                    let ii = i - rows.start;
                    let mut acc = T::zero();
                    for p in lo..hi {
                        let bc = indices[p] as usize;
                        let blk = &data[p * s.area()..(p + 1) * s.area()];
                        for (jj, j) in grid.col_range(bc).enumerate() {
                            acc = acc + blk[ii * s.cols + jj] * x[j];
                        }
                    }
                    out[i] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Structure-oblivious dense product `a * b`.
pub fn dense_mm<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    dense_mm_with(a, b, KernelPath::Vectorized, &KernelConfig::fallback(a.rows, max_threads()))
}

pub fn dense_mm_with<T: Scalar>(
    a: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
    path: KernelPath,
    cfg: &KernelConfig,
) -> Result<DenseMatrix<T>> {
    if a.cols != b.rows {
        return Err(dim(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let n = b.cols;
    let mut out = DenseMatrix::zeros(a.rows, n);
    if n == 0 || a.rows == 0 {
        return Ok(out);
    }
    for_each_block_row_chunk(&mut out.data, a.rows, 1, n, a.rows, cfg, |r0, r1, chunk| {
        for i in r0..r1 {
            let arow = a.row(i);
            let dst = &mut chunk[(i - r0) * n..(i - r0 + 1) * n];
            match path {
                KernelPath::Reference => {
                    for (k, d) in dst.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for (j, &w) in arow.iter().enumerate() {
                            acc = acc + w * b.data[j * n + k];
                        }
                        *d = acc;
                    }
                }
                KernelPath::Vectorized => {
                    for (j, &w) in arow.iter().enumerate() {
                        T::axpy_vectorized(w, b.row(j), dst);
                    }
                }
            }
        }
    });
    Ok(out)
}
