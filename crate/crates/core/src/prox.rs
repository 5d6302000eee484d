//! Shrinkage operators for the weighted l1 penalty and its block variant.
//!
//! The elementwise operator maps
//!
//! ```text
//! w_i = (1 - tau_i / |z_i|) z_i   if |z_i| > tau_i
//!     = 0                         otherwise
//! ```
//!
//! with threshold `tau_i = (lambda / mu) gamma_i` under
//! [`ThresholdConvention::Paper`]. The block operator replaces `|z_i|` with
//! the Frobenius norm of the enclosing block. Weights `gamma` come from the
//! reweighting recursion `gamma_i = 1 / (|w_i| + eps)`.
//!
//! Everything here is a pure function over borrowed slices.

use serde::{Deserialize, Serialize};

use crate::block::{BlockGrid, BlockShape};
use crate::error::{dim, param, Result};

/// How `lambda`, `mu` and `gamma` combine into a shrinkage threshold.
///
/// * `Paper`: `tau = lambda * gamma / mu`, the exact minimizer of
///   `gamma |t| + mu / (2 lambda) (t - z)^2`.
/// * `Textbook`: `tau = lambda * mu * gamma`, the prox of `mu gamma |.|`
///   with step `lambda`, minimizing `mu gamma |t| + 1 / (2 lambda) (t - z)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdConvention {
    #[default]
    Paper,
    Textbook,
}

impl ThresholdConvention {
    #[inline]
    pub fn threshold(self, lambda: f64, mu: f64, gamma: f64) -> f64 {
        match self {
            ThresholdConvention::Paper => lambda * gamma / mu,
            ThresholdConvention::Textbook => lambda * mu * gamma,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "paper" => Ok(Self::Paper),
            "textbook" => Ok(Self::Textbook),
            other => Err(param(format!("unknown threshold convention `{other}`"))),
        }
    }
}

/// Source of the prox parameter `lambda` used inside the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxLambda {
    /// `lambda` follows the optimizer's base step `alpha`.
    Tied,
    /// A fixed `lambda`.
    Fixed(f64),
}

/// Hyperparameters of the sparsity penalty and its shrinkage step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxConfig {
    pub mu: f64,
    pub lambda: ProxLambda,
    pub epsilon_gamma: f64,
    pub ell_max: u32,
    pub block: BlockShape,
    /// Optimizer steps between reweightings; `None` keeps `gamma` uniform.
    pub reweight_every: Option<u64>,
    pub convention: ThresholdConvention,
    /// Allow block shapes that do not divide the tensor dimensions.
    pub pad: bool,
}

impl Default for ProxConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            lambda: ProxLambda::Tied,
            epsilon_gamma: 1e-4,
            ell_max: 1,
            block: BlockShape::ELEMENTWISE,
            reweight_every: None,
            convention: ThresholdConvention::Paper,
            pad: false,
        }
    }
}

impl ProxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(param(format!("mu must be > 0, got {}", self.mu)));
        }
        if let ProxLambda::Fixed(l) = self.lambda {
            if !(l > 0.0) {
                return Err(param(format!("prox lambda must be > 0, got {l}")));
            }
        }
        if !(self.epsilon_gamma > 0.0) {
            return Err(param(format!("epsilon_gamma must be > 0, got {}", self.epsilon_gamma)));
        }
        if self.ell_max < 1 {
            return Err(param("ell_max must be >= 1"));
        }
        if self.block.rows == 0 || self.block.cols == 0 {
            return Err(param(format!("block shape {} must be positive", self.block)));
        }
        if self.reweight_every == Some(0) {
            return Err(param("reweight_every must be >= 1"));
        }
        Ok(())
    }
}

/// Reweighting state for one tensor: one weight per element, or one per block.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaState {
    pub gamma: Vec<f64>,
    pub ell: u32,
}

impl GammaState {
    /// The unweighted start, `gamma = 1` everywhere and `ell = 0`.
    pub fn uniform(len: usize) -> Self {
        Self {
            gamma: vec![1.0; len],
            ell: 0,
        }
    }
}

fn check_scales(lambda: f64, mu: f64) -> Result<()> {
    if !(lambda > 0.0) {
        return Err(param(format!("lambda must be > 0, got {lambda}")));
    }
    if !(mu > 0.0) {
        return Err(param(format!("mu must be > 0, got {mu}")));
    }
    Ok(())
}

fn check_gamma(gamma: &[f64]) -> Result<()> {
    match gamma.iter().position(|g| !(*g >= 0.0)) {
        Some(i) => Err(param(format!("gamma[{i}] = {} must be non-negative", gamma[i]))),
        None => Ok(()),
    }
}

#[inline]
fn shrink_scalar(z: f64, tau: f64) -> f64 {
    let a = z.abs();
    if a > tau {
        (1.0 - tau / a) * z
    } else {
        0.0
    }
}

/// Elementwise shrinkage of `z` with per-entry weights `gamma`.
pub fn shrink_elementwise(
    z: &[f64],
    gamma: &[f64],
    lambda: f64,
    mu: f64,
    convention: ThresholdConvention,
) -> Result<Vec<f64>> {
    let mut out = z.to_vec();
    shrink_elementwise_in_place(&mut out, gamma, lambda, mu, convention)?;
    Ok(out)
}

pub fn shrink_elementwise_in_place(
    z: &mut [f64],
    gamma: &[f64],
    lambda: f64,
    mu: f64,
    convention: ThresholdConvention,
) -> Result<()> {
    if z.len() != gamma.len() {
        return Err(dim(format!("z has {} entries, gamma has {}", z.len(), gamma.len())));
    }
    check_scales(lambda, mu)?;
    check_gamma(gamma)?;
    for (zi, &g) in z.iter_mut().zip(gamma) {
        *zi = shrink_scalar(*zi, convention.threshold(lambda, mu, g));
    }
    Ok(())
}

/// Block shrinkage of a row-major `rows x cols` matrix; `gamma` holds one
/// weight per block in grid order. Partial edge blocks are allowed only with
/// `pad`, and their norm covers only real entries.
#[allow(clippy::too_many_arguments)]
pub fn shrink_block(
    z: &[f64],
    rows: usize,
    cols: usize,
    gamma: &[f64],
    lambda: f64,
    mu: f64,
    shape: BlockShape,
    pad: bool,
    convention: ThresholdConvention,
) -> Result<Vec<f64>> {
    let mut out = z.to_vec();
    shrink_block_in_place(&mut out, rows, cols, gamma, lambda, mu, shape, pad, convention)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn shrink_block_in_place(
    z: &mut [f64],
    rows: usize,
    cols: usize,
    gamma: &[f64],
    lambda: f64,
    mu: f64,
    shape: BlockShape,
    pad: bool,
    convention: ThresholdConvention,
) -> Result<()> {
    if z.len() != rows * cols {
        return Err(dim(format!("{} values for a {rows}x{cols} matrix", z.len())));
    }
    let grid = BlockGrid::new(rows, cols, shape, pad)?;
    if gamma.len() != grid.num_blocks() {
        return Err(dim(format!(
            "gamma has {} entries for {} blocks",
            gamma.len(),
            grid.num_blocks()
        )));
    }
    check_scales(lambda, mu)?;
    check_gamma(gamma)?;
    let norms = grid.block_norms(z);
    for br in 0..grid.block_rows {
        for bc in 0..grid.block_cols {
            let b = br * grid.block_cols + bc;
            let norm = norms[b];
            let tau = convention.threshold(lambda, mu, gamma[b]);
            let scale = if norm > tau { 1.0 - tau / norm } else { 0.0 };
            for r in grid.row_range(br) {
                for c in grid.col_range(bc) {
                    let v = &mut z[r * cols + c];
                    *v = if scale == 0.0 { 0.0 } else { scale * *v };
                }
            }
        }
    }
    Ok(())
}

/// One reweighting pass: `gamma = 1 / (|w| + eps)` per entry, or
/// `1 / (||w_block||_F + eps)` per block when `shape` is not `1x1`.
/// The returned state has `ell` advanced by one.
pub fn reweight_gamma(
    w: &[f64],
    rows: usize,
    cols: usize,
    epsilon_gamma: f64,
    shape: BlockShape,
    pad: bool,
    previous: &GammaState,
) -> Result<GammaState> {
    if !(epsilon_gamma > 0.0) {
        return Err(param(format!("epsilon_gamma must be > 0, got {epsilon_gamma}")));
    }
    if w.len() != rows * cols {
        return Err(dim(format!("{} values for a {rows}x{cols} matrix", w.len())));
    }
    let gamma = if shape.is_elementwise() {
        w.iter().map(|x| 1.0 / (x.abs() + epsilon_gamma)).collect()
    } else {
        let grid = BlockGrid::new(rows, cols, shape, pad)?;
        grid.block_norms(w)
            .into_iter()
            .map(|n| 1.0 / (n + epsilon_gamma))
            .collect()
    };
    Ok(GammaState {
        gamma,
        ell: previous.ell + 1,
    })
}

/// Gradient of the Moreau envelope, `(w - prox(w)) / lambda`.
pub fn my_gradient(w: &[f64], prox_w: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if w.len() != prox_w.len() {
        return Err(dim(format!("w has {} entries, prox(w) has {}", w.len(), prox_w.len())));
    }
    if !(lambda > 0.0) {
        return Err(param(format!("lambda must be > 0, got {lambda}")));
    }
    Ok(w.iter().zip(prox_w).map(|(a, b)| (a - b) / lambda).collect())
}

/// `mu * sum(gamma_i |w_i|)`, or `mu * sum(gamma_b ||w_b||_F)` over blocks.
pub fn penalty_value(
    w: &[f64],
    rows: usize,
    cols: usize,
    gamma: &[f64],
    mu: f64,
    shape: BlockShape,
    pad: bool,
) -> Result<f64> {
    if w.len() != rows * cols {
        return Err(dim(format!("{} values for a {rows}x{cols} matrix", w.len())));
    }
    let terms: Vec<f64> = if shape.is_elementwise() {
        w.iter().map(|x| x.abs()).collect()
    } else {
        BlockGrid::new(rows, cols, shape, pad)?.block_norms(w)
    };
    if terms.len() != gamma.len() {
        return Err(dim(format!("gamma has {} entries, expected {}", gamma.len(), terms.len())));
    }
    Ok(mu * terms.iter().zip(gamma).map(|(t, g)| g * t).sum::<f64>())
}

/// Number of gamma entries a tensor needs under `shape`.
pub fn gamma_len(rows: usize, cols: usize, shape: BlockShape, pad: bool) -> Result<usize> {
    if shape.is_elementwise() {
        Ok(rows * cols)
    } else {
        Ok(BlockGrid::new(rows, cols, shape, pad)?.num_blocks())
    }
}
