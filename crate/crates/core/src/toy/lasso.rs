use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Problem;
use crate::error::{dim, param, Error, Result};
use crate::tensor::WeightTensor;

/// Name of the single coefficient tensor (`1 x d`, a linear layer with one output).
pub const LASSO_WEIGHT: &str = "linear.weight";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoSpec {
    pub n: usize,
    pub d: usize,
    /// Number of nonzero true coefficients.
    pub s: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for LassoSpec {
    fn default() -> Self {
        Self {
            n: 50,
            d: 20,
            s: 5,
            noise_std: 0.01,
            seed: 0,
        }
    }
}

/// `y = A w_true + noise` with unit-norm columns of `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoProblem {
    pub n: usize,
    pub d: usize,
    /// Row-major `n x d`.
    pub a: Vec<f64>,
    pub y: Vec<f64>,
    pub w_true: Vec<f64>,
    pub seed: u64,
}

impl LassoProblem {
    pub fn generate(spec: LassoSpec) -> Result<Self> {
        let LassoSpec { n, d, s, noise_std, seed } = spec;
        if n == 0 || d == 0 {
            return Err(param("lasso needs n, d >= 1"));
        }
        if s > d {
            return Err(param(format!("support size {s} exceeds dimension {d}")));
        }
        if !(noise_std >= 0.0) {
            return Err(param("noise_std must be >= 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut a: Vec<f64> = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
        for j in 0..d {
            let norm = (0..n).map(|i| a[i * d + j].powi(2)).sum::<f64>().sqrt();
            for i in 0..n {
                a[i * d + j] /= norm;
            }
        }
        let mut w_true = vec![0.0; d];
        let mut support: Vec<usize> = sample(&mut rng, d, s).into_vec();
        support.sort_unstable();
        for j in support {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            w_true[j] = sign * rng.random_range(1.0..2.0);
        }
        let y = (0..n)
            .map(|i| {
                let clean: f64 = (0..d).map(|j| a[i * d + j] * w_true[j]).sum();
                clean + noise_std * normal.sample(&mut rng)
            })
            .collect();
        Ok(Self { n, d, a, y, w_true, seed })
    }

    /// Builds a problem from explicit data (columns are used as given).
    pub fn from_data(n: usize, d: usize, a: Vec<f64>, y: Vec<f64>, w_true: Vec<f64>, seed: u64) -> Result<Self> {
        if a.len() != n * d || y.len() != n || w_true.len() != d {
            return Err(dim("lasso data does not match n x d"));
        }
        Ok(Self { n, d, a, y, w_true, seed })
    }

    pub fn predict(&self, w: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.d).map(|j| self.a[i * self.d + j] * w[j]).sum())
            .collect()
    }

    /// `0.5 ||A w - y||^2` and its gradient `A^T (A w - y)`.
    pub fn objective_and_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        if w.len() != self.d {
            return Err(dim(format!("w has {} entries, expected {}", w.len(), self.d)));
        }
        let resid: Vec<f64> = self.predict(w).iter().zip(&self.y).map(|(p, y)| p - y).collect();
        let obj = 0.5 * resid.iter().map(|r| r * r).sum::<f64>();
        let mut grad = vec![0.0; self.d];
        for (i, r) in resid.iter().enumerate() {
            for (j, g) in grad.iter_mut().enumerate() {
                *g += self.a[i * self.d + j] * r;
            }
        }
        Ok((obj, grad))
    }

    /// `||A^T y||_inf`, the smallest l1 weight with an all-zero solution.
    pub fn zero_solution_threshold(&self) -> f64 {
        let (_, g) = self.objective_and_grad(&vec![0.0; self.d]).expect("dimensions match");
        g.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Coordinate-descent solution of `0.5 ||A w - y||^2 + weight * ||w||_1`.
    pub fn lasso_oracle(&self, weight: f64) -> Result<Vec<f64>> {
        self.lasso_oracle_weighted(&vec![weight; self.d])
    }

    /// Same with a per-coordinate weight vector. Cyclic sweeps until the
    /// largest coordinate change drops below `1e-10`.
    pub fn lasso_oracle_weighted(&self, weights: &[f64]) -> Result<Vec<f64>> {
        const TOL: f64 = 1e-10;
        const MAX_SWEEPS: usize = 100_000;
        if weights.len() != self.d {
            return Err(dim("one l1 weight per coordinate expected"));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
            return Err(param(format!("l1 weight {w} must be >= 0")));
        }
        let (n, d) = (self.n, self.d);
        let cols: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| self.a[i * d + j]).collect()).collect();
        let sq: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
        let mut w = vec![0.0; d];
        let mut resid = self.y.clone();
        let mut last_change = f64::INFINITY;
        for _ in 0..MAX_SWEEPS {
            let mut max_change: f64 = 0.0;
            for j in 0..d {
                if sq[j] == 0.0 {
                    continue;
                }
                let rho: f64 = cols[j].iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() + sq[j] * w[j];
                let new = soft(rho, weights[j]) / sq[j];
                let delta = new - w[j];
                if delta != 0.0 {
                    for (r, a) in resid.iter_mut().zip(&cols[j]) {
                        *r -= a * delta;
                    }
                    w[j] = new;
                }
                max_change = max_change.max(delta.abs());
            }
            last_change = max_change;
            if max_change < TOL {
                return Ok(w);
            }
        }
        Err(Error::NonConvergence {
            sweeps: MAX_SWEEPS,
            last_change,
        })
    }
}

fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

impl Problem for LassoProblem {
    fn initial_params(&self) -> Vec<WeightTensor> {
        vec![WeightTensor::zeros(LASSO_WEIGHT, 1, self.d)]
    }

    fn loss_and_grad(&self, params: &[WeightTensor]) -> Result<(f64, Vec<Vec<f64>>)> {
        let [w] = params else {
            return Err(dim(format!("lasso takes one tensor, got {}", params.len())));
        };
        let (obj, g) = self.objective_and_grad(&w.data)?;
        Ok((obj, vec![g]))
    }
}
