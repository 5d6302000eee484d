//! Desk-scale problems with analytic gradients, and the training loop that
//! drives [`SparseOptimizer`] over them.

mod lasso;
mod tinynet;

pub use lasso::{LassoProblem, LassoSpec};
pub use tinynet::{Split, TinyNetProblem, TinyNetSpec};

use crate::error::{param, Error, Result};
use crate::optimizer::{OptimizerConfig, OptimizerState, SparseOptimizer};
use crate::prox;
use crate::tensor::WeightTensor;

/// A differentiable objective over named tensors.
pub trait Problem {
    fn initial_params(&self) -> Vec<WeightTensor>;

    /// Loss and one gradient per tensor, in the order of `params`.
    fn loss_and_grad(&self, params: &[WeightTensor]) -> Result<(f64, Vec<Vec<f64>>)>;

    fn loss(&self, params: &[WeightTensor]) -> Result<f64> {
        self.loss_and_grad(params).map(|(l, _)| l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    /// Relative objective change that counts as no progress.
    pub rel_tol: f64,
    /// Number of trailing steps compared.
    pub window: usize,
}

impl Default for Plateau {
    fn default() -> Self {
        Self { rel_tol: 1e-6, window: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainOptions {
    pub plateau: Option<Plateau>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub step: u64,
    /// Smooth loss after the step.
    pub objective: f64,
    /// `mu * sum(gamma |w|)` over the shrunk tensors, with the current gamma.
    pub penalty: f64,
    /// Nonzeros over all tensors.
    pub nonzero_count: usize,
    pub nonzero_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    pub params: Vec<WeightTensor>,
    pub state: OptimizerState,
    pub stopped_early: bool,
}

impl Trajectory {
    pub fn last(&self) -> &TrajectoryPoint {
        self.points.last().expect("train runs at least one step")
    }
}

/// Current penalty of the shrunk tensors.
pub fn current_penalty(config: &OptimizerConfig, state: &OptimizerState, params: &[WeightTensor]) -> Result<f64> {
    let Some(p) = &config.prox else { return Ok(0.0) };
    let mut total = 0.0;
    for t in params {
        if let Some(g) = state.tensors.get(&t.name).and_then(|s| s.gamma.as_ref()) {
            total += prox::penalty_value(&t.data, t.rows, t.cols, &g.gamma, p.mu, p.block, p.pad)?;
        }
    }
    Ok(total)
}

/// Runs `steps` optimizer steps from the problem's initial point.
pub fn train<P: Problem + ?Sized>(
    problem: &P,
    config: &OptimizerConfig,
    steps: u64,
    options: TrainOptions,
) -> Result<Trajectory> {
    train_from(problem, config, problem.initial_params(), steps, options)
}

pub fn train_from<P: Problem + ?Sized>(
    problem: &P,
    config: &OptimizerConfig,
    mut params: Vec<WeightTensor>,
    steps: u64,
    options: TrainOptions,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(param("steps must be >= 1"));
    }
    let mut opt = SparseOptimizer::new(config.clone())?;
    let initial = problem.loss(&params)?;
    let limit = 1e6 * initial.max(f64::MIN_POSITIVE);
    let total: usize = params.iter().map(|t| t.len()).sum();
    let mut points = Vec::with_capacity(steps as usize);
    let mut stopped_early = false;

    for _ in 0..steps {
        let (_, grads) = problem.loss_and_grad(&params)?;
        let outcome = opt.step(&mut params, &grads)?;
        let objective = problem.loss(&params)?;
        if !objective.is_finite() || objective > limit {
            return Err(Error::Divergence {
                step: outcome.step,
                objective,
                limit,
            });
        }
        let nonzero_count: usize = params.iter().map(|t| t.nonzero_count()).sum();
        points.push(TrajectoryPoint {
            step: outcome.step,
            objective,
            penalty: current_penalty(config, opt.state(), &params)?,
            nonzero_count,
            nonzero_fraction: if total == 0 { 0.0 } else { nonzero_count as f64 / total as f64 },
        });
        if let Some(pl) = options.plateau {
            if points.len() > pl.window {
                let now = points[points.len() - 1];
                let then = points[points.len() - 1 - pl.window];
                let (a, b) = (now.objective + now.penalty, then.objective + then.penalty);
                if (a - b).abs() <= pl.rel_tol * b.abs().max(f64::MIN_POSITIVE) {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(Trajectory {
        points,
        params,
        state: opt.into_state(),
        stopped_early,
    })
}
