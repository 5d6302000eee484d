//! Proximal AdamW.
//!
//! Each step runs the AdamW moment recursions with bias correction, forms the
//! auxiliary point
//!
//! ```text
//! z = w_{k-1} - eta_k * (alpha * m_hat / (sqrt(v_hat) + eps) + weight_decay * w_{k-1})
//! ```
//!
//! and maps it through the weighted-l1 shrinkage of [`crate::prox`]. Tensors
//! whose names match an exemption pattern (biases, norms) skip the shrinkage
//! and are updated as plain AdamW. The reweighting weights `gamma` are
//! refreshed from the new weights every `reweight_every` steps until `ell`
//! reaches `ell_max`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::block::{BlockGrid, BlockShape};
use crate::error::{dim, param, Error, Result};
use crate::prox::{self, GammaState, ProxConfig, ProxLambda};
use crate::tensor::WeightTensor;

/// Learning-rate multiplier schedule `eta_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    LinearDecay,
    Cosine,
}

impl Schedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "constant" => Ok(Self::Constant),
            "linear_decay" | "linear" => Ok(Self::LinearDecay),
            "cosine" => Ok(Self::Cosine),
            other => Err(param(format!("unknown schedule `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::LinearDecay => "linear_decay",
            Schedule::Cosine => "cosine",
        }
    }
}

/// Lower bound of the decaying schedules.
pub const SCHEDULE_FLOOR: f64 = 0.01;

/// `eta_k` for step `k >= 1`. Decaying schedules clamp at [`SCHEDULE_FLOOR`],
/// including past `total_steps`.
pub fn set_schedule_multiplier(k: u64, schedule: Schedule, total_steps: u64) -> Result<f64> {
    if k == 0 {
        return Err(param("schedule step k must be >= 1"));
    }
    if schedule != Schedule::Constant && total_steps == 0 {
        return Err(param("decaying schedules need total_steps >= 1"));
    }
    let frac = (k as f64 / total_steps.max(1) as f64).min(1.0);
    Ok(match schedule {
        Schedule::Constant => 1.0,
        Schedule::LinearDecay => (1.0 - frac).max(SCHEDULE_FLOOR),
        Schedule::Cosine => {
            SCHEDULE_FLOOR + (1.0 - SCHEDULE_FLOOR) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_adam: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Horizon for the decaying schedules.
    pub total_steps: u64,
    /// `None` runs plain AdamW.
    pub prox: Option<ProxConfig>,
    /// Scale the prox `lambda` by `eta_k` as well.
    pub schedule_prox: bool,
    /// Substrings of tensor names that are never shrunk.
    pub exempt_patterns: Vec<String>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_adam: 1e-6,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            total_steps: 1,
            prox: Some(ProxConfig::default()),
            schedule_prox: true,
            exempt_patterns: vec!["bias".into(), "norm".into()],
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(param(format!("alpha must be > 0, got {}", self.alpha)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(param(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon_adam > 0.0) {
            return Err(param(format!("epsilon_adam must be > 0, got {}", self.epsilon_adam)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(param(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.schedule != Schedule::Constant && self.total_steps == 0 {
            return Err(param("total_steps must be >= 1 for decaying schedules"));
        }
        if let Some(p) = &self.prox {
            p.validate()?;
        }
        Ok(())
    }

    pub fn is_exempt(&self, name: &str) -> bool {
        self.exempt_patterns.iter().any(|p| name.contains(p.as_str()))
    }

    /// The prox `lambda` in effect at a step with multiplier `eta`.
    pub fn prox_lambda(&self, eta: f64) -> Option<f64> {
        let p = self.prox.as_ref()?;
        let base = match p.lambda {
            ProxLambda::Tied => self.alpha,
            ProxLambda::Fixed(l) => l,
        };
        Some(if self.schedule_prox { eta * base } else { base })
    }
}

/// Per-tensor optimizer slots.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Present only for tensors that are shrunk.
    pub gamma: Option<GammaState>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub tensors: BTreeMap<String, TensorState>,
}

/// What happened during one call to [`SparseOptimizer::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub step: u64,
    pub eta: f64,
    pub prox_lambda: Option<f64>,
    pub reweighted: bool,
}

#[derive(Debug, Clone)]
pub struct SparseOptimizer {
    config: OptimizerConfig,
    state: OptimizerState,
}

impl SparseOptimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: OptimizerState::default(),
        })
    }

    /// Resumes from a saved state.
    pub fn with_state(config: OptimizerConfig, state: OptimizerState) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn into_state(self) -> OptimizerState {
        self.state
    }

    fn shrinks(&self, t: &WeightTensor) -> bool {
        self.config.prox.is_some() && !self.config.is_exempt(&t.name)
    }

    fn fresh_slot(&self, t: &WeightTensor) -> Result<TensorState> {
        let gamma = match (&self.config.prox, self.shrinks(t)) {
            (Some(p), true) => Some(GammaState::uniform(prox::gamma_len(t.rows, t.cols, p.block, p.pad)?)),
            _ => None,
        };
        Ok(TensorState {
            m: vec![0.0; t.len()],
            v: vec![0.0; t.len()],
            gamma,
        })
    }

    fn validate_inputs(&self, params: &[WeightTensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(dim(format!("{} tensors but {} gradients", params.len(), grads.len())));
        }
        for (t, g) in params.iter().zip(grads) {
            if g.len() != t.len() {
                return Err(dim(format!(
                    "gradient for `{}` has {} entries, tensor has {}",
                    t.name,
                    g.len(),
                    t.len()
                )));
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    tensor: t.name.clone(),
                    index: i,
                    value: g[i],
                });
            }
            if let Some(slot) = self.state.tensors.get(&t.name) {
                if slot.m.len() != t.len() {
                    return Err(dim(format!("tensor `{}` changed size since the last step", t.name)));
                }
            }
            if let (Some(p), true) = (&self.config.prox, self.shrinks(t)) {
                if !p.block.is_elementwise() {
                    BlockGrid::new(t.rows, t.cols, p.block, p.pad)?;
                }
            }
        }
        Ok(())
    }

    /// Applies one update to every tensor in `params`. Inputs are validated
    /// up front, so a rejected step leaves both parameters and state untouched.
    pub fn step(&mut self, params: &mut [WeightTensor], grads: &[Vec<f64>]) -> Result<StepOutcome> {
        self.validate_inputs(params, grads)?;
        for t in params.iter() {
            if !self.state.tensors.contains_key(&t.name) {
                let slot = self.fresh_slot(t)?;
                self.state.tensors.insert(t.name.clone(), slot);
            }
        }

        let k = self.state.step + 1;
        let cfg = &self.config;
        let eta = set_schedule_multiplier(k, cfg.schedule, cfg.total_steps)?;
        let prox_lambda = cfg.prox_lambda(eta);
        let bc1 = 1.0 - cfg.beta1.powf(k as f64);
        let bc2 = 1.0 - cfg.beta2.powf(k as f64);
        let mut reweighted = false;

        for (t, g) in params.iter_mut().zip(grads) {
            let shrink = cfg.prox.is_some() && !cfg.is_exempt(&t.name);
            let slot = self.state.tensors.get_mut(&t.name).expect("slot created above");
            adamw_update(t, g, slot, cfg, eta, bc1, bc2);

            if let (true, Some(p), Some(lambda)) = (shrink, &cfg.prox, prox_lambda) {
                let gamma = slot.gamma.as_mut().expect("shrunk tensors carry gamma");
                if p.block.is_elementwise() {
                    prox::shrink_elementwise_in_place(&mut t.data, &gamma.gamma, lambda, p.mu, p.convention)?;
                } else {
                    prox::shrink_block_in_place(
                        &mut t.data,
                        t.rows,
                        t.cols,
                        &gamma.gamma,
                        lambda,
                        p.mu,
                        p.block,
                        p.pad,
                        p.convention,
                    )?;
                }
                if let Some(every) = p.reweight_every {
                    if k % every == 0 && gamma.ell < p.ell_max {
                        *gamma = prox::reweight_gamma(&t.data, t.rows, t.cols, p.epsilon_gamma, p.block, p.pad, gamma)?;
                        reweighted = true;
                    }
                }
            }
        }
        self.state.step = k;
        Ok(StepOutcome {
            step: k,
            eta,
            prox_lambda,
            reweighted,
        })
    }
}

/// Moment recursions plus the auxiliary point `z`, written into `t.data`.
fn adamw_update(
    t: &mut WeightTensor,
    g: &[f64],
    slot: &mut TensorState,
    cfg: &OptimizerConfig,
    eta: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..t.data.len() {
        let gi = g[i];
        let m = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * gi;
        let v = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * gi * gi;
        slot.m[i] = m;
        slot.v[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        let w = t.data[i];
        t.data[i] = w - eta * (cfg.alpha * m_hat / (v_hat.sqrt() + cfg.epsilon_adam) + cfg.weight_decay * w);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorSparsity {
    pub name: String,
    pub elements: usize,
    pub nonzero: usize,
    pub nonzero_fraction: f64,
    pub blocks: usize,
    pub nonzero_blocks: usize,
    pub block_nonzero_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityReport {
    pub block: BlockShape,
    pub tensors: Vec<TensorSparsity>,
    /// Element-weighted over all tensors.
    pub global_nonzero_fraction: f64,
    pub global_block_nonzero_fraction: f64,
}

/// Nonzero accounting for a set of tensors. Partial edge blocks are counted
/// as blocks.
pub fn sparsity_report(params: &[WeightTensor], block: BlockShape) -> SparsityReport {
    let mut tensors = Vec::with_capacity(params.len());
    let (mut elems, mut nnz, mut blocks, mut nnz_blocks) = (0usize, 0usize, 0usize, 0usize);
    for t in params {
        let nonzero = t.nonzero_count();
        let grid = BlockGrid::new(t.rows, t.cols, block, true).expect("padded grid always builds");
        let nb = grid.block_norms(&t.data).iter().filter(|n| **n != 0.0).count();
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        tensors.push(TensorSparsity {
            name: t.name.clone(),
            elements: t.len(),
            nonzero,
            nonzero_fraction: frac(nonzero, t.len()),
            blocks: grid.num_blocks(),
            nonzero_blocks: nb,
            block_nonzero_fraction: frac(nb, grid.num_blocks()),
        });
        elems += t.len();
        nnz += nonzero;
        blocks += grid.num_blocks();
        nnz_blocks += nb;
    }
    SparsityReport {
        block,
        tensors,
        global_nonzero_fraction: if elems == 0 { 0.0 } else { nnz as f64 / elems as f64 },
        global_block_nonzero_fraction: if blocks == 0 { 0.0 } else { nnz_blocks as f64 / blocks as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<WeightTensor> {
        vec![WeightTensor::new("w", 1, 1, vec![v]).unwrap()]
    }

    #[test]
    fn schedule_examples() {
        for k in [1, 7, 1000] {
            assert_eq!(set_schedule_multiplier(k, Schedule::Constant, 100).unwrap(), 1.0);
        }
        assert!((set_schedule_multiplier(50, Schedule::LinearDecay, 100).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(set_schedule_multiplier(100, Schedule::LinearDecay, 100).unwrap(), SCHEDULE_FLOOR);
        assert!((set_schedule_multiplier(100, Schedule::Cosine, 100).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(set_schedule_multiplier(500, Schedule::Cosine, 100).unwrap(), SCHEDULE_FLOOR);
        // half-cosine midpoint: 0.01 + 0.99 * 0.5
        assert!((set_schedule_multiplier(50, Schedule::Cosine, 100).unwrap() - 0.505).abs() < 1e-12);
        assert!(set_schedule_multiplier(0, Schedule::Constant, 100).is_err());
    }

    #[test]
    fn schedule_always_positive() {
        for s in [Schedule::Constant, Schedule::LinearDecay, Schedule::Cosine] {
            for k in 1..=250 {
                assert!(set_schedule_multiplier(k, s, 200).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn zero_gradient_identity_prox() {
        let cfg = OptimizerConfig { prox: None, ..Default::default() };
        let mut opt = SparseOptimizer::new(cfg).unwrap();
        let mut p = vec![WeightTensor::new("layer.weight", 2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap()];
        let before = p.clone();
        let out = opt.step(&mut p, &[vec![0.0; 4]]).unwrap();
        assert_eq!(p, before);
        assert_eq!(out.step, 1);
        assert_eq!(opt.state().step, 1);
    }

    #[test]
    fn first_step_is_normalized() {
        let cfg = OptimizerConfig { prox: None, ..Default::default() };
        let mut opt = SparseOptimizer::new(cfg).unwrap();
        let mut p = scalar(1.0);
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        let expected = 1.0 - 0.001 * (1.0 / (1.0 + 1e-6));
        assert!((p[0].data[0] - expected).abs() < 1e-15);
        assert!((p[0].data[0] - 0.999).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut opt = SparseOptimizer::new(OptimizerConfig::default()).unwrap();
        let mut p = vec![
            WeightTensor::new("a", 1, 2, vec![1.0, 2.0]).unwrap(),
            WeightTensor::new("b", 1, 1, vec![3.0]).unwrap(),
        ];
        opt.step(&mut p, &[vec![0.1, 0.2], vec![0.3]]).unwrap();
        let (snap_p, snap_s) = (p.clone(), opt.state().clone());
        let err = opt.step(&mut p, &[vec![0.1, 0.2], vec![f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref tensor, index: 0, .. } if tensor == "b"));
        assert_eq!(p, snap_p);
        assert_eq!(opt.state(), &snap_s);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = SparseOptimizer::new(OptimizerConfig::default()).unwrap();
        let mut p = scalar(1.0);
        assert!(matches!(opt.step(&mut p, &[vec![1.0, 2.0]]), Err(Error::Dimension(_))));
        assert!(matches!(opt.step(&mut p, &[]), Err(Error::Dimension(_))));
        assert_eq!(opt.state().step, 0);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            OptimizerConfig { alpha: 0.0, ..Default::default() },
            OptimizerConfig { beta1: 1.0, ..Default::default() },
            OptimizerConfig { beta2: 0.0, ..Default::default() },
            OptimizerConfig { epsilon_adam: -1.0, ..Default::default() },
            OptimizerConfig {
                prox: Some(ProxConfig { mu: 0.0, ..Default::default() }),
                ..Default::default()
            },
            OptimizerConfig {
                prox: Some(ProxConfig { reweight_every: Some(0), ..Default::default() }),
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(SparseOptimizer::new(c).is_err());
        }
    }

    #[test]
    fn exempt_tensors_are_not_shrunk() {
        let cfg = OptimizerConfig {
            alpha: 0.1,
            prox: Some(ProxConfig { mu: 0.01, ..Default::default() }),
            ..Default::default()
        };
        let mut opt = SparseOptimizer::new(cfg).unwrap();
        let mut p = vec![
            WeightTensor::new("fc.weight", 1, 2, vec![0.5, -0.5]).unwrap(),
            WeightTensor::new("fc.bias", 1, 2, vec![0.5, -0.5]).unwrap(),
        ];
        opt.step(&mut p, &[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        // threshold 0.1 / 0.01 = 10 wipes the weight but not the bias
        assert_eq!(p[0].data, vec![0.0, 0.0]);
        assert_eq!(p[1].data, vec![0.5, -0.5]);
        assert!(opt.state().tensors["fc.bias"].gamma.is_none());
    }

    #[test]
    fn reweighting_cadence_and_cap() {
        let cfg = OptimizerConfig {
            prox: Some(ProxConfig {
                mu: 1000.0,
                ell_max: 2,
                reweight_every: Some(3),
                ..Default::default()
            }),
            ..Default::default()
        };
        let mut opt = SparseOptimizer::new(cfg).unwrap();
        let mut p = vec![WeightTensor::new("w", 1, 3, vec![1.0, 0.5, 0.0]).unwrap()];
        let mut hits = vec![];
        for _ in 0..12 {
            let o = opt.step(&mut p, &[vec![0.01, -0.01, 0.0]]).unwrap();
            if o.reweighted {
                hits.push(o.step);
            }
        }
        assert_eq!(hits, vec![3, 6]);
        let g = opt.state().tensors["w"].gamma.as_ref().unwrap();
        assert_eq!(g.ell, 2);
        assert!((g.gamma[2] - 1e4).abs() < 1e-6);
    }

    #[test]
    fn state_isolation() {
        let cfg = OptimizerConfig::default();
        let mut both = SparseOptimizer::new(cfg.clone()).unwrap();
        let mut only = SparseOptimizer::new(cfg).unwrap();
        let mut pa = vec![
            WeightTensor::new("a", 1, 2, vec![0.3, -0.2]).unwrap(),
            WeightTensor::new("b", 1, 1, vec![1.0]).unwrap(),
        ];
        let mut pb = vec![pa[0].clone()];
        for i in 0..20 {
            let ga = vec![0.1 * i as f64, -0.05];
            both.step(&mut pa, &[ga.clone(), vec![(i as f64).sin()]]).unwrap();
            only.step(&mut pb, &[ga]).unwrap();
        }
        assert_eq!(pa[0], pb[0]);
        assert_eq!(both.state().tensors["a"], only.state().tensors["a"]);
    }

    #[test]
    fn block_prox_in_step() {
        let cfg = OptimizerConfig {
            alpha: 0.1,
            prox: Some(ProxConfig {
                mu: 1.0,
                block: BlockShape::new(2, 1).unwrap(),
                ..Default::default()
            }),
            ..Default::default()
        };
        let mut opt = SparseOptimizer::new(cfg).unwrap();
        let mut p = vec![WeightTensor::new("w", 2, 2, vec![0.05, 3.0, -0.05, 4.0]).unwrap()];
        opt.step(&mut p, &[vec![0.0; 4]]).unwrap();
        assert_eq!((p[0].data[0], p[0].data[2]), (0.0, 0.0));
        assert!((p[0].data[1] - 3.0 * (1.0 - 0.1 / 5.0)).abs() < 1e-12);
    }

    #[test]
    fn sparsity_report_examples() {
        let zero = WeightTensor::zeros("z", 4, 4);
        let r = sparsity_report(&[zero], BlockShape::ELEMENTWISE);
        assert_eq!(r.global_nonzero_fraction, 0.0);

        let dense = WeightTensor::new("d", 2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(sparsity_report(&[dense.clone()], BlockShape::ELEMENTWISE).global_nonzero_fraction, 1.0);

        let half = WeightTensor::new("h", 2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let r = sparsity_report(&[half.clone(), dense], BlockShape::new(2, 1).unwrap());
        assert_eq!(r.tensors[0].nonzero_fraction, 0.5);
        assert_eq!(r.tensors[0].block_nonzero_fraction, 1.0);
        assert!((r.global_nonzero_fraction - 8.0 / 10.0).abs() < 1e-15);
        let r = sparsity_report(&[half], BlockShape::new(1, 2).unwrap());
        assert_eq!(r.tensors[0].block_nonzero_fraction, 1.0);
    }
}
