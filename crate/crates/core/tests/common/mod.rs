//! Checks shared by the integration tests and the acceptance harness.
//! Each returns a [`Check`] holding the verdict and the measured numbers.
#![allow(dead_code)]

use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sparse_prox::bench::{run_sweep, Mode, SweepConfig};
use sparse_prox::bsr::{bsr_to_dense, dense_to_bsr, prune_to_blocks, spmm_with, spmv_with, DenseMatrix};
use sparse_prox::container::{export_bsr, Checkpoint, Container};
use sparse_prox::optimizer::{OptimizerState, TensorState};
use sparse_prox::prox::{shrink_elementwise, GammaState};
use sparse_prox::sched::{schedule, HardwareProfile, OpKind, Structure, TaskBuffer, TaskDescriptor};
use sparse_prox::toy::{train, LassoProblem, LassoSpec, Split, TinyNetProblem, TinyNetSpec, TrainOptions};
use sparse_prox::{
    BlockShape, KernelConfig, KernelPath, OptimizerConfig, ProxConfig, ProxLambda, Schedule, SparseOptimizer,
    ThresholdConvention, WeightTensor,
};

pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }

    pub fn assert(self) {
        assert!(self.pass, "{}", self.detail);
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Minimizes a convex scalar function on `[lo, hi]` by ternary search.
pub fn ternary_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..300 {
        let a = lo + (hi - lo) / 3.0;
        let b = hi - (hi - lo) / 3.0;
        if f(a) <= f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    0.5 * (lo + hi)
}

/// The per-coordinate objective whose minimizer the convention defines.
pub fn prox_objective(conv: ThresholdConvention, t: f64, z: f64, gamma: f64, lambda: f64, mu: f64) -> f64 {
    match conv {
        ThresholdConvention::Paper => gamma * t.abs() + mu / (2.0 * lambda) * (t - z) * (t - z),
        ThresholdConvention::Textbook => mu * gamma * t.abs() + (t - z) * (t - z) / (2.0 * lambda),
    }
}

/// Random draws of `(z, gamma, lambda, mu)`, compared against ternary search
/// on `[-2|z|, 2|z|]`, under both conventions.
pub fn prox_oracle(draws: usize) -> Check {
    let mut r = rng(11);
    let mut worst = 0.0f64;
    let mut worst_arg = 0.0f64;
    let mut count = 0;
    for conv in [ThresholdConvention::Paper, ThresholdConvention::Textbook] {
        for _ in 0..draws {
            let z = r.random_range(-10.0..10.0);
            let gamma = r.random_range(0.0..5.0);
            let lambda = r.random_range(0.01..2.0);
            let mu = r.random_range(0.1..5.0);
            let got = shrink_elementwise(&[z], &[gamma], lambda, mu, conv).unwrap()[0];
            let f = |t: f64| prox_objective(conv, t, z, gamma, lambda, mu);
            let span = 2.0 * z.abs();
            let t_star = ternary_min(f, -span, span);
            worst = worst.max((f(got) - f(t_star)).abs());
            worst_arg = worst_arg.max((got - t_star).abs());
            count += 1;
        }
    }
    Check::new(
        worst <= 1e-6,
        format!("{count} draws, max objective gap {worst:.2e} (tol 1e-6), max argmin gap {worst_arg:.2e}"),
    )
}

/// Nonzero counts of shrink output on a fixed `z` along a 20-point
/// increasing grid of effective threshold `(lambda / mu) gamma`.
pub fn threshold_monotone() -> Check {
    let mut r = rng(12);
    let z: Vec<f64> = (0..500).map(|_| 3.0 * normal(&mut r)).collect();
    let gamma: Vec<f64> = (0..500).map(|_| r.random_range(0.2..2.0)).collect();
    let mut ok = true;
    let mut summary = Vec::new();
    // Grid realized once through lambda (mu fixed) and once through mu (lambda fixed).
    for via_mu in [false, true] {
        let mut prev = usize::MAX;
        let mut counts = Vec::new();
        for i in 0..20 {
            let ratio = 0.01 + 0.5 * i as f64;
            let (lambda, mu) = if via_mu { (1.0, 1.0 / ratio) } else { (ratio, 1.0) };
            let out = shrink_elementwise(&z, &gamma, lambda, mu, ThresholdConvention::Paper).unwrap();
            let nnz = out.iter().filter(|v| **v != 0.0).count();
            ok &= nnz <= prev;
            prev = nnz;
            counts.push(nnz);
        }
        summary.push(format!(
            "{}: {:?}",
            if via_mu { "via mu" } else { "via lambda" },
            counts
        ));
    }
    Check::new(ok, summary.join("; "))
}

/// AdamW written out independently of the crate.
pub struct ReferenceAdamW {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub wd: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub k: i32,
}

impl ReferenceAdamW {
    pub fn step(&mut self, w: &mut [Vec<f64>], g: &[Vec<f64>], eta: f64) {
        self.k += 1;
        for t in 0..w.len() {
            for i in 0..w[t].len() {
                self.m[t][i] = self.beta1 * self.m[t][i] + (1.0 - self.beta1) * g[t][i];
                self.v[t][i] = self.beta2 * self.v[t][i] + (1.0 - self.beta2) * g[t][i] * g[t][i];
                let mh = self.m[t][i] / (1.0 - self.beta1.powi(self.k));
                let vh = self.v[t][i] / (1.0 - self.beta2.powi(self.k));
                w[t][i] -= eta * (self.alpha * mh / (vh.sqrt() + self.eps) + self.wd * w[t][i]);
            }
        }
    }
}

fn cosine(k: u64, total: u64) -> f64 {
    let frac = (k as f64 / total as f64).min(1.0);
    0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// 100 steps with the prox disabled against [`ReferenceAdamW`], and the
/// same with the prox on but `gamma == 0`.
pub fn adamw_reduction() -> Check {
    let mut worst = 0.0f64;
    for zero_gamma in [false, true] {
        let cfg = OptimizerConfig {
            alpha: 0.01,
            weight_decay: 0.05,
            schedule: Schedule::Cosine,
            total_steps: 100,
            prox: zero_gamma.then(|| ProxConfig { reweight_every: None, ..ProxConfig::default() }),
            ..OptimizerConfig::default()
        };
        let mut r = rng(13);
        let shapes = [(3usize, 4usize), (1, 7), (5, 1)];
        let names = ["a.weight", "b.weight", "c.weight"];
        let mut params: Vec<WeightTensor> = shapes
            .iter()
            .zip(names)
            .map(|(&(rr, cc), n)| WeightTensor::new(n, rr, cc, (0..rr * cc).map(|_| normal(&mut r)).collect()).unwrap())
            .collect();
        let mut state = OptimizerState::default();
        if zero_gamma {
            for p in &params {
                state.tensors.insert(
                    p.name.clone(),
                    TensorState {
                        m: vec![0.0; p.len()],
                        v: vec![0.0; p.len()],
                        gamma: Some(GammaState { gamma: vec![0.0; p.len()], ell: 0 }),
                    },
                );
            }
        }
        let mut opt = SparseOptimizer::with_state(cfg.clone(), state).unwrap();
        let mut w_ref: Vec<Vec<f64>> = params.iter().map(|p| p.data.clone()).collect();
        let mut reference = ReferenceAdamW {
            alpha: cfg.alpha,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon_adam,
            wd: cfg.weight_decay,
            m: w_ref.iter().map(|w| vec![0.0; w.len()]).collect(),
            v: w_ref.iter().map(|w| vec![0.0; w.len()]).collect(),
            k: 0,
        };
        for k in 1..=100u64 {
            let grads: Vec<Vec<f64>> = params.iter().map(|p| (0..p.len()).map(|_| normal(&mut r)).collect()).collect();
            opt.step(&mut params, &grads).unwrap();
            reference.step(&mut w_ref, &grads, cosine(k, 100));
            for (p, w) in params.iter().zip(&w_ref) {
                for (a, b) in p.data.iter().zip(w) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Check::new(
        worst <= 1e-12,
        format!("max per-parameter deviation over 2x100 steps {worst:.2e} (tol 1e-12)"),
    )
}

pub fn lasso_problem() -> LassoProblem {
    LassoProblem::generate(LassoSpec { n: 50, d: 20, s: 5, noise_std: 0.01, seed: 0 }).unwrap()
}

pub const LASSO_STEPS: u64 = 500;

/// Constant schedule, `alpha = 0.05`, `mu = 1.5`, prox lambda tied to the
/// step; `reweight` selects `ell_max = 3` every 100 steps over plain l1.
pub fn lasso_config(reweight: bool) -> OptimizerConfig {
    OptimizerConfig {
        alpha: 0.05,
        schedule: Schedule::Constant,
        total_steps: LASSO_STEPS,
        prox: Some(ProxConfig {
            mu: 1.5,
            lambda: ProxLambda::Tied,
            ell_max: 3,
            reweight_every: reweight.then_some(100),
            ..ProxConfig::default()
        }),
        ..OptimizerConfig::default()
    }
}

/// Per-coordinate l1 weights of the lasso whose stationarity condition is
/// the optimizer's fixed point: there `w = shrink(w - eta alpha g / (sqrt(v) + eps))`
/// with threshold `tau_i`, so `0 ∈ g_i + rho_i ∂|w_i|` with
/// `rho_i = tau_i (sqrt(v_i) + eps) / (eta alpha)`, `v` bias-corrected.
pub fn fixed_point_weights(cfg: &OptimizerConfig, state: &OptimizerState, name: &str) -> Vec<f64> {
    let p = cfg.prox.as_ref().unwrap();
    let eta = sparse_prox::optimizer::set_schedule_multiplier(state.step, cfg.schedule, cfg.total_steps).unwrap();
    let lambda = cfg.prox_lambda(eta).unwrap();
    let slot = &state.tensors[name];
    let gamma = &slot.gamma.as_ref().unwrap().gamma;
    let bc = 1.0 - cfg.beta2.powi(state.step as i32);
    slot.v
        .iter()
        .zip(gamma)
        .map(|(v, g)| p.convention.threshold(lambda, p.mu, *g) * ((v / bc).sqrt() + cfg.epsilon_adam) / (eta * cfg.alpha))
        .collect()
}

pub fn weighted_objective(p: &LassoProblem, w: &[f64], rho: &[f64]) -> f64 {
    let (smooth, _) = p.objective_and_grad(w).unwrap();
    smooth + w.iter().zip(rho).map(|(a, r)| r * a.abs()).sum::<f64>()
}

fn support(w: &[f64]) -> Vec<usize> {
    w.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect()
}

/// Final objective within 1% of the coordinate-descent oracle and identical
/// support, for the plain-l1 and the reweighted runs.
pub fn lasso_recovery() -> Check {
    let p = lasso_problem();
    let truth = support(&p.w_true);
    let mut ok = true;
    let mut parts = Vec::new();
    for reweight in [false, true] {
        let cfg = lasso_config(reweight);
        let t = train(&p, &cfg, LASSO_STEPS, TrainOptions::default()).unwrap();
        let w = &t.params[0].data;
        let rho = fixed_point_weights(&cfg, &t.state, &t.params[0].name);
        let oracle = p.lasso_oracle_weighted(&rho).unwrap();
        let (f_opt, f_orc) = (weighted_objective(&p, w, &rho), weighted_objective(&p, &oracle, &rho));
        let gap = (f_opt - f_orc) / f_orc.abs();
        let same = support(w) == support(&oracle);
        ok &= gap.abs() <= 0.01 && same;
        parts.push(format!(
            "{}: objective {f_opt:.6} vs oracle {f_orc:.6} (rel gap {gap:.2e}), support {}/{} nnz {} matches oracle: {same}, equals truth: {}",
            if reweight { "reweighted" } else { "l1" },
            support(w).len(),
            w.len(),
            support(&oracle).len(),
            support(w) == truth
        ));
    }
    Check::new(ok, parts.join("; "))
}

/// `ell_max = 3` reweighting ends at most as dense as plain l1.
pub fn reweighting_effect() -> Check {
    let p = lasso_problem();
    let nnz = |reweight| {
        let t = train(&p, &lasso_config(reweight), LASSO_STEPS, TrainOptions::default()).unwrap();
        t.params[0].nonzero_count()
    };
    let (l1, rw) = (nnz(false), nnz(true));
    Check::new(rw <= l1, format!("reweighted nnz {rw} vs l1-only nnz {l1} (true support 5)"))
}

pub fn tinynet_config(prox: bool) -> OptimizerConfig {
    OptimizerConfig {
        alpha: 0.01,
        schedule: Schedule::Cosine,
        total_steps: 2000,
        prox: prox.then(|| ProxConfig {
            mu: 2.0,
            ell_max: 3,
            reweight_every: Some(200),
            ..ProxConfig::default()
        }),
        ..OptimizerConfig::default()
    }
}

/// Prox run against its prox-off twin: at least half the weights zero and a
/// held-out accuracy drop of at most 2 points.
pub fn tinynet_sparsification() -> Check {
    let p = TinyNetProblem::generate(TinyNetSpec::default()).unwrap();
    let sparse = train(&p, &tinynet_config(true), 2000, TrainOptions::default()).unwrap();
    let dense = train(&p, &tinynet_config(false), 2000, TrainOptions::default()).unwrap();
    let total: usize = sparse.params.iter().map(|t| t.len()).sum();
    let zeros: usize = sparse.params.iter().map(|t| t.len() - t.nonzero_count()).sum();
    let zero_frac = zeros as f64 / total as f64;
    let acc_s = p.accuracy(&sparse.params, Split::Test).unwrap();
    let acc_d = p.accuracy(&dense.params, Split::Test).unwrap();
    let drop = acc_d - acc_s;
    Check::new(
        zero_frac >= 0.5 && drop <= 0.02,
        format!(
            "zero fraction {zero_frac:.4} over all {total} parameters (min 0.5), test accuracy {acc_s:.4} vs dense {acc_d:.4} (drop {:.2} pp, max 2)",
            100.0 * drop
        ),
    )
}

pub fn random_dense(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> DenseMatrix<f32> {
    DenseMatrix::new(rows, cols, (0..rows * cols).map(|_| normal(r) as f32).collect()).unwrap()
}

/// Triple loop in f64 over the f32 inputs.
pub fn naive_mm(a: &DenseMatrix<f32>, b: &DenseMatrix<f32>) -> Vec<f64> {
    let mut out = vec![0.0f64; a.rows * b.cols];
    for i in 0..a.rows {
        for j in 0..a.cols {
            let w = a.data[i * a.cols + j] as f64;
            if w == 0.0 {
                continue;
            }
            for k in 0..b.cols {
                out[i * b.cols + k] += w * b.data[j * b.cols + k] as f64;
            }
        }
    }
    out
}

pub fn rel_frobenius(got: &[f32], want: &[f64]) -> f64 {
    let num: f64 = got.iter().zip(want).map(|(g, w)| (*g as f64 - w).powi(2)).sum();
    let den: f64 = want.iter().map(|w| w * w).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// SpMM on both kernel paths against the naive dense product over
/// sparsity x shape x size. The operand has `min(size, 64)` columns.
pub fn bsr_grid() -> Check {
    let mut r = rng(14);
    let mut worst = 0.0f64;
    let mut cells = 0;
    for size in [64usize, 256, 1024] {
        let b = random_dense(size, size.min(64), &mut r);
        let raw = random_dense(size, size, &mut r);
        for sparsity in [0.0, 0.5, 0.9] {
            for n in (0..9).map(|i| 1usize << i) {
                let shape = BlockShape { rows: n, cols: 1 };
                let pad = size % n != 0;
                let (pruned, _) = prune_to_blocks(&raw, shape, sparsity, pad).unwrap();
                let a = dense_to_bsr(&pruned, shape, 0.0, pad).unwrap();
                let want = naive_mm(&pruned, &b);
                for path in [KernelPath::Reference, KernelPath::Vectorized] {
                    let cfg = KernelConfig::fallback(a.grid().block_rows, 2);
                    let got = spmm_with(&a, &b, path, &cfg).unwrap();
                    worst = worst.max(rel_frobenius(&got.data, &want));
                    cells += 1;
                }
            }
        }
    }
    Check::new(
        worst < 1e-5,
        format!("{cells} cells, max relative Frobenius error {worst:.2e} (tol 1e-5)"),
    )
}

/// SpMV equals the one-column SpMM within 1e-12 relative, in f64.
pub fn spmv_matches_spmm() -> Check {
    let mut r = rng(15);
    let mut worst = 0.0f64;
    for n in [1usize, 2, 8, 32] {
        let d = DenseMatrix::new(96, 64, (0..96 * 64).map(|_| normal(&mut r)).collect()).unwrap();
        let (pruned, _) = prune_to_blocks(&d, BlockShape { rows: n, cols: 1 }, 0.5, false).unwrap();
        let a = dense_to_bsr(&pruned, BlockShape { rows: n, cols: 1 }, 0.0, false).unwrap();
        let x: Vec<f64> = (0..64).map(|_| normal(&mut r)).collect();
        let xm = DenseMatrix::new(64, 1, x.clone()).unwrap();
        for path in [KernelPath::Reference, KernelPath::Vectorized] {
            let y = spmv_with(&a, &x, path).unwrap();
            let z = spmm_with(&a, &xm, path, &KernelConfig::serial()).unwrap();
            for (p, q) in y.iter().zip(&z.data) {
                worst = worst.max((p - q).abs() / q.abs().max(1e-300));
            }
        }
    }
    Check::new(worst <= 1e-12, format!("max relative difference {worst:.2e}"))
}

fn profile() -> HardwareProfile {
    HardwareProfile {
        core_count: 4,
        cache_bytes: 1 << 21,
        isa_tag: "test".into(),
        max_mem_per_block: None,
        max_threads_per_block: None,
    }
}

/// A random structure pool entry: dims, shape and a random kept-block mask.
fn random_structure(r: &mut ChaCha8Rng) -> (usize, usize, BlockShape, Vec<bool>) {
    let n = [1usize, 2, 4, 8][r.random_range(0..4)];
    let shape = BlockShape { rows: n, cols: 1 };
    let rows = n * r.random_range(1..5);
    let cols = r.random_range(1..6);
    let blocks = (rows / n) * cols;
    let keep = (0..blocks).map(|_| r.random_bool(0.5)).collect();
    (rows, cols, shape, keep)
}

fn materialize(s: &(usize, usize, BlockShape, Vec<bool>), r: &mut ChaCha8Rng) -> sparse_prox::BsrMatrix<f32> {
    let (rows, cols, shape, keep) = s;
    let mut d = DenseMatrix::zeros(*rows, *cols);
    for (b, k) in keep.iter().enumerate() {
        if !*k {
            continue;
        }
        let (br, bc) = (b / cols, b % cols);
        for i in 0..shape.rows {
            // Never exactly zero, so the stored pattern equals the mask.
            d.data[(br * shape.rows + i) * cols + bc] = r.random_range(0.5f32..2.0);
        }
    }
    dense_to_bsr(&d, *shape, 0.0, false).unwrap()
}

/// Builds a random buffer from `seed`; `value_seed` drives only the values.
fn random_buffer(seed: u64, value_seed: u64) -> (TaskBuffer, Vec<Structure>) {
    let mut r = rng(seed);
    let mut vr = rng(value_seed);
    let pool_size = r.random_range(1..12);
    let pool: Vec<_> = (0..pool_size).map(|_| random_structure(&mut r)).collect();
    let tasks = r.random_range(0..60);
    let mut buf = TaskBuffer::new();
    let mut submitted = Vec::new();
    for _ in 0..tasks {
        let s = &pool[r.random_range(0..pool.len())];
        let m = materialize(s, &mut vr);
        let spmv = r.random_bool(0.3);
        let t = if spmv {
            TaskDescriptor::new(
                OpKind::Spmv,
                Arc::new(Structure::of(&m)),
                vec![(m.rows(), m.cols()), (m.cols(), 1)],
                profile(),
            )
            .unwrap()
        } else {
            TaskDescriptor::spmm(&m, r.random_range(1..9), profile()).unwrap()
        };
        submitted.push(Structure::of(&m));
        buf.submit(t);
    }
    (buf, submitted)
}

/// Dedup count, permutation, adjacency and value independence on 100
/// randomized buffers.
pub fn scheduler_invariants() -> Check {
    let mut failures = Vec::new();
    let mut total_tasks = 0;
    for seed in 0..100u64 {
        let (buf, structures) = random_buffer(seed, 1000 + seed);
        total_tasks += buf.len();
        let distinct: HashSet<Vec<u8>> = structures.iter().map(|s| s.canonical_bytes()).collect();
        if buf.cache_len() != distinct.len() {
            failures.push(format!("buffer {seed}: {} entries for {} structures", buf.cache_len(), distinct.len()));
        }
        let plan = schedule(&buf);
        if plan.cache.len() != distinct.len() {
            failures.push(format!("buffer {seed}: plan cache size"));
        }
        let mut order: Vec<usize> = plan.tasks.iter().map(|t| t.submitted).collect();
        order.sort_unstable();
        if order != (0..buf.len()).collect::<Vec<_>>() {
            failures.push(format!("buffer {seed}: plan is not a permutation"));
        }
        // Adjacency and within-group stability.
        let mut closed: HashSet<_> = HashSet::new();
        for (i, t) in plan.tasks.iter().enumerate() {
            if i > 0 && plan.tasks[i - 1].key != t.key {
                if closed.contains(&t.key) {
                    failures.push(format!("buffer {seed}: structure {} split", t.key));
                }
                closed.insert(plan.tasks[i - 1].key);
            }
            if *t.entry.structure != structures[t.submitted] {
                failures.push(format!("buffer {seed}: task {} points at the wrong entry", t.submitted));
            }
        }
        for w in plan.tasks.windows(2) {
            if w[0].key == w[1].key && w[0].op_kind == w[1].op_kind && w[0].submitted > w[1].submitted {
                failures.push(format!("buffer {seed}: group order not stable"));
            }
        }
        let (twin, _) = random_buffer(seed, 5000 + seed);
        if schedule(&twin) != plan {
            failures.push(format!("buffer {seed}: plan depends on values"));
        }
    }
    Check::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("100 buffers, {total_tasks} tasks: counts, permutation, adjacency and value independence hold")
        } else {
            failures.join("; ")
        },
    )
}

/// Default block-shape sweep at 90% sparsity: sparsity-aware below
/// structure-oblivious at every shape from `2x1`, and the vectorized
/// sparsity-aware median curve minimal at an interior shape.
pub fn sweep_phenomenology() -> (Check, Check, String) {
    let cfg = SweepConfig { sparsity: 0.9, ..SweepConfig::default() };
    let report = run_sweep(&cfg).unwrap();
    let mut ok_a = true;
    let mut worst = f64::INFINITY;
    for &shape in cfg.shapes.iter().filter(|s| s.rows >= 2) {
        for &path in &cfg.paths {
            let s = report.median(shape, path, Mode::SparsityAware).unwrap();
            let d = report.median(shape, path, Mode::StructureOblivious).unwrap();
            ok_a &= s < d;
            worst = worst.min(d / s);
        }
    }
    let curve: Vec<(BlockShape, f64)> = cfg
        .shapes
        .iter()
        .map(|&s| (s, report.median(s, KernelPath::Vectorized, Mode::SparsityAware).unwrap()))
        .collect();
    let (arg, min) = curve.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let interior = arg != cfg.shapes[0] && arg != *cfg.shapes.last().unwrap();
    let curve_text: Vec<String> = curve.iter().map(|(s, m)| format!("{s}:{m:.3}")).collect();
    (
        Check::new(ok_a, format!("smallest dense/sparse median ratio over shapes >= 2x1 and both paths: {worst:.2}x")),
        Check::new(interior, format!("vectorized minimum {min:.3} ms at {arg}; curve {}", curve_text.join(" "))),
        report.pretty(),
    )
}

/// 20 random checkpoints, including zero tensors and padded shapes:
/// checkpoint and export bytes round-trip, and the exported BSR densifies
/// to the stored weights bit for bit.
pub fn file_round_trip() -> Check {
    let mut r = rng(16);
    let mut failures = Vec::new();
    let mut padded = 0;
    let mut zero_tensors = 0;
    for case in 0..20 {
        let ntensors = r.random_range(1..5);
        let mut params = Vec::new();
        let mut state = OptimizerState { step: r.random_range(0..100_000), ..Default::default() };
        for t in 0..ntensors {
            let (rows, cols) = (r.random_range(1..40), r.random_range(1..40));
            let kind = r.random_range(0..3);
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| match kind {
                    0 => 0.0,
                    1 if r.random_bool(0.7) => 0.0,
                    _ => normal(&mut r),
                })
                .collect();
            zero_tensors += usize::from(data.iter().all(|v| *v == 0.0));
            let name = format!("layer{t}.weight");
            state.tensors.insert(
                name.clone(),
                TensorState {
                    m: (0..rows * cols).map(|_| normal(&mut r)).collect(),
                    v: (0..rows * cols).map(|_| normal(&mut r).abs()).collect(),
                    gamma: r.random_bool(0.5).then(|| GammaState {
                        gamma: (0..rows * cols).map(|_| r.random_range(0.0..100.0)).collect(),
                        ell: r.random_range(0..4),
                    }),
                },
            );
            params.push(WeightTensor::new(name, rows, cols, data).unwrap());
        }
        let ck = Checkpoint { params, state, config: Some(format!("case = {case}\n")) };
        let bytes = ck.to_container().unwrap().to_bytes().unwrap();
        let loaded = Checkpoint::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        let rounded: Vec<Vec<f32>> = ck.params.iter().map(|p| p.data.iter().map(|v| *v as f32).collect()).collect();
        for (l, want) in loaded.params.iter().zip(&rounded) {
            let got: Vec<f32> = l.data.iter().map(|v| *v as f32).collect();
            if got.iter().map(|v| v.to_bits()).ne(want.iter().map(|v| v.to_bits())) {
                failures.push(format!("case {case}: checkpoint weights `{}` differ", l.name));
            }
        }
        if loaded.state.step != ck.state.step || loaded.state.tensors.len() != ck.state.tensors.len() {
            failures.push(format!("case {case}: optimizer state differs"));
        }
        let shape = BlockShape { rows: r.random_range(1..9), cols: r.random_range(1..4) };
        let exported = export_bsr(&Container::from_bytes(&bytes).unwrap(), shape, 0.0, true).unwrap();
        let reread = Container::from_bytes(&exported.to_bytes().unwrap()).unwrap();
        for (sec, want) in reread.sections.iter().zip(&rounded) {
            padded += usize::from(sec.matrix.rows() % shape.rows != 0 || sec.matrix.cols() % shape.cols != 0);
            let got = bsr_to_dense(&sec.matrix).data;
            if got.iter().map(|v| v.to_bits()).ne(want.iter().map(|v| v.to_bits())) {
                failures.push(format!("case {case}: export of `{}` at {shape} differs", sec.name));
            }
            if want.iter().all(|v| *v == 0.0) && sec.matrix.num_blocks() != 0 {
                failures.push(format!("case {case}: zero tensor stored blocks"));
            }
        }
    }
    Check::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("20 checkpoints ({zero_tensors} zero tensors, {padded} padded exports) round-trip bit-exact")
        } else {
            failures.join("; ")
        },
    )
}
