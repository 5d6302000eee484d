//! Block-shape benchmark sweep.
//!
//! For each block shape, a `d x d` weight matrix is drawn, block-pruned to
//! the target sparsity and multiplied by a `d x batch` operand. The
//! sparsity-aware mode runs BSR SpMM with the configuration prepared by the
//! task buffer; the structure-oblivious mode runs the dense kernel on the
//! same zero-filled matrix. Only the kernel call is timed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::Hasher;
use std::time::{Duration, Instant};

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::block::BlockShape;
use crate::bsr::{dense_mm_with, dense_to_bsr, prune_to_blocks, spmm_with, DenseMatrix, KernelConfig, KernelPath};
use crate::error::{param, Error, Result};
use crate::sched::{schedule, ConfigPolicy, HardwareProfile, TaskBuffer, TaskDescriptor};

pub const SCHEMA_VERSION: u32 = 1;
/// Minimum timer ticks per timed run before inner iterations are doubled.
pub const MIN_TICKS: u32 = 100;
pub const MIN_REPEATS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SparsityAware,
    StructureOblivious,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::SparsityAware => "sparsity_aware",
            Mode::StructureOblivious => "structure_oblivious",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "sparsity_aware" => Ok(Self::SparsityAware),
            "structure_oblivious" => Ok(Self::StructureOblivious),
            other => Err(param(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Weight matrix is `d x d`.
    pub d: usize,
    /// Columns of the dense operand.
    pub batch: usize,
    /// Target block sparsity in `[0, 1]`.
    pub sparsity: f64,
    /// Block shapes as `n x 1` (or `1 x n` under `transpose`).
    pub shapes: Vec<BlockShape>,
    pub paths: Vec<KernelPath>,
    pub modes: Vec<Mode>,
    pub repeats: usize,
    pub seed: u64,
    pub pad: bool,
    /// Worker threads for both modes.
    pub threads: usize,
    /// Measure kernel configurations instead of using the fallback.
    pub autotune: bool,
    pub pin_core: Option<usize>,
}

/// `1x1, 2x1, ..., 256x1`.
pub fn default_shapes() -> Vec<BlockShape> {
    (0..9).map(|i| BlockShape { rows: 1 << i, cols: 1 }).collect()
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            d: 1024,
            batch: 256,
            sparsity: 0.9,
            shapes: default_shapes(),
            paths: vec![KernelPath::Reference, KernelPath::Vectorized],
            modes: vec![Mode::SparsityAware, Mode::StructureOblivious],
            repeats: MIN_REPEATS,
            seed: 0,
            pad: false,
            threads: std::env::var("PSBR_THREADS")
                .ok()
                .and_then(|v| v.trim().parse().ok())
                .filter(|n| *n >= 1)
                .unwrap_or(1),
            autotune: true,
            pin_core: None,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < MIN_REPEATS {
            return Err(param(format!("repeats must be at least {MIN_REPEATS}, got {}", self.repeats)));
        }
        if self.d == 0 || self.batch == 0 || self.threads == 0 {
            return Err(param("d, batch and threads must be positive"));
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(param(format!("sparsity must lie in [0, 1], got {}", self.sparsity)));
        }
        if self.shapes.is_empty() || self.paths.is_empty() || self.modes.is_empty() {
            return Err(param("sweep needs at least one shape, path and mode"));
        }
        for s in &self.shapes {
            crate::block::BlockGrid::new(self.d, self.d, *s, self.pad)?;
        }
        Ok(())
    }

    /// Swaps every shape to `1 x n`.
    pub fn transposed(mut self) -> Self {
        self.shapes = self.shapes.iter().map(|s| BlockShape { rows: s.cols, cols: s.rows }).collect();
        self
    }
}

/// Seed of the matrix for a shape; the mode does not enter, so both modes
/// time identical content.
pub fn cell_seed(master: u64, shape: BlockShape) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(master);
    h.write_u64(shape.rows as u64);
    h.write_u64(shape.cols as u64);
    h.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub runs: usize,
    pub min_ms: f64,
    pub max_ms: f64,
    pub median_ms: f64,
    pub mean_ms: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std_ms: f64,
}

impl Stats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() || samples.iter().any(|s| !s.is_finite()) {
            return Err(param("statistics need at least one finite sample"));
        }
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Ok(Self { runs: n, min_ms: v[0], max_ms: v[n - 1], median_ms: median, mean_ms: mean, std_ms: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub shape: BlockShape,
    pub path: KernelPath,
    pub mode: Mode,
    pub stats: Stats,
    /// Per-run wall time, divided by `inner_iterations`.
    pub samples_ms: Vec<f64>,
    pub inner_iterations: u32,
    pub stored_blocks: usize,
    pub total_blocks: usize,
    /// Multiply-adds actually issued by the kernel.
    pub flops: u64,
    pub kernel_config: KernelConfig,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Machine {
    pub arch: String,
    pub os: String,
    pub isa_tag: String,
    pub available_cores: usize,
    pub cache_bytes: usize,
    pub timer_tick_ns: f64,
}

impl Machine {
    pub fn detect() -> Self {
        let p = HardwareProfile::detect();
        Self {
            arch: std::env::consts::ARCH.to_owned(),
            os: std::env::consts::OS.to_owned(),
            isa_tag: p.isa_tag,
            available_cores: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            cache_bytes: p.cache_bytes,
            timer_tick_ns: timer_tick().as_secs_f64() * 1e9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub config: SweepConfig,
    pub machine: Machine,
    pub cells: Vec<Cell>,
    /// `key = value` pairs of the invoking command, when it recorded them.
    #[serde(default)]
    pub resolved: BTreeMap<String, String>,
}

impl SweepReport {
    pub fn cell(&self, shape: BlockShape, path: KernelPath, mode: Mode) -> Option<&Cell> {
        self.cells.iter().find(|c| c.shape == shape && c.path == path && c.mode == mode)
    }

    pub fn median(&self, shape: BlockShape, path: KernelPath, mode: Mode) -> Option<f64> {
        self.cell(shape, path, mode).map(|c| c.stats.median_ms)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported report schema {}", r.schema_version)));
        }
        Ok(r)
    }

    /// One row per timed sample, preceded by `# key = value` lines that
    /// echo the schema, the resolved configuration and the machine.
    pub fn to_csv(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "# schema = psbr-sweep-v{SCHEMA_VERSION}");
        let shapes: Vec<String> = c.shapes.iter().map(|s| s.to_string()).collect();
        let paths: Vec<&str> = c.paths.iter().map(|p| p.as_str()).collect();
        let modes: Vec<&str> = c.modes.iter().map(|m| m.as_str()).collect();
        for (k, v) in [
            ("d", c.d.to_string()),
            ("batch", c.batch.to_string()),
            ("sparsity", c.sparsity.to_string()),
            ("shapes", shapes.join(",")),
            ("paths", paths.join(",")),
            ("modes", modes.join(",")),
            ("repeats", c.repeats.to_string()),
            ("seed", c.seed.to_string()),
            ("pad", c.pad.to_string()),
            ("threads", c.threads.to_string()),
            ("autotune", c.autotune.to_string()),
            ("pin_core", c.pin_core.map_or("none".into(), |p| p.to_string())),
            ("machine.isa", self.machine.isa_tag.clone()),
            ("machine.cores", self.machine.available_cores.to_string()),
        ] {
            let _ = writeln!(s, "# {k} = {v}");
        }
        let _ = writeln!(s, "{CSV_HEADER}");
        for cell in &self.cells {
            for (i, ms) in cell.samples_ms.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    cell.shape,
                    cell.path.as_str(),
                    cell.mode.as_str(),
                    i,
                    ms,
                    cell.inner_iterations,
                    cell.stored_blocks,
                    cell.total_blocks
                );
            }
        }
        s
    }

    /// Box-whisker table of every cell.
    pub fn pretty(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "sweep d={} batch={} sparsity={} repeats={} seed={} threads={} isa={}",
            c.d, c.batch, c.sparsity, c.repeats, c.seed, c.threads, self.machine.isa_tag
        );
        let _ = writeln!(
            s,
            "{:>7} {:>10} {:>19} {:>9} {:>9} {:>9} {:>9} {:>9} {:>5}",
            "shape", "path", "mode", "min_ms", "median_ms", "mean_ms", "max_ms", "std_ms", "runs"
        );
        for cell in &self.cells {
            let t = &cell.stats;
            let _ = writeln!(
                s,
                "{:>7} {:>10} {:>19} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>5}",
                cell.shape.to_string(),
                cell.path.as_str(),
                cell.mode.as_str(),
                t.min_ms,
                t.median_ms,
                t.mean_ms,
                t.max_ms,
                t.std_ms,
                t.runs
            );
            for n in &cell.notes {
                let _ = writeln!(s, "        note: {n}");
            }
        }
        s
    }
}

pub const CSV_HEADER: &str = "shape,path,mode,run,ms,inner_iterations,stored_blocks,total_blocks";

/// Smallest positive difference between consecutive clock readings.
pub fn timer_tick() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Restricts the calling thread to `core`.
#[cfg(target_os = "linux")]
pub fn pin_to_core(core: usize) -> Result<()> {
    // SAFETY: cpu_set_t is plain data, zeroed is a valid empty set.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(core, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(Error::Io(std::io::Error::last_os_error()));
        }
    }
    Ok(())
}

#[cfg(not(target_os = "linux"))]
pub fn pin_to_core(_core: usize) -> Result<()> {
    Err(param("core pinning is only supported on Linux"))
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect();
    DenseMatrix::new(rows, cols, data).expect("sizes agree")
}

/// Times `f` once per repeat after one discarded warm-up, doubling the
/// inner iteration count until a run spans at least [`MIN_TICKS`] ticks.
fn time_runs<F: FnMut()>(repeats: usize, tick: Duration, notes: &mut Vec<String>, mut f: F) -> (Vec<f64>, u32) {
    f();
    let mut inner = 1u32;
    loop {
        let t0 = Instant::now();
        for _ in 0..inner {
            f();
        }
        let dt = t0.elapsed();
        if dt >= tick * MIN_TICKS || inner >= 1 << 20 {
            break;
        }
        inner *= 2;
    }
    if inner > 1 {
        notes.push(format!(
            "run shorter than {MIN_TICKS} timer ticks; inner iterations raised to {inner}"
        ));
    }
    let samples = (0..repeats)
        .map(|_| {
            let t0 = Instant::now();
            for _ in 0..inner {
                f();
            }
            t0.elapsed().as_secs_f64() * 1e3 / inner as f64
        })
        .collect();
    (samples, inner)
}

/// Runs every `(shape, path, mode)` cell of `cfg`.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    cfg.validate()?;
    if let Some(core) = cfg.pin_core {
        pin_to_core(core)?;
    }
    let machine = Machine::detect();
    let tick = Duration::from_secs_f64(machine.timer_tick_ns * 1e-9).max(Duration::from_nanos(1));
    let profile = HardwareProfile { core_count: cfg.threads, ..HardwareProfile::detect() };
    let b = random_matrix(cfg.d, cfg.batch, cfg.seed ^ 0x5eed_0f_b);
    let mut cells = Vec::new();
    for &shape in &cfg.shapes {
        let raw = random_matrix(cfg.d, cfg.d, cell_seed(cfg.seed, shape));
        let (pruned, keep) = prune_to_blocks(&raw, shape, cfg.sparsity, cfg.pad)?;
        let bsr = dense_to_bsr(&pruned, shape, 0.0, cfg.pad)?;
        let stored = keep.iter().filter(|k| **k).count();
        let policy = if cfg.autotune { ConfigPolicy::Measured } else { ConfigPolicy::Fallback };
        let mut buffer = TaskBuffer::with_policy(policy);
        buffer.submit(TaskDescriptor::spmm(&bsr, cfg.batch, profile.clone())?);
        let plan = schedule(&buffer);
        let sparse_cfg = plan.tasks[0].entry.config;
        let dense_cfg = KernelConfig::fallback(cfg.d, cfg.threads);
        let sparse_flops = (bsr.data().len() * cfg.batch) as u64;
        for &path in &cfg.paths {
            for &mode in &cfg.modes {
                let mut notes = Vec::new();
                let (samples, inner, flops, kcfg) = match mode {
                    Mode::SparsityAware => {
                        let (s, i) = time_runs(cfg.repeats, tick, &mut notes, || {
                            std::hint::black_box(spmm_with(&bsr, &b, path, &sparse_cfg).ok());
                        });
                        (s, i, sparse_flops, sparse_cfg)
                    }
                    Mode::StructureOblivious => {
                        let (s, i) = time_runs(cfg.repeats, tick, &mut notes, || {
                            std::hint::black_box(dense_mm_with(&pruned, &b, path, &dense_cfg).ok());
                        });
                        (s, i, (cfg.d * cfg.d * cfg.batch) as u64, dense_cfg)
                    }
                };
                cells.push(Cell {
                    shape,
                    path,
                    mode,
                    stats: Stats::from_samples(&samples)?,
                    samples_ms: samples,
                    inner_iterations: inner,
                    stored_blocks: stored,
                    total_blocks: keep.len(),
                    flops,
                    kernel_config: kcfg,
                    notes,
                });
            }
        }
    }
    Ok(SweepReport { schema_version: SCHEMA_VERSION, config: cfg.clone(), machine, cells, resolved: BTreeMap::new() })
}
