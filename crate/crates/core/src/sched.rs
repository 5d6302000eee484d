//! Structure-reuse task scheduling.
//!
//! Kernel invocations are submitted to a [`TaskBuffer`] as
//! [`TaskDescriptor`]s. Tasks whose BSR structure (dimensions, block shape,
//! `indptr`, `indices`) is identical share one prepared [`KernelConfig`];
//! block values never enter the key. [`schedule`] orders the buffer so that
//! tasks with the same structure run back to back and similar structures
//! sit next to each other.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::hash::Hasher;
use std::sync::Arc;
use std::time::Instant;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::block::BlockShape;
use crate::bsr::{simd, spmm_with, BsrMatrix, DenseMatrix, KernelConfig, KernelPath, Scalar};
use crate::error::{dim, param, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Spmm,
    Spmv,
    DenseMm,
}

impl OpKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OpKind::Spmm => "spmm",
            OpKind::Spmv => "spmv",
            OpKind::DenseMm => "dense_mm",
        }
    }
}

/// What the scheduler knows about the target.
///
/// Only `core_count` and `cache_bytes` shape the candidate set;
/// the per-block limits are carried for completeness.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub core_count: usize,
    pub cache_bytes: usize,
    pub isa_tag: String,
    pub max_mem_per_block: Option<u64>,
    pub max_threads_per_block: Option<u32>,
}

impl HardwareProfile {
    /// Probes the running machine. `cache_bytes` is the L2 size when the
    /// kernel exposes it, else 1 MiB.
    pub fn detect() -> Self {
        Self {
            core_count: crate::bsr::max_threads(),
            cache_bytes: l2_cache_bytes().unwrap_or(1 << 20),
            isa_tag: simd::isa_tag().to_owned(),
            max_mem_per_block: None,
            max_threads_per_block: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.core_count == 0 || self.cache_bytes == 0 {
            return Err(param("hardware profile needs core_count >= 1 and cache_bytes >= 1"));
        }
        Ok(())
    }
}

fn l2_cache_bytes() -> Option<usize> {
    let base = std::path::Path::new("/sys/devices/system/cpu/cpu0/cache");
    for entry in std::fs::read_dir(base).ok()?.flatten() {
        let Ok(level) = std::fs::read_to_string(entry.path().join("level")) else {
            continue;
        };
        if level.trim() != "2" {
            continue;
        }
        let size = std::fs::read_to_string(entry.path().join("size")).ok()?;
        let size = size.trim();
        let (num, mult) = match size.strip_suffix('K') {
            Some(n) => (n, 1 << 10),
            None => match size.strip_suffix('M') {
                Some(n) => (n, 1 << 20),
                None => (size, 1),
            },
        };
        return num.parse::<usize>().ok().map(|n| n * mult);
    }
    None
}

/// The structural tuple a task is keyed on.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Structure {
    pub rows: usize,
    pub cols: usize,
    pub block: BlockShape,
    pub indptr: Vec<u32>,
    pub indices: Vec<u32>,
}

impl Structure {
    pub fn of<T: Scalar>(m: &BsrMatrix<T>) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            block: m.block_shape(),
            indptr: m.indptr().to_vec(),
            indices: m.indices().to_vec(),
        }
    }

    /// A fully dense operand, one block covering everything.
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            block: BlockShape { rows: rows.max(1), cols: cols.max(1) },
            indptr: vec![0, 1],
            indices: vec![0],
        }
    }

    /// Little-endian serialization: rows, cols, r, c as u64, then each index
    /// array as a u64 length followed by u32 entries.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + 4 * (self.indptr.len() + self.indices.len()));
        for v in [self.rows, self.cols, self.block.rows, self.block.cols] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for arr in [&self.indptr, &self.indices] {
            out.extend_from_slice(&(arr.len() as u64).to_le_bytes());
            arr.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out
    }

    /// 64-bit FNV-1a over [`Self::canonical_bytes`].
    pub fn digest(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(&self.canonical_bytes());
        h.finish()
    }

    pub fn stored_blocks(&self) -> usize {
        self.indices.len()
    }
}

/// Cache key: the digest plus a disambiguator for digest collisions, so
/// two keys are equal iff their structures are equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StructureKey {
    pub digest: u64,
    pub slot: u32,
}

impl fmt::Display for StructureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.digest)?;
        if self.slot > 0 {
            write!(f, "#{}", self.slot)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDescriptor {
    pub op_kind: OpKind,
    pub structure: Arc<Structure>,
    /// `(rows, cols)` of each operand, the structured one first.
    pub operand_shapes: Vec<(usize, usize)>,
    pub hardware_profile: HardwareProfile,
}

impl TaskDescriptor {
    pub fn new(
        op_kind: OpKind,
        structure: Arc<Structure>,
        operand_shapes: Vec<(usize, usize)>,
        hardware_profile: HardwareProfile,
    ) -> Result<Self> {
        let t = Self { op_kind, structure, operand_shapes, hardware_profile };
        t.validate()?;
        Ok(t)
    }

    /// `a * b` with `b` of shape `a.cols() x b_cols`.
    pub fn spmm<T: Scalar>(a: &BsrMatrix<T>, b_cols: usize, profile: HardwareProfile) -> Result<Self> {
        Self::new(
            OpKind::Spmm,
            Arc::new(Structure::of(a)),
            vec![(a.rows(), a.cols()), (a.cols(), b_cols)],
            profile,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.hardware_profile.validate()?;
        let s = &self.structure;
        let Some(&(r, c)) = self.operand_shapes.first() else {
            return Err(param("task has no operands"));
        };
        if (r, c) != (s.rows, s.cols) {
            return Err(dim(format!(
                "first operand {r}x{c} does not match structure {}x{}",
                s.rows, s.cols
            )));
        }
        if let Some(&(br, bc)) = self.operand_shapes.get(1) {
            if br != s.cols {
                return Err(dim(format!("cannot multiply {}x{} by {br}x{bc}", s.rows, s.cols)));
            }
            if self.op_kind == OpKind::Spmv && bc != 1 {
                return Err(dim(format!("spmv operand must be a vector, got {br}x{bc}")));
            }
        }
        Ok(())
    }

    fn rhs_cols(&self) -> usize {
        self.operand_shapes.get(1).map_or(1, |s| s.1)
    }
}

/// How a new cache entry obtains its configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConfigPolicy {
    /// [`KernelConfig::fallback`]; deterministic, no measurement.
    #[default]
    Fallback,
    /// [`select_kernel_config`] on the running machine.
    Measured,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub key: StructureKey,
    pub structure: Arc<Structure>,
    pub config: KernelConfig,
}

/// Submitted tasks plus one cache entry per distinct structure.
#[derive(Debug, Default)]
pub struct TaskBuffer {
    tasks: Vec<(TaskDescriptor, StructureKey)>,
    entries: Vec<Arc<CacheEntry>>,
    by_digest: HashMap<u64, Vec<usize>>,
    policy: ConfigPolicy,
}

impl TaskBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_policy(policy: ConfigPolicy) -> Self {
        Self { policy, ..Self::default() }
    }

    /// Appends `task`; creates a cache entry only for an unseen structure.
    pub fn submit(&mut self, task: TaskDescriptor) -> StructureKey {
        let digest = task.structure.digest();
        let slots = self.by_digest.entry(digest).or_default();
        let found = slots
            .iter()
            .copied()
            .find(|&i| *self.entries[i].structure == *task.structure);
        let key = match found {
            Some(i) => self.entries[i].key,
            None => {
                let key = StructureKey { digest, slot: slots.len() as u32 };
                let config = match self.policy {
                    ConfigPolicy::Fallback => fallback_for(&task.structure, &task.hardware_profile),
                    ConfigPolicy::Measured => {
                        select_kernel_config(&task.structure, &task.hardware_profile, task.rhs_cols()).config
                    }
                };
                slots.push(self.entries.len());
                self.entries.push(Arc::new(CacheEntry { key, structure: task.structure.clone(), config }));
                key
            }
        };
        self.tasks.push((task, key));
        key
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn cache_len(&self) -> usize {
        self.entries.len()
    }

    pub fn tasks(&self) -> impl Iterator<Item = (&TaskDescriptor, StructureKey)> {
        self.tasks.iter().map(|(t, k)| (t, *k))
    }

    pub fn entry(&self, key: StructureKey) -> Option<&Arc<CacheEntry>> {
        self.entries.iter().find(|e| e.key == key)
    }
}

fn fallback_for(s: &Structure, p: &HardwareProfile) -> KernelConfig {
    KernelConfig::fallback(s.indptr.len().saturating_sub(1), p.core_count)
}

/// One criterion of the similarity ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Similarity {
    BlockShape,
    Dims,
    Structure,
    OpKind,
}

/// Default ordering: block shape, then dimensions, then exact structure,
/// then operator kind.
pub const DEFAULT_SIMILARITY: [Similarity; 4] =
    [Similarity::BlockShape, Similarity::Dims, Similarity::Structure, Similarity::OpKind];

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedTask {
    /// Position in submission order.
    pub submitted: usize,
    pub op_kind: OpKind,
    pub key: StructureKey,
    pub entry: Arc<CacheEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionPlan {
    pub tasks: Vec<PlannedTask>,
    /// One entry per distinct structure, in first-submission order.
    pub cache: Vec<Arc<CacheEntry>>,
}

impl ExecutionPlan {
    /// Plan order, cache keys and chosen configurations as text.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "plan: {} tasks, {} cache entries", self.tasks.len(), self.cache.len());
        for (i, t) in self.tasks.iter().enumerate() {
            let st = &t.entry.structure;
            let _ = writeln!(
                s,
                "  {i:>4}  task#{:<4} {:<8} key={} {}x{} block={} stored={}",
                t.submitted,
                t.op_kind.as_str(),
                t.key,
                st.rows,
                st.cols,
                st.block,
                st.stored_blocks()
            );
        }
        let _ = writeln!(s, "cache:");
        for e in &self.cache {
            let panel = if e.config.col_panel == 0 { "full".to_owned() } else { e.config.col_panel.to_string() };
            let _ = writeln!(
                s,
                "  key={} col_panel={panel} grain={} threads={}",
                e.key, e.config.grain_block_rows, e.config.threads
            );
        }
        s
    }
}

/// [`schedule_with`] under [`DEFAULT_SIMILARITY`].
pub fn schedule(buffer: &TaskBuffer) -> ExecutionPlan {
    schedule_with(buffer, &DEFAULT_SIMILARITY).expect("default similarity order is valid")
}

/// Orders the buffer by stable first-appearance grouping on each criterion
/// of `levels` in turn. Tasks equal on every criterion keep submission
/// order. [`Similarity::Structure`] is appended if absent; `OpKind` may not
/// precede it, as that would split tasks sharing a structure.
pub fn schedule_with(buffer: &TaskBuffer, levels: &[Similarity]) -> Result<ExecutionPlan> {
    let mut levels = levels.to_vec();
    let structure_at = match levels.iter().position(|l| *l == Similarity::Structure) {
        Some(p) => p,
        None => {
            levels.push(Similarity::Structure);
            levels.len() - 1
        }
    };
    if levels[..structure_at].contains(&Similarity::OpKind) {
        return Err(param("op_kind cannot be ranked above structure"));
    }
    let idx: Vec<usize> = (0..buffer.tasks.len()).collect();
    let mut order = Vec::with_capacity(idx.len());
    group(buffer, &levels, idx, &mut order);
    let tasks = order
        .into_iter()
        .map(|i| {
            let (t, key) = &buffer.tasks[i];
            PlannedTask {
                submitted: i,
                op_kind: t.op_kind,
                key: *key,
                entry: buffer.entry(*key).expect("every key has an entry").clone(),
            }
        })
        .collect();
    Ok(ExecutionPlan { tasks, cache: buffer.entries.clone() })
}

#[derive(PartialEq, Eq, Hash)]
enum LevelKey {
    Shape(BlockShape),
    Dims(usize, usize),
    Structure(StructureKey),
    Op(OpKind),
}

fn group(buffer: &TaskBuffer, levels: &[Similarity], idx: Vec<usize>, out: &mut Vec<usize>) {
    let Some((level, rest)) = levels.split_first() else {
        out.extend(idx);
        return;
    };
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut seen: HashMap<LevelKey, usize> = HashMap::new();
    for i in idx {
        let (t, key) = &buffer.tasks[i];
        let k = match level {
            Similarity::BlockShape => LevelKey::Shape(t.structure.block),
            Similarity::Dims => LevelKey::Dims(t.structure.rows, t.structure.cols),
            Similarity::Structure => LevelKey::Structure(*key),
            Similarity::OpKind => LevelKey::Op(t.op_kind),
        };
        let g = *seen.entry(k).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    for g in groups {
        group(buffer, rest, g, out);
    }
}

/// Trials per candidate in [`select_kernel_config`].
pub const TRIALS: usize = 3;

/// Outcome of a measured configuration search.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub config: KernelConfig,
    /// `(candidate, median seconds)` in candidate order; empty on fallback.
    pub measurements: Vec<(KernelConfig, f64)>,
    pub fell_back: bool,
}

/// The fixed candidate set, fallback first.
///
/// Column panels: full width, and the widest power of two whose output
/// panel for one block-row plus one operand row fits in half the cache.
/// Grains: an even split over the cores, and four times finer.
pub fn candidates(s: &Structure, p: &HardwareProfile) -> Vec<KernelConfig> {
    let block_rows = s.indptr.len().saturating_sub(1).max(1);
    let cores = p.core_count.max(1);
    let budget = p.cache_bytes / 2 / std::mem::size_of::<f32>() / (s.block.rows + 1);
    let cache_panel = if budget >= 16 { 1usize << budget.ilog2().min(12) } else { 16 };
    let mut out = Vec::new();
    for panel in [0, cache_panel] {
        for grain in [block_rows.div_ceil(cores), block_rows.div_ceil(4 * cores)] {
            let c = KernelConfig { col_panel: panel, grain_block_rows: grain.max(1), threads: cores };
            if !out.contains(&c) {
                out.push(c);
            }
        }
    }
    out
}

/// Noise bound used to break ties between candidate medians.
pub fn noise_bound(min_median: f64) -> f64 {
    0.05 * min_median + 2e-6
}

/// First candidate (in order) whose median is within the noise bound of the
/// fastest. `None` when `measurements` is empty or non-finite.
pub fn select_from_measurements(measurements: &[(KernelConfig, f64)]) -> Option<KernelConfig> {
    let min = measurements.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    let bound = noise_bound(min);
    measurements.iter().find(|m| m.1 <= min + bound).map(|m| m.0)
}

/// Times each candidate of [`candidates`] on a synthetic matrix with the
/// given structure (all stored values 1) times a `rhs_cols`-wide operand.
/// Trials run serially. Falls back to [`KernelConfig::fallback`] when the
/// structure cannot be instantiated or nothing could be measured.
pub fn select_kernel_config(s: &Structure, p: &HardwareProfile, rhs_cols: usize) -> Selection {
    let fallback = Selection { config: fallback_for(s, p), measurements: Vec::new(), fell_back: true };
    if p.validate().is_err() {
        return fallback;
    }
    let Ok(a) = instantiate::<f32>(s) else {
        return fallback;
    };
    let b = DenseMatrix::new(s.cols, rhs_cols.max(1), vec![1.0f32; s.cols * rhs_cols.max(1)])
        .expect("sizes agree");
    let mut measurements = Vec::new();
    for cfg in candidates(s, p) {
        let mut times = Vec::with_capacity(TRIALS);
        for _ in 0..TRIALS {
            let t0 = Instant::now();
            let r = spmm_with(&a, &b, KernelPath::Vectorized, &cfg);
            let dt = t0.elapsed().as_secs_f64();
            if r.is_err() {
                return fallback;
            }
            std::hint::black_box(r.ok());
            times.push(dt);
        }
        times.sort_by(f64::total_cmp);
        measurements.push((cfg, times[TRIALS / 2]));
    }
    match select_from_measurements(&measurements) {
        Some(config) => Selection { config, measurements, fell_back: false },
        None => fallback,
    }
}

/// A matrix with structure `s` and every stored entry (padding aside) 1.
pub fn instantiate<T: Scalar>(s: &Structure) -> Result<BsrMatrix<T>> {
    let area = s.block.area();
    let mut data = vec![T::one(); s.indices.len() * area];
    let grid = crate::block::BlockGrid::new(s.rows, s.cols, s.block, true)?;
    for br in 0..s.indptr.len().saturating_sub(1) {
        let lo = s.indptr[br] as usize;
        let hi = (s.indptr[br + 1] as usize).min(s.indices.len());
        for p in lo..hi {
            let bc = s.indices[p] as usize;
            let real_r = grid.row_range(br).len();
            let real_c = grid.col_range(bc.min(grid.block_cols.saturating_sub(1))).len();
            for i in 0..s.block.rows {
                for j in 0..s.block.cols {
                    if i >= real_r || j >= real_c {
                        data[p * area + i * s.block.cols + j] = T::zero();
                    }
                }
            }
        }
    }
    BsrMatrix::from_parts(s.rows, s.cols, s.block, s.indptr.clone(), s.indices.clone(), data)
}
