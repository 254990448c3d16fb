//! Benchmark runner: builds an index, replays a workload and collects
//! per-operation block counts, bound checks and reports.

pub mod cost;
pub mod report;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use cost::{cost_bound, is_amortized, BoundParams, OpKind, SLACK};

use crate::alex::{Alex, AlexConfig, AlexLayout};
use crate::blockstore::{IoContext, IoStats, Phase, PhaseIo};
use crate::bptree::{BPlusTree, BTreeConfig};
use crate::error::{Error, Result};
use crate::fiting::{FitingConfig, FitingTree};
use crate::lipp::{Lipp, LippConfig};
use crate::pgm::{DynamicPgm, PgmConfig};
use crate::workload::{make_workload, Dataset, Op, Workload, WorkloadKind, WorkloadSpec};
use crate::{IndexKind, OrderedIndex, Record};

/// Tunables of the individual indexes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexParams {
    /// Bulk fill of B+-tree nodes (also FITing-tree's inner tree).
    pub fill: f64,
    /// Leaf error bound of FITing-tree and PGM.
    pub epsilon: u64,
    pub fiting_buffer: usize,
    pub pgm_inner_epsilon: u64,
    pub alex_layout: AlexLayout,
    pub alex_density: (f64, f64, f64),
    pub lipp_rebuild_ratio: f64,
}

impl Default for IndexParams {
    fn default() -> Self {
        IndexParams {
            fill: 0.8,
            epsilon: 64,
            fiting_buffer: 256,
            pgm_inner_epsilon: 4,
            alex_layout: AlexLayout::Separate,
            alex_density: (0.6, 0.7, 0.8),
            lipp_rebuild_ratio: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub index: IndexKind,
    pub workload: WorkloadKind,
    pub block_size: usize,
    pub buffer_capacity: usize,
    /// Inner structure memory-resident; only leaf-side I/O is counted.
    pub hybrid: bool,
    /// Fraction of the full-size operation counts.
    pub scale: f64,
    pub seed: u64,
    pub params: IndexParams,
}

impl RunConfig {
    pub fn new(index: IndexKind, workload: WorkloadKind) -> Self {
        RunConfig {
            index,
            workload,
            block_size: 4096,
            buffer_capacity: 0,
            hybrid: false,
            scale: 0.01,
            seed: 42,
            params: IndexParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hybrid && self.index == IndexKind::Lipp {
            return Err(Error::Config("hybrid mode is not defined for LIPP".into()));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config("scale must be positive".into()));
        }
        Ok(())
    }

    pub fn workload_spec(&self, ds: &Dataset) -> WorkloadSpec {
        WorkloadSpec::scaled(self.workload, ds.len(), self.scale, self.seed)
    }
}

/// Bulk loads `records` into a fresh index of `kind` at `path`.
pub fn build_index(
    kind: IndexKind,
    path: &Path,
    records: &[Record],
    block_size: usize,
    params: &IndexParams,
    ctx: &IoContext,
) -> Result<Box<dyn OrderedIndex>> {
    let buffer_capacity = ctx.buffer_capacity();
    Ok(match kind {
        IndexKind::BPlusTree => {
            let cfg = BTreeConfig { block_size, buffer_capacity, fill: params.fill };
            Box::new(BPlusTree::bulk_load_in(path, records, &cfg, ctx)?)
        }
        IndexKind::Fiting => {
            let cfg = FitingConfig {
                block_size,
                buffer_capacity,
                epsilon: params.epsilon,
                buffer_size: params.fiting_buffer,
                inner_fill: params.fill,
            };
            Box::new(FitingTree::bulk_load_in(path, records, &cfg, ctx)?)
        }
        IndexKind::Pgm => {
            let cfg = PgmConfig {
                block_size,
                buffer_capacity,
                epsilon: params.epsilon,
                inner_epsilon: params.pgm_inner_epsilon,
                ..Default::default()
            };
            Box::new(DynamicPgm::bulk_load_in(path, records, &cfg, ctx)?)
        }
        IndexKind::Alex => {
            let (lower, initial, upper) = params.alex_density;
            let cfg = AlexConfig {
                block_size,
                buffer_capacity,
                layout: params.alex_layout,
                lower_density: lower,
                initial_density: initial,
                upper_density: upper,
                ..Default::default()
            };
            Box::new(Alex::bulk_load_in(path, records, &cfg, ctx)?)
        }
        IndexKind::Lipp => {
            let cfg = LippConfig { block_size, buffer_capacity, rebuild_ratio: params.lipp_rebuild_ratio };
            Box::new(Lipp::bulk_load_in(path, records, &cfg, ctx)?)
        }
    })
}

/// Cost of one replayed operation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpCost {
    pub kind: OpKind,
    pub io: IoStats,
    pub phases: [PhaseIo; 4],
    pub nanos: u64,
    /// Lookup found nothing, or a scan did not start at its key.
    pub miss: bool,
}

fn op_kind(op: &Op) -> OpKind {
    match op {
        Op::Lookup(_) => OpKind::Lookup,
        Op::Scan(..) => OpKind::Scan,
        Op::Insert(..) => OpKind::Insert,
    }
}

fn phase_delta(a: [PhaseIo; 4], b: [PhaseIo; 4]) -> [PhaseIo; 4] {
    std::array::from_fn(|i| a[i] - b[i])
}

/// Runs `ops` against `index`, calling `each` after every operation.
pub fn replay(
    index: &mut dyn OrderedIndex,
    ops: &[Op],
    mut each: impl FnMut(usize, &Op, &OpCost, &dyn OrderedIndex) -> Result<()>,
) -> Result<()> {
    for (i, op) in ops.iter().enumerate() {
        let (io0, ph0) = (index.io().stats(), index.io().phase_io());
        let t = Instant::now();
        let miss = match *op {
            Op::Lookup(k) => index.lookup(k)?.is_none(),
            Op::Insert(k, p) => {
                index.insert(k, p)?;
                false
            }
            Op::Scan(k, n) => index.scan(k, n)?.first().is_none_or(|r| r.key != k),
        };
        let nanos = t.elapsed().as_nanos() as u64;
        let cost = OpCost {
            kind: op_kind(op),
            io: index.io().stats() - io0,
            phases: phase_delta(index.io().phase_io(), ph0),
            nanos,
            miss,
        };
        each(i, op, &cost, index)?;
    }
    Ok(())
}

/// Per-operation-kind aggregates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpMetrics {
    pub count: u64,
    pub misses: u64,
    pub blocks_read: u64,
    pub blocks_written: u64,
    pub inner_blocks_read: u64,
    pub avg_blocks_read: f64,
    pub avg_blocks_written: f64,
    pub p50_blocks_read: u64,
    pub p99_blocks_read: u64,
    pub max_blocks_read: u64,
    /// Blocks read plus written: the machine-independent latency unit.
    pub p99_cost: u64,
    pub cost_std: f64,
    pub p99_latency_us: f64,
    pub latency_std_us: f64,
}

/// Average blocks per insert in each step of an insert.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub phase: String,
    pub avg_blocks_read: f64,
    pub avg_blocks_written: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub index: IndexKind,
    pub workload: WorkloadKind,
    pub dataset: String,
    pub block_size: usize,
    pub buffer_capacity: usize,
    pub hybrid: bool,
    pub seed: u64,
    pub bulk_count: u64,
    pub op_count: u64,
    pub ops: BTreeMap<String, OpMetrics>,
    pub phases: Vec<PhaseMetrics>,
    pub storage_bytes: u64,
    pub pinned_bytes: u64,
    pub smo_count: u64,
    pub height: u32,
    pub items: u64,
    pub build_secs: f64,
    pub ops_per_sec: f64,
}

impl Metrics {
    /// Block counters only, for reproducibility comparisons.
    pub fn counters(&self) -> Vec<(String, u64, u64, u64, u64)> {
        let mut v: Vec<_> = self
            .ops
            .iter()
            .map(|(k, m)| (k.clone(), m.count, m.blocks_read, m.blocks_written, m.p99_cost))
            .collect();
        v.push(("storage".into(), self.storage_bytes, self.smo_count, self.items, self.height as u64));
        v
    }

    pub fn op(&self, kind: OpKind) -> Option<&OpMetrics> {
        self.ops.get(kind.name())
    }
}

fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

fn percentile_f(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

fn std_dev(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    (xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt()
}

fn aggregate(costs: &[OpCost]) -> OpMetrics {
    let n = costs.len() as u64;
    if n == 0 {
        return OpMetrics::default();
    }
    let mut reads: Vec<u64> = costs.iter().map(|c| c.io.blocks_read).collect();
    reads.sort_unstable();
    let mut units: Vec<u64> = costs.iter().map(|c| c.io.blocks_read + c.io.blocks_written).collect();
    units.sort_unstable();
    let mut lat: Vec<f64> = costs.iter().map(|c| c.nanos as f64 / 1000.0).collect();
    lat.sort_by(f64::total_cmp);
    let blocks_read = reads.iter().sum::<u64>();
    let blocks_written = costs.iter().map(|c| c.io.blocks_written).sum::<u64>();
    OpMetrics {
        count: n,
        misses: costs.iter().filter(|c| c.miss).count() as u64,
        blocks_read,
        blocks_written,
        inner_blocks_read: costs.iter().map(|c| c.io.inner_blocks_read).sum(),
        avg_blocks_read: blocks_read as f64 / n as f64,
        avg_blocks_written: blocks_written as f64 / n as f64,
        p50_blocks_read: percentile(&reads, 0.5),
        p99_blocks_read: percentile(&reads, 0.99),
        max_blocks_read: *reads.last().unwrap(),
        p99_cost: percentile(&units, 0.99),
        cost_std: std_dev(units.iter().map(|&u| u as f64)),
        p99_latency_us: percentile_f(&lat, 0.99),
        latency_std_us: std_dev(lat.iter().copied()),
    }
}

/// A built index and the workload it will replay.
pub struct Prepared {
    pub index: Box<dyn OrderedIndex>,
    pub workload: Workload,
    pub build_secs: f64,
}

/// Generates the workload, bulk loads the index under `dir` and resets the
/// counters and buffer.
pub fn prepare(cfg: &RunConfig, ds: &Dataset, dir: &Path) -> Result<Prepared> {
    cfg.validate()?;
    let workload = make_workload(&cfg.workload_spec(ds), ds)?;
    let ctx = IoContext::new(cfg.buffer_capacity);
    let t = Instant::now();
    let index = build_index(cfg.index, &dir.join(cfg.index.name()), &workload.bulk, cfg.block_size, &cfg.params, &ctx)?;
    let build_secs = t.elapsed().as_secs_f64();
    ctx.set_hybrid(cfg.hybrid);
    ctx.set_phase(Phase::Search);
    ctx.clear_buffer();
    ctx.reset_stats();
    Ok(Prepared { index, workload, build_secs })
}

/// Replays `cfg` over `ds`, with index files under `dir`.
pub fn run(cfg: &RunConfig, ds: &Dataset, dir: &Path) -> Result<Metrics> {
    let Prepared { mut index, workload, build_secs } = prepare(cfg, ds, dir)?;
    let mut costs: Vec<OpCost> = Vec::with_capacity(workload.ops.len());
    let t = Instant::now();
    replay(index.as_mut(), &workload.ops, |_, _, c, _| {
        costs.push(*c);
        Ok(())
    })?;
    let secs = t.elapsed().as_secs_f64();
    let mut ops = BTreeMap::new();
    for kind in OpKind::ALL {
        let of: Vec<OpCost> = costs.iter().filter(|c| c.kind == kind).copied().collect();
        if !of.is_empty() {
            ops.insert(kind.name().to_string(), aggregate(&of));
        }
    }
    let inserts: Vec<&OpCost> = costs.iter().filter(|c| c.kind == OpKind::Insert).collect();
    let phases = if inserts.is_empty() {
        Vec::new()
    } else {
        Phase::ALL
            .iter()
            .enumerate()
            .map(|(i, p)| PhaseMetrics {
                phase: p.name().to_string(),
                avg_blocks_read: inserts.iter().map(|c| c.phases[i].blocks_read).sum::<u64>() as f64 / inserts.len() as f64,
                avg_blocks_written: inserts.iter().map(|c| c.phases[i].blocks_written).sum::<u64>() as f64
                    / inserts.len() as f64,
            })
            .collect()
    };
    let shape = index.shape();
    Ok(Metrics {
        index: cfg.index,
        workload: cfg.workload,
        dataset: ds.name.clone(),
        block_size: cfg.block_size,
        buffer_capacity: cfg.buffer_capacity,
        hybrid: cfg.hybrid,
        seed: cfg.seed,
        bulk_count: workload.bulk.len() as u64,
        op_count: workload.ops.len() as u64,
        ops,
        phases,
        storage_bytes: index.storage_bytes(),
        pinned_bytes: shape.pinned_bytes,
        smo_count: index.smo_count(),
        height: shape.height,
        items: index.len(),
        build_secs,
        ops_per_sec: if secs > 0.0 { costs.len() as f64 / secs } else { 0.0 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub op_index: usize,
    pub op: String,
    pub key: u64,
    pub blocks_read: u64,
    pub bound: u64,
    pub params: BoundParams,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub checked: u64,
    /// Largest blocks_read minus bound seen (negative when every op is under).
    pub worst_margin: i64,
    pub violations: Vec<Violation>,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Replays `cfg` checking every operation's blocks_read against its bound
/// plus [`SLACK`]. Amortized bounds are checked on the running average of
/// that operation kind.
pub fn verify_bounds(cfg: &RunConfig, ds: &Dataset, dir: &Path) -> Result<BoundReport> {
    let Prepared { mut index, workload, .. } = prepare(cfg, ds, dir)?;
    let mut report = BoundReport { worst_margin: i64::MIN, ..Default::default() };
    let mut totals: BTreeMap<&'static str, (u64, u64)> = BTreeMap::new();
    let kind = cfg.index;
    replay(index.as_mut(), &workload.ops, |i, op, c, idx| {
        let z = match op {
            Op::Scan(_, n) => *n as u64,
            _ => 0,
        };
        let params = BoundParams::of(kind, &idx.shape(), cfg.block_size, cfg.params.fill, cfg.params.epsilon, z);
        let bound = cost_bound(kind, c.kind, &params) + SLACK;
        let measured = if is_amortized(kind, c.kind) {
            let t = totals.entry(c.kind.name()).or_default();
            t.0 += c.io.blocks_read;
            t.1 += 1;
            t.0.div_ceil(t.1)
        } else {
            c.io.blocks_read
        };
        report.checked += 1;
        report.worst_margin = report.worst_margin.max(measured as i64 - bound as i64);
        if measured > bound {
            let key = match *op {
                Op::Lookup(k) | Op::Insert(k, _) | Op::Scan(k, _) => k,
            };
            report.violations.push(Violation {
                op_index: i,
                op: c.kind.name().into(),
                key,
                blocks_read: measured,
                bound,
                params,
            });
        }
        Ok(())
    })?;
    Ok(report)
}
