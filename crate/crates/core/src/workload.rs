//! Datasets, profiling and workload generation.
//!
//! Datasets are sorted unique u64 keys, read from SOSD binary files or
//! generated. A workload is a bulk-load set plus a deterministic operation
//! stream; both are pure functions of the dataset, spec and seed.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fmcd_fit, optimal_pla};
use crate::{bptree, lipp, Record};

/// Keys of a dataset; strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub keys: Vec<u64>,
}

impl Dataset {
    /// Sorts and deduplicates `keys`.
    pub fn new(name: impl Into<String>, mut keys: Vec<u64>) -> Self {
        keys.sort_unstable();
        keys.dedup();
        Dataset { name: name.into(), keys }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn records(&self) -> Vec<Record> {
        self.keys.iter().map(|&k| Record::from_key(k)).collect()
    }
}

/// Reads an SOSD file: a little-endian u64 count followed by that many
/// little-endian u64 keys.
pub fn load_sosd(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(|_| Error::Format(format!("{}: missing count header", path.display())))?;
    let count = u64::from_le_bytes(head);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if (bytes.len() as u64) < count.saturating_mul(8) {
        return Err(Error::Format(format!(
            "{}: header says {count} keys, file holds {}",
            path.display(),
            bytes.len() / 8
        )));
    }
    let keys = bytes.chunks_exact(8).take(count as usize).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    let name = path.file_stem().map_or_else(|| "sosd".into(), |s| s.to_string_lossy().into_owned());
    Ok(Dataset::new(name, keys))
}

pub fn write_sosd(path: impl AsRef<Path>, keys: &[u64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(keys.len() as u64).to_le_bytes())?;
    for k in keys {
        w.write_all(&k.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distribution {
    Uniform,
    /// Lognormal(0, 2) scaled by 10^9: dense at the low end with a long tail.
    Lognormal,
    /// Piecewise-linear keys with per-piece spacing and sub-spacing jitter.
    SegmentedLinear { pieces: usize },
    /// Gaps whose log is a sum of Normal(0, 1) terms held constant over runs
    /// of 4, 16, 64, 256 and 1024 keys: density bursts at every scale, so
    /// segment counts fall off roughly linearly in ε.
    Bursty,
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distribution::Uniform => write!(f, "uniform"),
            Distribution::Lognormal => write!(f, "lognormal"),
            Distribution::SegmentedLinear { pieces } => write!(f, "segmented/{pieces}"),
            Distribution::Bursty => write!(f, "bursty"),
        }
    }
}

/// Generates `n` sorted unique keys, all below u64::MAX.
pub fn gen_synthetic(dist: Distribution, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = format!("{dist}-{n}");
    let keys = match dist {
        Distribution::Uniform => fill_unique(n, &mut rng, |r| r.random_range(0..u64::MAX - 1)),
        Distribution::Lognormal => {
            let d: LogNormal<f64> = LogNormal::new(0.0, 2.0).unwrap();
            fill_unique(n, &mut rng, |r| (d.sample(r) * 1e9).min(1.8e19) as u64)
        }
        Distribution::SegmentedLinear { pieces } => segmented(n, pieces.max(1), &mut rng),
        Distribution::Bursty => bursty(n, &mut rng),
    };
    Dataset { name, keys }
}

fn fill_unique(n: usize, rng: &mut ChaCha8Rng, mut draw: impl FnMut(&mut ChaCha8Rng) -> u64) -> Vec<u64> {
    let mut keys: Vec<u64> = Vec::with_capacity(n);
    while keys.len() < n {
        let missing = n - keys.len();
        keys.extend((0..missing).map(|_| draw(rng)));
        keys.sort_unstable();
        keys.dedup();
    }
    keys
}

fn segmented(n: usize, pieces: usize, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let mut keys = Vec::with_capacity(n);
    let mut base = 0u64;
    for p in 0..pieces {
        let m = n / pieces + usize::from(p < n % pieces);
        let gap: u64 = 1 << rng.random_range(1..24);
        for i in 0..m as u64 {
            keys.push(base + i * gap + rng.random_range(0..gap / 2));
        }
        base += m as u64 * gap + rng.random_range(gap..gap << 10);
    }
    keys
}

const BURST_SCALES: usize = 5;

fn bursty(n: usize, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let z = Normal::new(0.0, 1.0).unwrap();
    let mut noise = [0.0f64; BURST_SCALES];
    let mut pos = Vec::with_capacity(n);
    let mut at = 0.0f64;
    for i in 0..n {
        for (l, v) in noise.iter_mut().enumerate() {
            if i % (4 << (2 * l)) == 0 {
                *v = z.sample(rng);
            }
        }
        at += noise.iter().sum::<f64>().exp();
        pos.push(at);
    }
    // Spread over [0, 10^15); the smallest gaps stay far above one unit.
    let scale = 1e15 / at.max(1.0);
    let mut keys: Vec<u64> = pos.iter().map(|&x| (x * scale) as u64).collect();
    keys.dedup();
    keys
}

/// Parses `uniform:N`, `lognormal:N`, `bursty:N` or `segmented:N[:PIECES]`. `N` accepts
/// `k` and `m` suffixes.
pub fn parse_synthetic(spec: &str) -> Result<(Distribution, usize)> {
    let mut parts = spec.split(':');
    let bad = || Error::Config(format!("bad synthetic dataset '{spec}'"));
    let kind = parts.next().ok_or_else(bad)?;
    let n = parse_count(parts.next().ok_or_else(bad)?).ok_or_else(bad)?;
    let dist = match kind {
        "uniform" => Distribution::Uniform,
        "lognormal" => Distribution::Lognormal,
        "bursty" => Distribution::Bursty,
        "segmented" | "segmented-linear" => {
            let pieces = parts.next().map_or(Some(64), parse_count).ok_or_else(bad)?;
            Distribution::SegmentedLinear { pieces }
        }
        _ => return Err(bad()),
    };
    if parts.next().is_some() {
        return Err(bad());
    }
    Ok((dist, n))
}

fn parse_count(s: &str) -> Option<usize> {
    let s = s.to_ascii_lowercase();
    let (num, mul) = match s.as_bytes().last()? {
        b'k' => (&s[..s.len() - 1], 1_000),
        b'm' => (&s[..s.len() - 1], 1_000_000),
        _ => (&s[..], 1),
    };
    num.parse::<usize>().ok().map(|v| v * mul)
}

/// Loads `synthetic:SPEC` or an SOSD file path.
pub fn load_dataset(source: &str, seed: u64) -> Result<Dataset> {
    match source.strip_prefix("synthetic:") {
        Some(spec) => {
            let (dist, n) = parse_synthetic(spec)?;
            Ok(gen_synthetic(dist, n, seed))
        }
        None => load_sosd(source),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub dataset: String,
    pub keys: u64,
    /// (ε, optimal segment count) per requested error bound.
    pub segments: Vec<(u64, u64)>,
    /// Conflict degree of an FMCD model over all keys with LIPP's slot budget.
    pub conflict_degree: u64,
    pub bptree_leaves: u64,
}

pub fn profile(ds: &Dataset, errors: &[u64], block_size: usize) -> Result<Profile> {
    let segments = errors
        .iter()
        .map(|&e| Ok((e, optimal_pla(&ds.keys, e)?.len() as u64)))
        .collect::<Result<Vec<_>>>()?;
    let (_, degree) = fmcd_fit(&ds.keys, lipp::slot_budget(ds.len()))?;
    Ok(Profile {
        dataset: ds.name.clone(),
        keys: ds.len() as u64,
        segments,
        conflict_degree: degree as u64,
        bptree_leaves: bptree::bulk_leaf_count(ds.len() as u64, block_size, 0.8),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WorkloadKind {
    LookupOnly,
    ScanOnly,
    WriteOnly,
    ReadHeavy,
    WriteHeavy,
    Balanced,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 6] = [
        WorkloadKind::LookupOnly,
        WorkloadKind::ScanOnly,
        WorkloadKind::WriteOnly,
        WorkloadKind::ReadHeavy,
        WorkloadKind::WriteHeavy,
        WorkloadKind::Balanced,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::LookupOnly => "lookup",
            WorkloadKind::ScanOnly => "scan",
            WorkloadKind::WriteOnly => "write",
            WorkloadKind::ReadHeavy => "read-heavy",
            WorkloadKind::WriteHeavy => "write-heavy",
            WorkloadKind::Balanced => "balanced",
        }
    }

    /// Inserts and lookups per 20-op cycle, for the mixed workloads.
    pub fn cycle(self) -> Option<(usize, usize)> {
        match self {
            WorkloadKind::ReadHeavy => Some((2, 18)),
            WorkloadKind::WriteHeavy => Some((18, 2)),
            WorkloadKind::Balanced => Some((10, 10)),
            _ => None,
        }
    }

    /// Whether the bulk load is the whole dataset.
    pub fn loads_everything(self) -> bool {
        matches!(self, WorkloadKind::LookupOnly | WorkloadKind::ScanOnly)
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorkloadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WorkloadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown workload '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub bulkload_count: usize,
    pub op_count: usize,
    /// Records returned per scan, start key included.
    pub scan_length: usize,
    pub seed: u64,
}

/// Full-size counts: 200k read queries over a full load, or 10M operations
/// after a 10M-key load.
pub const READ_QUERIES: usize = 200_000;
pub const WRITE_BULK: usize = 10_000_000;
pub const WRITE_OPS: usize = 10_000_000;

impl WorkloadSpec {
    /// Counts scaled by `scale` for a dataset of `dataset_len` keys.
    pub fn scaled(kind: WorkloadKind, dataset_len: usize, scale: f64, seed: u64) -> Self {
        let s = |v: usize| ((v as f64 * scale).round() as usize).max(1);
        let (bulkload_count, op_count) = if kind.loads_everything() {
            (dataset_len, s(READ_QUERIES))
        } else {
            (s(WRITE_BULK), s(WRITE_OPS))
        };
        WorkloadSpec { kind, bulkload_count, op_count, scan_length: 100, seed }
    }

    /// Keys the dataset must hold.
    pub fn keys_needed(&self) -> usize {
        match self.kind {
            WorkloadKind::LookupOnly | WorkloadKind::ScanOnly => self.bulkload_count,
            WorkloadKind::WriteOnly => self.bulkload_count + self.op_count,
            k => {
                let (ins, _) = k.cycle().unwrap();
                self.bulkload_count + self.inserts_in(ins)
            }
        }
    }

    fn inserts_in(&self, per_cycle: usize) -> usize {
        let full = self.op_count / 20;
        full * per_cycle + (self.op_count % 20).min(per_cycle)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Lookup(u64),
    Insert(u64, u64),
    Scan(u64, usize),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Lookup(_) => "lookup",
            Op::Insert(..) => "insert",
            Op::Scan(..) => "scan",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Workload {
    pub spec: WorkloadSpec,
    /// Sorted records to bulk load.
    pub bulk: Vec<Record>,
    pub ops: Vec<Op>,
}

pub fn make_workload(spec: &WorkloadSpec, ds: &Dataset) -> Result<Workload> {
    let need = spec.keys_needed();
    if need > ds.len() {
        return Err(Error::Capacity(format!(
            "{} workload needs {need} keys, dataset {} has {}",
            spec.kind,
            ds.name,
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<u64> = ds.keys.clone();
    if spec.bulkload_count < ds.len() {
        order.shuffle(&mut rng);
    }
    let (bulk_keys, rest) = order.split_at(spec.bulkload_count);
    let mut bulk_keys = bulk_keys.to_vec();
    bulk_keys.sort_unstable();
    let bulk: Vec<Record> = bulk_keys.iter().map(|&k| Record::from_key(k)).collect();
    let mut ops = Vec::with_capacity(spec.op_count);
    match spec.kind {
        WorkloadKind::LookupOnly | WorkloadKind::ScanOnly => {
            // Distinct keys while they last, then a fresh shuffle.
            let mut pool: Vec<u64> = Vec::new();
            while ops.len() < spec.op_count {
                if pool.is_empty() {
                    pool = bulk_keys.clone();
                    pool.shuffle(&mut rng);
                }
                let k = pool.pop().unwrap();
                ops.push(match spec.kind {
                    WorkloadKind::LookupOnly => Op::Lookup(k),
                    _ => Op::Scan(k, spec.scan_length),
                });
            }
        }
        WorkloadKind::WriteOnly => {
            ops.extend(rest[..spec.op_count].iter().map(|&k| Op::Insert(k, k + 1)));
        }
        kind => {
            let (ins, _) = kind.cycle().unwrap();
            let mut present = bulk_keys;
            let mut fresh = rest.iter();
            for i in 0..spec.op_count {
                if i % 20 < ins {
                    let k = *fresh.next().unwrap();
                    present.push(k);
                    ops.push(Op::Insert(k, k + 1));
                } else {
                    if present.is_empty() {
                        return Err(Error::Capacity("lookup issued on an empty index".into()));
                    }
                    ops.push(Op::Lookup(present[rng.random_range(0..present.len())]));
                }
            }
        }
    }
    Ok(Workload { spec: spec.clone(), bulk, ops })
}

const OP_LOOKUP: u8 = 0x01;
const OP_INSERT: u8 = 0x02;
const OP_SCAN: u8 = 0x03;

/// Writes ops as a flat log: opcode byte then little-endian u64 operands.
pub fn write_ops(w: &mut impl Write, ops: &[Op]) -> Result<()> {
    for op in ops {
        match *op {
            Op::Lookup(k) => {
                w.write_all(&[OP_LOOKUP])?;
                w.write_all(&k.to_le_bytes())?;
            }
            Op::Insert(k, p) => {
                w.write_all(&[OP_INSERT])?;
                w.write_all(&k.to_le_bytes())?;
                w.write_all(&p.to_le_bytes())?;
            }
            Op::Scan(k, n) => {
                w.write_all(&[OP_SCAN])?;
                w.write_all(&k.to_le_bytes())?;
                w.write_all(&(n as u64).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_ops(r: &mut impl Read) -> Result<Vec<Op>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut ops = Vec::new();
    let mut i = 0;
    let word = |at: usize| -> Result<u64> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Format(format!("op log truncated at byte {at}")))
    };
    while i < bytes.len() {
        let (op, len) = match bytes[i] {
            OP_LOOKUP => (Op::Lookup(word(i + 1)?), 9),
            OP_INSERT => (Op::Insert(word(i + 1)?, word(i + 9)?), 17),
            OP_SCAN => (Op::Scan(word(i + 1)?, word(i + 9)? as usize), 17),
            c => return Err(Error::Format(format!("unknown opcode {c:#04x} at byte {i}"))),
        };
        ops.push(op);
        i += len;
    }
    Ok(ops)
}
