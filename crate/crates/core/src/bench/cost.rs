//! Closed-form worst-case block counts per index and operation.
//!
//! N items, B records per block (for the B+-tree, its bulk node fanout), F
//! the bulk fanout of FITing-tree's inner tree, M the largest node or segment
//! in records, P leaf segments, ε the error bound, z the scan length. `log` is base 2. Each fractional term is rounded
//! up on its own.

use serde::{Deserialize, Serialize};

use crate::{bptree, fiting, IndexKind, IndexShape};

/// Additive allowance over every bound.
pub const SLACK: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Lookup,
    Scan,
    Insert,
}

impl OpKind {
    pub const ALL: [OpKind; 3] = [OpKind::Lookup, OpKind::Scan, OpKind::Insert];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Lookup => "lookup",
            OpKind::Scan => "scan",
            OpKind::Insert => "insert",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub n: u64,
    pub b: u64,
    pub fanout: u64,
    pub m: u64,
    pub p: u64,
    pub eps: u64,
    pub z: u64,
}

impl BoundParams {
    /// Parameters of a live index.
    pub fn of(kind: IndexKind, shape: &IndexShape, block_size: usize, fill: f64, eps: u64, z: u64) -> Self {
        let b = match kind {
            IndexKind::BPlusTree => {
                let cap = bptree::inner_capacity(block_size) as f64;
                ((fill * cap).ceil() as u64).max(2)
            }
            _ => (block_size / crate::Record::ENCODED_LEN) as u64,
        };
        let fanout = match kind {
            IndexKind::Fiting => (fiting::inner_fanout(block_size, fill) as u64).max(2),
            _ => b,
        };
        BoundParams { n: shape.items, b, fanout, m: shape.max_node_items, p: shape.segments, eps, z }
    }
}

/// Whether the bound holds per operation or only on average.
pub fn is_amortized(kind: IndexKind, op: OpKind) -> bool {
    kind == IndexKind::Pgm && op == OpKind::Insert
}

fn log2c(x: f64) -> u64 {
    if x <= 1.0 {
        0
    } else {
        x.log2().ceil() as u64
    }
}

fn logc(x: f64, base: f64) -> u64 {
    if x <= 1.0 {
        1
    } else {
        ((x.ln() / base.ln()) - 1e-12).ceil().max(1.0) as u64
    }
}

fn div_c(a: u64, b: u64) -> u64 {
    a.div_ceil(b.max(1))
}

pub fn cost_bound(kind: IndexKind, op: OpKind, p: &BoundParams) -> u64 {
    let n = p.n.max(1) as f64;
    let b = p.b.max(2);
    let log_n = log2c(n);
    let m_over_b = log2c(p.m as f64 / b as f64);
    match (kind, op) {
        (IndexKind::BPlusTree, OpKind::Lookup) => logc(n, b as f64),
        (IndexKind::BPlusTree, OpKind::Scan) => logc(n, b as f64) + div_c(p.z, b),
        (IndexKind::BPlusTree, OpKind::Insert) => 2 * logc(n, b as f64),
        (IndexKind::Alex, OpKind::Lookup) => log_n + m_over_b + 1,
        (IndexKind::Alex, OpKind::Scan) => log_n + m_over_b + 1 + div_c(p.z, b) + 3,
        (IndexKind::Alex, OpKind::Insert) => (1 + div_c(2 * p.m, b)) * log_n + 1 + m_over_b,
        (IndexKind::Fiting, OpKind::Lookup) => logc(p.p as f64, p.fanout as f64) + div_c(2 * p.eps, b),
        (IndexKind::Fiting, OpKind::Scan) => logc(p.p as f64, p.fanout as f64) + div_c(2 * p.eps, b) + div_c(p.z, b),
        (IndexKind::Fiting, OpKind::Insert) => 2 * logc(p.p as f64, p.fanout as f64) + 1 + div_c(2 * p.m, b),
        (IndexKind::Lipp, OpKind::Lookup) => 2 * log_n,
        (IndexKind::Lipp, OpKind::Scan) => 2 * log_n + p.z,
        (IndexKind::Lipp, OpKind::Insert) => (2 + div_c(2 * p.n, b)) * log_n,
        (IndexKind::Pgm, OpKind::Lookup) => log2c(n / b as f64),
        (IndexKind::Pgm, OpKind::Scan) => log2c(n / b as f64) + div_c(p.z, b),
        (IndexKind::Pgm, OpKind::Insert) => log2c(n / b as f64),
    }
}
