//! Disk-resident ordered indexes over an instrumented block store.
//!
//! Five indexes share one storage layer and one interface: a B+-tree and the
//! learned indexes FITing-tree, PGM, ALEX and LIPP. Every block transfer is
//! counted, which makes block counts the portable performance metric.
//!
//! ```
//! use diskidx::{BPlusTree, BTreeConfig, OrderedIndex, Record};
//!
//! let dir = tempfile::tempdir()?;
//! let records: Vec<Record> = (0..10_000u64).map(|k| Record::from_key(k * 3)).collect();
//! let mut t = BPlusTree::bulk_load(dir.path().join("demo.idx"), &records, &BTreeConfig::default())?;
//! t.insert(7, 8)?;
//! assert_eq!(t.lookup(7)?, Some(8));
//! assert!(t.io().stats().blocks_read > 0);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod alex;
pub mod bench;
pub mod blockstore;
pub mod bptree;
pub mod error;
pub mod fiting;
pub mod lipp;
pub mod model;
pub mod pgm;
pub mod workload;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use alex::{Alex, AlexConfig, AlexLayout};
pub use blockstore::{Access, BlockStore, DiskAddr, IoContext, IoStats, Phase, PhaseIo};
pub use bptree::{BPlusTree, BTreeConfig};
pub use error::{Error, Result};
pub use fiting::{FitingConfig, FitingTree};
pub use lipp::{Lipp, LippConfig};
pub use model::{LinearModel, SegmentSpec};
pub use pgm::{DynamicPgm, PgmConfig};

/// A key with its payload. Keys are unique within an index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Record {
    pub key: u64,
    pub payload: u64,
}

impl Record {
    pub const ENCODED_LEN: usize = 16;

    pub fn new(key: u64, payload: u64) -> Self {
        Record { key, payload }
    }

    /// The benchmark convention: payload is the key plus one.
    pub fn from_key(key: u64) -> Self {
        Record { key, payload: key.wrapping_add(1) }
    }

    pub fn to_bytes(self) -> [u8; 16] {
        let mut b = [0u8; 16];
        b[..8].copy_from_slice(&self.key.to_le_bytes());
        b[8..].copy_from_slice(&self.payload.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Self {
        Record {
            key: u64::from_le_bytes(b[..8].try_into().unwrap()),
            payload: u64::from_le_bytes(b[8..16].try_into().unwrap()),
        }
    }
}

pub(crate) fn check_sorted_records(records: &[Record]) -> Result<()> {
    if let Some(w) = records.windows(2).find(|w| w[0].key >= w[1].key) {
        return Err(Error::Input(format!("records not strictly increasing at key {}", w[1].key)));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    #[serde(rename = "bptree")]
    BPlusTree,
    Fiting,
    Pgm,
    Alex,
    Lipp,
}

impl IndexKind {
    pub const ALL: [IndexKind; 5] =
        [IndexKind::BPlusTree, IndexKind::Fiting, IndexKind::Pgm, IndexKind::Alex, IndexKind::Lipp];

    pub fn name(self) -> &'static str {
        match self {
            IndexKind::BPlusTree => "bptree",
            IndexKind::Fiting => "fiting",
            IndexKind::Pgm => "pgm",
            IndexKind::Alex => "alex",
            IndexKind::Lipp => "lipp",
        }
    }

    pub fn is_learned(self) -> bool {
        self != IndexKind::BPlusTree
    }
}

impl fmt::Display for IndexKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IndexKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        IndexKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown index kind {s:?}")))
    }
}

/// Structural numbers an index reports for cost-bound evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexShape {
    pub items: u64,
    /// Levels from root to leaf inclusive (the deepest path for unbalanced trees).
    pub height: u32,
    /// Leaf segment count (FITing-tree) or per-run segment counts summed (PGM).
    pub segments: u64,
    /// Largest data-node or segment item count.
    pub max_node_items: u64,
    /// Item counts of the live PGM runs.
    pub run_sizes: Vec<u64>,
    /// Bytes of the structure pinned in memory in hybrid mode.
    pub pinned_bytes: u64,
}

/// Common interface of every index in the crate.
pub trait OrderedIndex {
    fn kind(&self) -> IndexKind;
    fn lookup(&mut self, key: u64) -> Result<Option<u64>>;
    /// Inserts or overwrites.
    fn insert(&mut self, key: u64, payload: u64) -> Result<()>;
    /// Up to `count` records with key ≥ `start`, ascending.
    fn scan(&mut self, start: u64, count: usize) -> Result<Vec<Record>>;
    fn len(&self) -> u64;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn io(&self) -> &IoContext;
    fn storage_bytes(&self) -> u64;
    fn smo_count(&self) -> u64;
    fn shape(&self) -> IndexShape;
}
