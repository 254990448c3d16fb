//! Disk B+-tree: one node per block, dense sorted arrays, linked leaves.
//!
//! [`BTree`] stores fixed-width byte values and is reused as the inner
//! structure of the FITing-tree; [`BPlusTree`] is the standalone index with
//! 8-byte payloads.

use std::path::Path;

use crate::blockstore::{Access, BlockStore, DiskAddr, IoContext, Phase};
use crate::error::{Error, Result};
use crate::{check_sorted_records, IndexKind, IndexShape, OrderedIndex, Record};

const KIND_LEAF: u8 = 0;
const KIND_INNER: u8 = 1;
/// kind (1) + count (2) + left (8) + right (8).
pub const NODE_HEADER: usize = 19;
const META_KIND: u32 = 1;

#[derive(Clone, Debug)]
pub struct BTreeConfig {
    pub block_size: usize,
    pub buffer_capacity: usize,
    /// Fraction of each node filled by bulk loading.
    pub fill: f64,
}

impl Default for BTreeConfig {
    fn default() -> Self {
        BTreeConfig { block_size: 4096, buffer_capacity: 0, fill: 0.8 }
    }
}

pub fn leaf_capacity(block_size: usize, value_width: usize) -> usize {
    (block_size - NODE_HEADER) / (8 + value_width)
}

pub fn inner_capacity(block_size: usize) -> usize {
    (block_size - NODE_HEADER) / 16
}

/// Leaves a bulk load of `n` records with 8-byte payloads produces.
pub fn bulk_leaf_count(n: u64, block_size: usize, fill: f64) -> u64 {
    n.div_ceil(filled(leaf_capacity(block_size, 8), fill) as u64)
}

fn filled(cap: usize, fill: f64) -> usize {
    ((fill * cap as f64).ceil() as usize).clamp(2, cap)
}

#[derive(Clone, Debug)]
struct Node {
    leaf: bool,
    left: DiskAddr,
    right: DiskAddr,
    keys: Vec<u64>,
    // Flat values: `width` bytes each (8 for inner children).
    vals: Vec<u8>,
}

impl Node {
    fn val(&self, i: usize, w: usize) -> &[u8] {
        &self.vals[i * w..(i + 1) * w]
    }

    fn child(&self, i: usize) -> u32 {
        DiskAddr::from_bytes(self.val(i, 8)).block
    }

    // Index of the entry routing `key`: last separator ≤ key, else 0.
    fn route(&self, key: u64) -> usize {
        self.keys.partition_point(|&k| k <= key).saturating_sub(1)
    }
}

/// B+-tree over u64 keys and fixed-width values.
pub struct BTree {
    store: BlockStore,
    width: usize,
    leaf_access: Access,
    fill: f64,
    len: u64,
    height: u32,
    leaves: u64,
    splits: u64,
    track_phases: bool,
}

impl BTree {
    /// Creates an empty tree. `leaf_access` classifies leaf blocks; inner
    /// blocks are always [`Access::Inner`].
    pub fn create(
        path: impl AsRef<Path>,
        block_size: usize,
        ctx: &IoContext,
        width: usize,
        fill: f64,
        leaf_access: Access,
    ) -> Result<Self> {
        if !(fill > 0.0 && fill <= 1.0) {
            return Err(Error::Config(format!("fill factor {fill} outside (0, 1]")));
        }
        let store = BlockStore::open_in(path, block_size, ctx)?;
        if width == 0 || leaf_capacity(block_size, width) < 4 {
            return Err(Error::Config(format!("value width {width} too large for {block_size}-byte blocks")));
        }
        let mut t = BTree { store, width, leaf_access, fill, len: 0, height: 0, leaves: 0, splits: 0, track_phases: true };
        t.store.set_kind(META_KIND);
        t.save_meta()?;
        Ok(t)
    }

    /// Reopens a tree persisted by [`BTree::create`].
    pub fn open(path: impl AsRef<Path>, block_size: usize, ctx: &IoContext, leaf_access: Access) -> Result<Self> {
        let store = BlockStore::open_in(path, block_size, ctx)?;
        let m = store.meta().extra().to_vec();
        if store.meta().kind != META_KIND || m.len() < 40 {
            return Err(Error::Format("not a B+-tree file".into()));
        }
        let u64_at = |o: usize| u64::from_le_bytes(m[o..o + 8].try_into().unwrap());
        Ok(BTree {
            width: u64_at(0) as usize,
            fill: f64::from_le_bytes(m[8..16].try_into().unwrap()),
            len: u64_at(16),
            height: u64_at(24) as u32,
            leaves: u64_at(32),
            splits: 0,
            track_phases: true,
            leaf_access,
            store,
        })
    }

    fn save_meta(&mut self) -> Result<()> {
        let mut m = Vec::with_capacity(40);
        m.extend_from_slice(&(self.width as u64).to_le_bytes());
        m.extend_from_slice(&self.fill.to_le_bytes());
        m.extend_from_slice(&self.len.to_le_bytes());
        m.extend_from_slice(&(self.height as u64).to_le_bytes());
        m.extend_from_slice(&self.leaves.to_le_bytes());
        self.store.set_meta_extra(m)
    }

    /// When off, writes are charged to whatever phase the caller has set.
    pub fn set_phase_tracking(&mut self, on: bool) {
        self.track_phases = on;
    }

    fn phase(&self, p: Phase) {
        if self.track_phases {
            self.store.context().set_phase(p);
        }
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut BlockStore {
        &mut self.store
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn leaf_count(&self) -> u64 {
        self.leaves
    }

    pub fn split_count(&self) -> u64 {
        self.splits
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn leaf_capacity(&self) -> usize {
        leaf_capacity(self.store.block_size(), self.width)
    }

    pub fn inner_capacity(&self) -> usize {
        inner_capacity(self.store.block_size())
    }

    /// Blocks holding inner (non-leaf) nodes.
    pub fn inner_blocks(&self) -> u64 {
        (self.store.allocated() - 1).saturating_sub(self.leaves)
    }

    fn access(&self, leaf: bool) -> Access {
        if leaf {
            self.leaf_access
        } else {
            Access::Inner
        }
    }

    fn read_node(&mut self, block: u32, leaf: bool) -> Result<Node> {
        let access = self.access(leaf);
        let b = self.store.read_block_as(block, access)?;
        self.decode(&b)
    }

    fn decode(&self, b: &[u8]) -> Result<Node> {
        let leaf = match b[0] {
            KIND_LEAF => true,
            KIND_INNER => false,
            k => return Err(Error::Format(format!("bad node kind {k}"))),
        };
        let count = u16::from_le_bytes([b[1], b[2]]) as usize;
        let w = if leaf { self.width } else { 8 };
        let cap = if leaf { self.leaf_capacity() } else { self.inner_capacity() };
        if count > cap {
            return Err(Error::Format(format!("node count {count} exceeds capacity {cap}")));
        }
        let keys_at = NODE_HEADER;
        let vals_at = keys_at + cap * 8;
        let keys = (0..count)
            .map(|i| u64::from_le_bytes(b[keys_at + i * 8..keys_at + i * 8 + 8].try_into().unwrap()))
            .collect();
        Ok(Node {
            leaf,
            left: DiskAddr::from_bytes(&b[3..11]),
            right: DiskAddr::from_bytes(&b[11..19]),
            keys,
            vals: b[vals_at..vals_at + count * w].to_vec(),
        })
    }

    fn encode(&self, n: &Node) -> Vec<u8> {
        let bs = self.store.block_size();
        let cap = if n.leaf { self.leaf_capacity() } else { self.inner_capacity() };
        let mut b = vec![0u8; bs];
        b[0] = if n.leaf { KIND_LEAF } else { KIND_INNER };
        b[1..3].copy_from_slice(&(n.keys.len() as u16).to_le_bytes());
        b[3..11].copy_from_slice(&n.left.to_bytes());
        b[11..19].copy_from_slice(&n.right.to_bytes());
        for (i, k) in n.keys.iter().enumerate() {
            b[NODE_HEADER + i * 8..NODE_HEADER + i * 8 + 8].copy_from_slice(&k.to_le_bytes());
        }
        let vals_at = NODE_HEADER + cap * 8;
        b[vals_at..vals_at + n.vals.len()].copy_from_slice(&n.vals);
        b
    }

    fn write_node(&mut self, block: u32, n: &Node) -> Result<()> {
        let bytes = self.encode(n);
        let access = self.access(n.leaf);
        self.store.write_block_as(block, &bytes, access)
    }

    /// Builds the tree from sorted `(key, value)` entries. The tree must be empty.
    pub fn bulk_load(&mut self, keys: &[u64], vals: &[u8]) -> Result<()> {
        if self.len != 0 || self.height != 0 {
            return Err(Error::Input("bulk load into a non-empty tree".into()));
        }
        if vals.len() != keys.len() * self.width {
            return Err(Error::Input("value bytes do not match key count".into()));
        }
        if let Some(w) = keys.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Input(format!("keys not strictly increasing at {}", w[1])));
        }
        if keys.is_empty() {
            return Ok(());
        }
        let w = self.width;
        let per_leaf = filled(self.leaf_capacity(), self.fill);
        let n_leaves = keys.len().div_ceil(per_leaf);
        let first = self.store.allocate(n_leaves as u64)?;
        let mut level: Vec<(u64, u32)> = Vec::with_capacity(n_leaves);
        for i in 0..n_leaves {
            let lo = i * per_leaf;
            let hi = (lo + per_leaf).min(keys.len());
            let block = first + i as u32;
            let node = Node {
                leaf: true,
                left: if i > 0 { DiskAddr::new(block - 1, 0) } else { DiskAddr::NULL },
                right: if i + 1 < n_leaves { DiskAddr::new(block + 1, 0) } else { DiskAddr::NULL },
                keys: keys[lo..hi].to_vec(),
                vals: vals[lo * w..hi * w].to_vec(),
            };
            self.write_node(block, &node)?;
            level.push((keys[lo], block));
        }
        self.leaves = n_leaves as u64;
        self.height = 1;
        let per_inner = filled(self.inner_capacity(), self.fill);
        while level.len() > 1 {
            let n_nodes = level.len().div_ceil(per_inner);
            let first = self.store.allocate(n_nodes as u64)?;
            let mut next = Vec::with_capacity(n_nodes);
            for (i, chunk) in level.chunks(per_inner).enumerate() {
                let node = Node {
                    leaf: false,
                    left: DiskAddr::NULL,
                    right: DiskAddr::NULL,
                    keys: chunk.iter().map(|e| e.0).collect(),
                    vals: chunk.iter().flat_map(|e| DiskAddr::new(e.1, 0).to_bytes()).collect(),
                };
                self.write_node(first + i as u32, &node)?;
                next.push((chunk[0].0, first + i as u32));
            }
            level = next;
            self.height += 1;
        }
        self.store.set_root(DiskAddr::new(level[0].1, 0));
        self.len = keys.len() as u64;
        self.save_meta()
    }

    /// Exact-match lookup.
    pub fn get(&mut self, key: u64) -> Result<Option<Vec<u8>>> {
        Ok(self.floor(key)?.filter(|(k, _)| *k == key).map(|(_, v)| v))
    }

    /// Entry with the greatest key ≤ `key`; when every key is larger, the
    /// smallest entry is returned instead. `None` only for an empty tree.
    pub fn floor(&mut self, key: u64) -> Result<Option<(u64, Vec<u8>)>> {
        if self.height == 0 {
            return Ok(None);
        }
        self.store.begin_op();
        let r = self.floor_inner(key);
        self.store.end_op()?;
        r
    }

    fn floor_inner(&mut self, key: u64) -> Result<Option<(u64, Vec<u8>)>> {
        let leaf = self.descend(key, None)?;
        let i = leaf.route(key);
        Ok(leaf.keys.get(i).map(|&k| (k, leaf.val(i, self.width).to_vec())))
    }

    /// Like [`BTree::floor`], plus the following entry when it sits in the
    /// same leaf (no extra block is read for it).
    #[allow(clippy::type_complexity)]
    pub fn floor_with_next(&mut self, key: u64) -> Result<Option<((u64, Vec<u8>), Option<(u64, Vec<u8>)>)>> {
        if self.height == 0 {
            return Ok(None);
        }
        self.store.begin_op();
        let r = (|| {
            let leaf = self.descend(key, None)?;
            let i = leaf.route(key);
            let at = |j: usize| leaf.keys.get(j).map(|&k| (k, leaf.val(j, self.width).to_vec()));
            Ok(at(i).map(|e| (e, at(i + 1))))
        })();
        self.store.end_op()?;
        r
    }

    // Walks from the root to the leaf for `key`, recording (block, slot) of
    // every inner node on the way when `path` is given.
    fn descend(&mut self, key: u64, mut path: Option<&mut Vec<(u32, usize)>>) -> Result<Node> {
        let mut block = self.store.root().block;
        for _ in 1..self.height {
            let node = self.read_node(block, false)?;
            let i = node.route(key);
            if let Some(p) = path.as_deref_mut() {
                p.push((block, i));
            }
            block = node.child(i);
        }
        if let Some(p) = path {
            p.push((block, 0));
        }
        self.read_node(block, true)
    }

    /// Inserts or overwrites; returns true when the key was new.
    pub fn put(&mut self, key: u64, val: &[u8]) -> Result<bool> {
        if val.len() != self.width {
            return Err(Error::Input(format!("value of {} bytes, expected {}", val.len(), self.width)));
        }
        self.store.begin_op();
        let r = self.put_inner(key, val);
        let e = self.store.end_op();
        let r = r?;
        e?;
        Ok(r)
    }

    fn put_inner(&mut self, key: u64, val: &[u8]) -> Result<bool> {
        let outer = self.store.context().phase();
        if self.height == 0 {
            self.phase(Phase::Insert);
            let block = self.store.allocate(1)?;
            let node = Node { leaf: true, left: DiskAddr::NULL, right: DiskAddr::NULL, keys: vec![key], vals: val.to_vec() };
            self.write_node(block, &node)?;
            self.store.set_root(DiskAddr::new(block, 0));
            self.height = 1;
            self.leaves = 1;
            self.len = 1;
            self.save_meta()?;
            self.phase(outer);
            return Ok(true);
        }
        let mut path = Vec::with_capacity(self.height as usize);
        let mut leaf = self.descend(key, Some(&mut path))?;
        let w = self.width;
        let pos = leaf.keys.partition_point(|&k| k < key);
        self.phase(Phase::Insert);
        let leaf_block = path.last().unwrap().0;
        if leaf.keys.get(pos) == Some(&key) {
            leaf.vals[pos * w..(pos + 1) * w].copy_from_slice(val);
            self.write_node(leaf_block, &leaf)?;
            self.phase(outer);
            return Ok(false);
        }
        leaf.keys.insert(pos, key);
        leaf.vals.splice(pos * w..pos * w, val.iter().copied());
        self.len += 1;
        if leaf.keys.len() <= self.leaf_capacity() {
            self.write_node(leaf_block, &leaf)?;
        } else {
            self.phase(Phase::Smo);
            self.split(path, leaf)?;
        }
        self.save_meta()?;
        self.phase(outer);
        Ok(true)
    }

    // Half split of an overfull node, cascading towards the root.
    fn split(&mut self, mut path: Vec<(u32, usize)>, mut node: Node) -> Result<()> {
        loop {
            let (block, _) = path.pop().unwrap();
            let w = if node.leaf { self.width } else { 8 };
            let mid = node.keys.len() / 2;
            let new_block = self.store.allocate(1)?;
            let mut right = Node {
                leaf: node.leaf,
                left: DiskAddr::NULL,
                right: DiskAddr::NULL,
                keys: node.keys.split_off(mid),
                vals: node.vals.split_off(mid * w),
            };
            if node.leaf {
                right.left = DiskAddr::new(block, 0);
                right.right = node.right;
                node.right = DiskAddr::new(new_block, 0);
                if !right.right.is_null() {
                    let mut sib = self.read_node(right.right.block, true)?;
                    sib.left = DiskAddr::new(new_block, 0);
                    self.write_node(right.right.block, &sib)?;
                }
                self.leaves += 1;
            }
            self.write_node(block, &node)?;
            self.write_node(new_block, &right)?;
            self.splits += 1;
            let sep = right.keys[0];
            let sep_child = DiskAddr::new(new_block, 0).to_bytes();
            match path.last().copied() {
                None => {
                    let root = self.store.allocate(1)?;
                    let mut vals = DiskAddr::new(block, 0).to_bytes().to_vec();
                    vals.extend_from_slice(&sep_child);
                    let r = Node { leaf: false, left: DiskAddr::NULL, right: DiskAddr::NULL, keys: vec![node.keys[0], sep], vals };
                    self.write_node(root, &r)?;
                    self.store.set_root(DiskAddr::new(root, 0));
                    self.height += 1;
                    return Ok(());
                }
                Some((pblock, slot)) => {
                    let mut parent = self.read_node(pblock, false)?;
                    parent.keys.insert(slot + 1, sep);
                    parent.vals.splice((slot + 1) * 8..(slot + 1) * 8, sep_child);
                    if parent.keys.len() <= self.inner_capacity() {
                        return self.write_node(pblock, &parent);
                    }
                    node = parent;
                }
            }
        }
    }

    /// Up to `count` entries with key ≥ `start`, following leaf links.
    pub fn range(&mut self, start: u64, count: usize) -> Result<Vec<(u64, Vec<u8>)>> {
        let mut out = Vec::with_capacity(count.min(4096));
        if self.height == 0 || count == 0 {
            return Ok(out);
        }
        self.store.begin_op();
        let r = (|| {
            let mut leaf = self.descend(start, None)?;
            let mut i = leaf.keys.partition_point(|&k| k < start);
            loop {
                while i < leaf.keys.len() && out.len() < count {
                    out.push((leaf.keys[i], leaf.val(i, self.width).to_vec()));
                    i += 1;
                }
                if out.len() >= count || leaf.right.is_null() {
                    return Ok(());
                }
                leaf = self.read_node(leaf.right.block, true)?;
                i = 0;
            }
        })();
        self.store.end_op()?;
        r.map(|_| out)
    }

    /// All entries in key order, walking the leaf chain.
    pub fn entries(&mut self) -> Result<Vec<(u64, Vec<u8>)>> {
        self.range(0, usize::MAX)
    }

    /// Structural audit: equal leaf depth, sorted keys, consistent links and
    /// separators. Returns the leaf depth.
    pub fn check(&mut self) -> Result<u32> {
        if self.height == 0 {
            return Ok(0);
        }
        let mut leaves = Vec::new();
        let root = self.store.root().block;
        self.check_node(root, self.height, None, None, &mut leaves)?;
        for (i, &(b, _)) in leaves.iter().enumerate() {
            let n = self.read_node(b, true)?;
            let want_left = if i > 0 { DiskAddr::new(leaves[i - 1].0, 0) } else { DiskAddr::NULL };
            let want_right = leaves.get(i + 1).map_or(DiskAddr::NULL, |x| DiskAddr::new(x.0, 0));
            if n.left != want_left || n.right != want_right {
                return Err(Error::Format(format!("leaf {b} has broken sibling links")));
            }
        }
        let total: u64 = leaves.iter().map(|l| l.1 as u64).sum();
        if total != self.len || leaves.len() as u64 != self.leaves {
            return Err(Error::Format("leaf totals disagree with meta".into()));
        }
        Ok(self.height)
    }

    fn check_node(&mut self, block: u32, depth: u32, lo: Option<u64>, hi: Option<u64>, leaves: &mut Vec<(u32, usize)>) -> Result<()> {
        let n = self.read_node(block, depth == 1)?;
        if n.leaf != (depth == 1) {
            return Err(Error::Format(format!("node {block} at wrong depth")));
        }
        if n.keys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format(format!("node {block} keys unsorted")));
        }
        if let (Some(lo), Some(&first)) = (lo, n.keys.first()) {
            if first < lo {
                return Err(Error::Format(format!("node {block} below its separator")));
            }
        }
        if let (Some(hi), Some(&last)) = (hi, n.keys.last()) {
            if last >= hi {
                return Err(Error::Format(format!("node {block} above its bound")));
            }
        }
        if n.leaf {
            leaves.push((block, n.keys.len()));
            return Ok(());
        }
        for i in 0..n.keys.len() {
            let clo = if i == 0 { lo } else { Some(n.keys[i]) };
            let chi = n.keys.get(i + 1).copied().or(hi);
            self.check_node(n.child(i), depth - 1, clo, chi, leaves)?;
        }
        Ok(())
    }

    pub fn sync(&mut self) -> Result<()> {
        self.save_meta()?;
        self.store.sync()
    }
}

/// The baseline index: a [`BTree`] with 8-byte payloads.
pub struct BPlusTree {
    tree: BTree,
}

impl BPlusTree {
    pub fn bulk_load(path: impl AsRef<Path>, records: &[Record], cfg: &BTreeConfig) -> Result<Self> {
        Self::bulk_load_in(path, records, cfg, &IoContext::new(cfg.buffer_capacity))
    }

    pub fn bulk_load_in(path: impl AsRef<Path>, records: &[Record], cfg: &BTreeConfig, ctx: &IoContext) -> Result<Self> {
        check_sorted_records(records)?;
        let mut tree = BTree::create(path, cfg.block_size, ctx, 8, cfg.fill, Access::Leaf)?;
        let keys: Vec<u64> = records.iter().map(|r| r.key).collect();
        let vals: Vec<u8> = records.iter().flat_map(|r| r.payload.to_le_bytes()).collect();
        tree.bulk_load(&keys, &vals)?;
        Ok(BPlusTree { tree })
    }

    pub fn open(path: impl AsRef<Path>, cfg: &BTreeConfig) -> Result<Self> {
        let tree = BTree::open(path, cfg.block_size, &IoContext::new(cfg.buffer_capacity), Access::Leaf)?;
        if tree.width() != 8 {
            return Err(Error::Format("B+-tree file has non-payload values".into()));
        }
        Ok(BPlusTree { tree })
    }

    pub fn tree(&mut self) -> &mut BTree {
        &mut self.tree
    }

    pub fn height(&self) -> u32 {
        self.tree.height()
    }

    pub fn leaf_count(&self) -> u64 {
        self.tree.leaf_count()
    }

    pub fn check(&mut self) -> Result<u32> {
        self.tree.check()
    }

    pub fn sync(&mut self) -> Result<()> {
        self.tree.sync()
    }
}

fn payload(v: &[u8]) -> u64 {
    u64::from_le_bytes(v.try_into().unwrap())
}

impl OrderedIndex for BPlusTree {
    fn kind(&self) -> IndexKind {
        IndexKind::BPlusTree
    }

    fn lookup(&mut self, key: u64) -> Result<Option<u64>> {
        self.tree.store.context().set_phase(Phase::Search);
        Ok(self.tree.get(key)?.map(|v| payload(&v)))
    }

    fn insert(&mut self, key: u64, payload: u64) -> Result<()> {
        self.tree.store.context().set_phase(Phase::Search);
        self.tree.put(key, &payload.to_le_bytes())?;
        self.tree.store.context().set_phase(Phase::Search);
        Ok(())
    }

    fn scan(&mut self, start: u64, count: usize) -> Result<Vec<Record>> {
        self.tree.store.context().set_phase(Phase::Search);
        Ok(self.tree.range(start, count)?.into_iter().map(|(k, v)| Record::new(k, payload(&v))).collect())
    }

    fn len(&self) -> u64 {
        self.tree.len()
    }

    fn io(&self) -> &IoContext {
        self.tree.store.context()
    }

    fn storage_bytes(&self) -> u64 {
        self.tree.store.storage_bytes()
    }

    fn smo_count(&self) -> u64 {
        self.tree.split_count()
    }

    fn shape(&self) -> IndexShape {
        IndexShape {
            items: self.tree.len(),
            height: self.tree.height(),
            segments: self.tree.leaf_count(),
            max_node_items: self.tree.leaf_capacity() as u64,
            run_sizes: Vec::new(),
            pinned_bytes: self.tree.inner_blocks() * self.tree.store.block_size() as u64,
        }
    }
}
