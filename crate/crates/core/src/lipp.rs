//! Disk LIPP.
//!
//! One node kind: a 48B header followed by typed slots. Each slot is a 1B
//! type flag (NULL, DATA, NODE) and 16B of content, either a record or a
//! child address. A key lives exactly at the slot its node's model predicts,
//! so a lookup reads one header and one slot per level and never searches.
//!
//! Nodes up to one block are packed and never straddle blocks. Larger nodes
//! start on a block boundary and their slots are packed per block, so a slot
//! read always touches exactly one block. After the slot blocks of a large
//! node comes an occupancy summary with one bit per slot block, set once the
//! block holds any non-NULL slot; scans and rebuilds skip empty blocks.
//!
//! An insert that lands on a DATA slot holding another key pushes both keys
//! into a new child node. Every node on the insert path counts the insert in
//! its header. The topmost path node whose inserts since its last build reach
//! `rebuild_ratio` times its build size is rebuilt from its records.

use std::path::Path;

use crate::blockstore::{Access, BlockStore, DiskAddr, IoContext, Phase};
use crate::error::{Error, Result};
use crate::model::{fmcd_fit, LinearModel};
use crate::{check_sorted_records, IndexKind, IndexShape, OrderedIndex, Record};

const META_KIND: u32 = 6;
const HEADER: usize = 48;
const SLOT: usize = 17;
const MIN_SLOTS: usize = 8;

const NULL: u8 = 0;
const DATA: u8 = 1;
const NODE: u8 = 2;

#[derive(Clone, Debug)]
pub struct LippConfig {
    pub block_size: usize,
    pub buffer_capacity: usize,
    /// A node is rebuilt once its inserts since the last build reach this
    /// multiple of its build size.
    pub rebuild_ratio: f64,
}

impl Default for LippConfig {
    fn default() -> Self {
        LippConfig { block_size: 4096, buffer_capacity: 0, rebuild_ratio: 1.0 }
    }
}

/// Slot budget for a node built over `n` keys.
pub fn slot_budget(n: usize) -> usize {
    match n {
        2 => MIN_SLOTS,
        n if n < 100_000 => (5 * n).max(MIN_SLOTS),
        n => 2 * n,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Header {
    model: LinearModel,
    slots: usize,
    build_size: u32,
    inserts: u32,
    conflicts: u32,
    items: u64,
}

impl Header {
    fn to_bytes(self) -> [u8; HEADER] {
        let mut b = [0u8; HEADER];
        b[..24].copy_from_slice(&self.model.to_bytes());
        b[24..28].copy_from_slice(&(self.slots as u32).to_le_bytes());
        b[28..32].copy_from_slice(&self.build_size.to_le_bytes());
        b[32..36].copy_from_slice(&self.inserts.to_le_bytes());
        b[36..40].copy_from_slice(&self.conflicts.to_le_bytes());
        b[40..48].copy_from_slice(&self.items.to_le_bytes());
        b
    }

    fn from_bytes(b: &[u8]) -> Self {
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        Header {
            model: LinearModel::from_bytes(&b[..24]),
            slots: u32_at(24) as usize,
            build_size: u32_at(28),
            inserts: u32_at(32),
            conflicts: u32_at(36),
            items: u64::from_le_bytes(b[40..48].try_into().unwrap()),
        }
    }
}

/// Byte layout of a node with a given slot count.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    bs: usize,
    slots: usize,
}

impl Geometry {
    fn large(&self) -> bool {
        HEADER + self.slots * SLOT > self.bs
    }

    fn first_block_slots(&self) -> usize {
        (self.bs - HEADER) / SLOT
    }

    fn per_block(&self) -> usize {
        self.bs / SLOT
    }

    fn offset(&self, i: usize) -> usize {
        if !self.large() || i < self.first_block_slots() {
            return HEADER + i * SLOT;
        }
        let j = i - self.first_block_slots();
        self.bs * (1 + j / self.per_block()) + (j % self.per_block()) * SLOT
    }

    fn slot_blocks(&self) -> usize {
        if !self.large() {
            return 1;
        }
        1 + (self.slots - self.first_block_slots()).div_ceil(self.per_block())
    }

    /// Start of the occupancy summary (large nodes only).
    fn summary_offset(&self) -> usize {
        self.bs * self.slot_blocks()
    }

    fn bytes(&self) -> usize {
        if !self.large() {
            return HEADER + self.slots * SLOT;
        }
        self.summary_offset() + self.slot_blocks().div_ceil(8)
    }

    fn block_of(&self, i: usize) -> usize {
        if !self.large() || i < self.first_block_slots() {
            0
        } else {
            1 + (i - self.first_block_slots()) / self.per_block()
        }
    }

    /// Slot range stored in slot block `b`.
    fn block_slots(&self, b: usize) -> (usize, usize) {
        if !self.large() {
            return (0, self.slots);
        }
        let fbs = self.first_block_slots();
        if b == 0 {
            return (0, fbs);
        }
        let a = fbs + (b - 1) * self.per_block();
        (a, (a + self.per_block()).min(self.slots))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Null,
    Data(Record),
    Node(DiskAddr),
}

impl Slot {
    fn to_bytes(self) -> [u8; SLOT] {
        let mut b = [0u8; SLOT];
        match self {
            Slot::Null => {}
            Slot::Data(r) => {
                b[0] = DATA;
                b[1..].copy_from_slice(&r.to_bytes());
            }
            Slot::Node(a) => {
                b[0] = NODE;
                b[1..9].copy_from_slice(&a.to_bytes());
            }
        }
        b
    }

    fn from_bytes(b: &[u8]) -> Result<Self> {
        match b[0] {
            NULL => Ok(Slot::Null),
            DATA => Ok(Slot::Data(Record::from_bytes(&b[1..17]))),
            NODE => Ok(Slot::Node(DiskAddr::from_bytes(&b[1..9]))),
            f => Err(Error::Format(format!("bad LIPP slot flag {f}"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Node {
    addr: DiskAddr,
    h: Header,
}

#[derive(Clone, Copy, Debug)]
struct Step {
    node: Node,
    slot: usize,
}

pub struct Lipp {
    store: BlockStore,
    root: DiskAddr,
    cfg: LippConfig,
    len: u64,
    rebuilds: u64,
    height: u32,
}

impl Lipp {
    pub fn bulk_load(path: impl AsRef<Path>, records: &[Record], cfg: &LippConfig) -> Result<Self> {
        Self::bulk_load_in(path, records, cfg, &IoContext::new(cfg.buffer_capacity))
    }

    pub fn bulk_load_in(path: impl AsRef<Path>, records: &[Record], cfg: &LippConfig, ctx: &IoContext) -> Result<Self> {
        check_sorted_records(records)?;
        if !(cfg.rebuild_ratio > 0.0) {
            return Err(Error::Config("rebuild ratio must be positive".into()));
        }
        let path = path.as_ref();
        if path.exists() {
            std::fs::remove_file(path)?;
        }
        let mut store = BlockStore::open_in(path, cfg.block_size, ctx)?;
        store.set_kind(META_KIND);
        let mut t = Lipp { store, root: DiskAddr::NULL, cfg: cfg.clone(), len: records.len() as u64, rebuilds: 0, height: 0 };
        let (root, height) = t.build(records)?;
        t.root = root;
        t.height = height;
        t.save_meta()?;
        Ok(t)
    }

    pub fn open(path: impl AsRef<Path>, cfg: &LippConfig) -> Result<Self> {
        let store = BlockStore::open(path.as_ref(), cfg.block_size, cfg.buffer_capacity)?;
        let m = store.meta().extra().to_vec();
        if store.meta().kind != META_KIND || m.len() < 24 {
            return Err(Error::Format(format!("{} is not a LIPP index", path.as_ref().display())));
        }
        let u = |i: usize| u64::from_le_bytes(m[i * 8..i * 8 + 8].try_into().unwrap());
        Ok(Lipp { root: store.root(), store, cfg: cfg.clone(), len: u(0), rebuilds: u(1), height: u(2) as u32 })
    }

    fn save_meta(&mut self) -> Result<()> {
        let m: Vec<u8> = [self.len, self.rebuilds, self.height as u64].iter().flat_map(|v| v.to_le_bytes()).collect();
        self.store.set_root(self.root);
        self.store.set_meta_extra(m)
    }

    pub fn rebuild_count(&self) -> u64 {
        self.rebuilds
    }

    pub fn sync(&mut self) -> Result<()> {
        self.save_meta()?;
        self.store.sync()
    }

    fn geometry(&self, slots: usize) -> Geometry {
        Geometry { bs: self.cfg.block_size, slots }
    }

    /// Writes a subtree over `records`; returns its root and height.
    fn build(&mut self, records: &[Record]) -> Result<(DiskAddr, u32)> {
        let n = records.len();
        let slots = slot_budget(n);
        let keys: Vec<u64> = records.iter().map(|r| r.key).collect();
        let (mut model, degree) = fmcd_fit(&keys, slots)?;
        if n >= 2 && degree == n {
            // No progress would be made; interpolate between the end keys.
            let span = (keys[n - 1] - keys[0]) as f64;
            model = LinearModel::new(keys[0], (slots - 1) as f64 / span, 0.0);
        }
        let g = self.geometry(slots);
        let addr = self.store.alloc_bytes(g.bytes())?;
        let h = Header { model, slots, build_size: n as u32, inserts: 0, conflicts: 0, items: n as u64 };
        let mut image = vec![0u8; g.bytes()];
        image[..HEADER].copy_from_slice(&h.to_bytes());
        let mut height = 1;
        let summary = g.summary_offset();
        let mut i = 0;
        while i < n {
            let s = model.predict(keys[i], slots);
            let mut j = i + 1;
            while j < n && model.predict(keys[j], slots) == s {
                j += 1;
            }
            let slot = if j - i == 1 {
                Slot::Data(records[i])
            } else {
                let (child, ch) = self.build(&records[i..j])?;
                height = height.max(ch + 1);
                Slot::Node(child)
            };
            let o = g.offset(s);
            image[o..o + SLOT].copy_from_slice(&slot.to_bytes());
            if g.large() {
                let b = g.block_of(s);
                image[summary + b / 8] |= 1 << (b % 8);
            }
            i = j;
        }
        let pos = addr.byte_pos(self.cfg.block_size);
        self.store.write_at(pos, &image, Access::Leaf)?;
        Ok((addr, height))
    }

    fn read_node(&mut self, addr: DiskAddr) -> Result<Node> {
        let b = self.store.read_vec(addr.byte_pos(self.cfg.block_size), HEADER, Access::Leaf)?;
        Ok(Node { addr, h: Header::from_bytes(&b) })
    }

    fn slot_pos(&self, node: &Node, i: usize) -> u64 {
        node.addr.byte_pos(self.cfg.block_size) + self.geometry(node.h.slots).offset(i) as u64
    }

    fn read_slot(&mut self, node: &Node, i: usize) -> Result<Slot> {
        let pos = self.slot_pos(node, i);
        Slot::from_bytes(&self.store.read_vec(pos, SLOT, Access::Leaf)?)
    }

    fn write_slot(&mut self, node: &Node, i: usize, slot: Slot) -> Result<()> {
        let pos = self.slot_pos(node, i);
        self.store.write_at(pos, &slot.to_bytes(), Access::Leaf)
    }

    fn summary_pos(&self, node: &Node, b: usize) -> u64 {
        node.addr.byte_pos(self.cfg.block_size) + (self.geometry(node.h.slots).summary_offset() + b / 8) as u64
    }

    fn block_occupied(&mut self, node: &Node, b: usize) -> Result<bool> {
        if !self.geometry(node.h.slots).large() {
            return Ok(true);
        }
        let byte = self.store.read_vec(self.summary_pos(node, b), 1, Access::Leaf)?[0];
        Ok(byte & (1 << (b % 8)) != 0)
    }

    // Sets the summary bit of the block holding `slot` if the block held
    // only NULL slots so far.
    fn note_occupied(&mut self, node: &Node, slot: usize) -> Result<()> {
        let g = self.geometry(node.h.slots);
        if !g.large() {
            return Ok(());
        }
        let b = g.block_of(slot);
        let (lo, hi) = g.block_slots(b);
        let bytes = self.store.read_vec(self.slot_pos(node, lo), (hi - lo) * SLOT, Access::Leaf)?;
        if bytes.chunks(SLOT).any(|c| c[0] != NULL) {
            return Ok(());
        }
        let pos = self.summary_pos(node, b);
        let byte = self.store.read_vec(pos, 1, Access::Leaf)?[0] | (1 << (b % 8));
        self.store.write_at(pos, &[byte], Access::Leaf)
    }

    // Non-NULL slots of block `b`, with their indices.
    fn block_entries(&mut self, node: &Node, b: usize) -> Result<Vec<(usize, Slot)>> {
        let (lo, hi) = self.geometry(node.h.slots).block_slots(b);
        let bytes = self.store.read_vec(self.slot_pos(node, lo), (hi - lo) * SLOT, Access::Leaf)?;
        let mut out = Vec::new();
        for (k, c) in bytes.chunks(SLOT).enumerate() {
            match Slot::from_bytes(c)? {
                Slot::Null => {}
                s => out.push((lo + k, s)),
            }
        }
        Ok(out)
    }

    fn write_header(&mut self, node: &Node) -> Result<()> {
        let pos = node.addr.byte_pos(self.cfg.block_size);
        self.store.write_at(pos, &node.h.to_bytes(), Access::Leaf)
    }

    /// Descends by prediction until a slot that is not NODE.
    fn descend(&mut self, key: u64, path: &mut Vec<Step>) -> Result<Slot> {
        let mut addr = self.root;
        loop {
            let node = self.read_node(addr)?;
            let slot = node.h.model.predict(key, node.h.slots);
            path.push(Step { node, slot });
            match self.read_slot(&node, slot)? {
                Slot::Node(child) => addr = child,
                other => return Ok(other),
            }
        }
    }

    fn lookup_inner(&mut self, key: u64) -> Result<Option<u64>> {
        match self.descend(key, &mut Vec::new())? {
            Slot::Data(r) if r.key == key => Ok(Some(r.payload)),
            _ => Ok(None),
        }
    }

    fn insert_inner(&mut self, key: u64, payload: u64) -> Result<()> {
        let ctx = self.store.context().clone();
        ctx.set_phase(Phase::Search);
        let mut path = Vec::new();
        let found = self.descend(key, &mut path)?;
        let last = *path.last().unwrap();
        let rec = Record::new(key, payload);
        ctx.set_phase(Phase::Insert);
        let conflict = match found {
            Slot::Data(r) if r.key == key => return self.write_slot(&last.node, last.slot, Slot::Data(rec)),
            Slot::Null => {
                self.note_occupied(&last.node, last.slot)?;
                self.write_slot(&last.node, last.slot, Slot::Data(rec))?;
                false
            }
            Slot::Data(r) => {
                let pair = if r.key < key { [r, rec] } else { [rec, r] };
                let (child, ch) = self.build(&pair)?;
                self.write_slot(&last.node, last.slot, Slot::Node(child))?;
                self.height = self.height.max(path.len() as u32 + ch);
                true
            }
            Slot::Node(_) => unreachable!("descend stops at non-NODE slots"),
        };
        self.len += 1;
        ctx.set_phase(Phase::Maintenance);
        for step in path.iter_mut() {
            let h = &mut step.node.h;
            h.inserts += 1;
            h.items += 1;
            h.conflicts += conflict as u32;
            self.write_header(&step.node)?;
        }
        let ratio = self.cfg.rebuild_ratio;
        if let Some(at) = path.iter().position(|s| s.node.h.inserts as f64 >= ratio * (s.node.h.build_size.max(1) as f64)) {
            ctx.set_phase(Phase::Smo);
            self.rebuild(&path, at)?;
        }
        self.save_meta()
    }

    /// Rebuilds the subtree rooted at `path[at]` and links it in its place.
    fn rebuild(&mut self, path: &[Step], at: usize) -> Result<()> {
        let mut records = Vec::with_capacity(path[at].node.h.items as usize);
        self.collect(path[at].node.addr, &mut records)?;
        let (addr, h) = self.build(&records)?;
        match at {
            0 => self.root = addr,
            _ => {
                let parent = path[at - 1];
                self.write_slot(&parent.node, parent.slot, Slot::Node(addr))?;
            }
        }
        self.height = self.height.max(at as u32 + h);
        self.rebuilds += 1;
        Ok(())
    }

    /// In-order records of the subtree at `addr`.
    fn collect(&mut self, addr: DiskAddr, out: &mut Vec<Record>) -> Result<()> {
        let node = self.read_node(addr)?;
        for b in 0..self.geometry(node.h.slots).slot_blocks() {
            if !self.block_occupied(&node, b)? {
                continue;
            }
            for (_, slot) in self.block_entries(&node, b)? {
                match slot {
                    Slot::Data(r) => out.push(r),
                    Slot::Node(c) => self.collect(c, out)?,
                    Slot::Null => {}
                }
            }
        }
        Ok(())
    }

    fn scan_inner(&mut self, start: u64, count: usize) -> Result<Vec<Record>> {
        let mut out = Vec::with_capacity(count.min(1 << 16));
        // The stack holds each open node and the next slot to visit.
        let mut stack: Vec<(Node, usize)> = Vec::new();
        let mut addr = self.root;
        loop {
            let node = self.read_node(addr)?;
            let slot = node.h.model.predict(start, node.h.slots);
            match self.read_slot(&node, slot)? {
                Slot::Node(child) => {
                    stack.push((node, slot + 1));
                    addr = child;
                }
                Slot::Data(r) => {
                    if r.key >= start {
                        out.push(r);
                    }
                    stack.push((node, slot + 1));
                    break;
                }
                Slot::Null => {
                    stack.push((node, slot + 1));
                    break;
                }
            }
        }
        while out.len() < count {
            let Some((node, i)) = stack.last_mut() else { break };
            if *i >= node.h.slots {
                stack.pop();
                continue;
            }
            let (node, slot) = (*node, *i);
            let g = self.geometry(node.h.slots);
            let b = g.block_of(slot);
            if g.large() && slot == g.block_slots(b).0 && !self.block_occupied(&node, b)? {
                stack.last_mut().unwrap().1 = g.block_slots(b).1;
                continue;
            }
            stack.last_mut().unwrap().1 += 1;
            match self.read_slot(&node, slot)? {
                Slot::Null => {}
                Slot::Data(r) => out.push(r),
                Slot::Node(c) => {
                    let child = self.read_node(c)?;
                    stack.push((child, 0));
                }
            }
        }
        Ok(out)
    }

    /// Audit: flags, exact positions, subtree item counts and global order.
    /// Returns the records.
    pub fn check(&mut self) -> Result<Vec<Record>> {
        let mut out = Vec::with_capacity(self.len as usize);
        self.check_node(self.root, None, &mut out)?;
        if out.windows(2).any(|w| w[0].key >= w[1].key) {
            return Err(Error::Format("LIPP records out of order".into()));
        }
        if out.len() as u64 != self.len {
            return Err(Error::Format(format!("{} records, expected {}", out.len(), self.len)));
        }
        Ok(out)
    }

    fn check_node(&mut self, addr: DiskAddr, parent: Option<(LinearModel, usize, usize)>, out: &mut Vec<Record>) -> Result<u64> {
        let node = self.read_node(addr)?;
        let g = self.geometry(node.h.slots);
        for b in (0..g.slot_blocks()).filter(|_| g.large()) {
            let (lo, hi) = g.block_slots(b);
            let used = (lo..hi).map(|i| self.read_slot(&node, i)).collect::<Result<Vec<_>>>()?.iter().any(|s| *s != Slot::Null);
            if used != self.block_occupied(&node, b)? {
                return Err(Error::Format(format!("node {addr:?} summary disagrees at block {b}")));
            }
        }
        let mut items = 0;
        for i in 0..node.h.slots {
            let slot = self.read_slot(&node, i)?;
            let key = match slot {
                Slot::Null => continue,
                Slot::Data(r) => {
                    if node.h.model.predict(r.key, node.h.slots) != i {
                        return Err(Error::Format(format!("key {} not at its predicted slot", r.key)));
                    }
                    out.push(r);
                    items += 1;
                    r.key
                }
                Slot::Node(c) => {
                    let before = out.len();
                    items += self.check_node(c, Some((node.h.model, node.h.slots, i)), out)?;
                    if out[before..].iter().any(|r| node.h.model.predict(r.key, node.h.slots) != i) {
                        return Err(Error::Format(format!("child at slot {i} holds keys routed elsewhere")));
                    }
                    continue;
                }
            };
            if let Some((m, s, at)) = parent {
                if m.predict(key, s) != at {
                    return Err(Error::Format(format!("key {key} unreachable from its parent")));
                }
            }
        }
        if items != node.h.items {
            return Err(Error::Format(format!("node {addr:?} counts {} items, holds {items}", node.h.items)));
        }
        Ok(items)
    }

    /// Node count and exact height by walking the whole tree.
    pub fn node_stats(&mut self) -> Result<(u64, u32)> {
        let mut nodes = 0;
        let mut height = 0;
        let mut stack = vec![(self.root, 1u32)];
        while let Some((addr, d)) = stack.pop() {
            nodes += 1;
            height = height.max(d);
            let node = self.read_node(addr)?;
            for i in 0..node.h.slots {
                if let Slot::Node(c) = self.read_slot(&node, i)? {
                    stack.push((c, d + 1));
                }
            }
        }
        Ok((nodes, height))
    }

    /// Slot count and conflict degree of the root model over the root's keys.
    pub fn root_stats(&mut self) -> Result<(usize, u32)> {
        let node = self.read_node(self.root)?;
        let mut keys = Vec::with_capacity(node.h.items as usize);
        let mut recs = Vec::new();
        self.collect(self.root, &mut recs)?;
        keys.extend(recs.iter().map(|r| r.key));
        let degree = crate::model::conflict_degree(&node.h.model, &keys, node.h.slots);
        Ok((node.h.slots, degree as u32))
    }
}

impl OrderedIndex for Lipp {
    fn kind(&self) -> IndexKind {
        IndexKind::Lipp
    }

    fn lookup(&mut self, key: u64) -> Result<Option<u64>> {
        self.store.context().set_phase(Phase::Search);
        self.store.begin_op();
        let r = self.lookup_inner(key);
        self.store.end_op()?;
        r
    }

    fn insert(&mut self, key: u64, payload: u64) -> Result<()> {
        self.store.begin_op();
        let r = self.insert_inner(key, payload);
        let e = self.store.end_op();
        self.store.context().set_phase(Phase::Search);
        r.and(e)
    }

    fn scan(&mut self, start: u64, count: usize) -> Result<Vec<Record>> {
        self.store.context().set_phase(Phase::Search);
        if count == 0 {
            return Ok(Vec::new());
        }
        self.store.begin_op();
        let r = self.scan_inner(start, count);
        self.store.end_op()?;
        r
    }

    fn len(&self) -> u64 {
        self.len
    }

    fn io(&self) -> &IoContext {
        self.store.context()
    }

    fn storage_bytes(&self) -> u64 {
        self.store.storage_bytes()
    }

    fn smo_count(&self) -> u64 {
        self.rebuilds
    }

    /// `height` is the deepest level reached since the last bulk load; a
    /// rebuild that flattens a subtree does not lower it.
    fn shape(&self) -> IndexShape {
        IndexShape {
            items: self.len,
            height: self.height,
            segments: 0,
            max_node_items: 0,
            run_sizes: Vec::new(),
            pinned_bytes: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn recs(keys: impl IntoIterator<Item = u64>) -> Vec<Record> {
        keys.into_iter().map(Record::from_key).collect()
    }

    fn build(records: &[Record], cfg: LippConfig) -> (tempfile::TempDir, Lipp) {
        let dir = tempfile::tempdir().unwrap();
        let t = Lipp::bulk_load(dir.path().join("lipp"), records, &cfg).unwrap();
        (dir, t)
    }

    fn random_keys(n: usize, seed: u64) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<u64> = (0..n).map(|_| rng.random_range(0..1u64 << 40)).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    #[test]
    fn slot_budget_brackets() {
        assert_eq!(slot_budget(0), 8);
        assert_eq!(slot_budget(2), 8);
        assert_eq!(slot_budget(1000), 5000);
        assert_eq!(slot_budget(99_999), 499_995);
        assert_eq!(slot_budget(100_000), 200_000);
        assert_eq!(slot_budget(2_000_000), 4_000_000);
    }

    #[test]
    fn geometry_keeps_slots_inside_blocks() {
        for slots in [8, 200, 240, 241, 5000] {
            let g = Geometry { bs: 4096, slots };
            let mut last = 0;
            for i in 0..slots {
                let o = g.offset(i);
                assert!(o >= HEADER && o + SLOT <= g.bytes());
                assert_eq!(o / 4096, (o + SLOT - 1) / 4096, "slot {i} of {slots} straddles");
                assert!(i == 0 || o > last);
                last = o;
            }
        }
        assert_eq!(Geometry { bs: 4096, slots: 8 }.bytes(), HEADER + 8 * SLOT);
        let g = Geometry { bs: 4096, slots: 5000 };
        assert_eq!(g.slot_blocks(), 21);
        assert_eq!(g.bytes(), 21 * 4096 + 3);
        for i in [0, 237, 238, 477, 478, 4999] {
            let (lo, hi) = g.block_slots(g.block_of(i));
            assert!(lo <= i && i < hi);
            assert_eq!(g.offset(lo) / 4096, g.block_of(i));
        }
    }

    #[test]
    fn scan_skips_empty_slot_blocks() {
        // A few dense keys then a sparse tail spread over most of the root.
        let mut keys: Vec<u64> = (0..2000).collect();
        keys.extend((1..=150).map(|i| i * 10_000_000));
        let (_d, mut t) = build(&recs(keys.iter().copied()), LippConfig::default());
        let start = keys[2000];
        t.io().reset_stats();
        assert_eq!(t.scan(start, 100).unwrap(), recs(keys[2000..2100].iter().copied()));
        let reads = t.io().stats().blocks_read;
        assert!(reads <= 2 * t.shape().height as u64 + 100 + 2, "{reads}");
        t.insert(5_000_000_001, 1).unwrap();
        t.insert(1_234_567_890, 2).unwrap();
        t.check().unwrap();
    }

    #[test]
    fn sequential_keys_fit_one_node() {
        let (_d, mut t) = build(&recs(0..10_000), LippConfig::default());
        assert_eq!(t.node_stats().unwrap(), (1, 1));
        assert_eq!(t.root_stats().unwrap(), (50_000, 1));
        assert_eq!(t.shape().height, 1);
        assert_eq!(t.lookup(1234).unwrap(), Some(1235));
        assert_eq!(t.lookup(10_000).unwrap(), None);
        t.check().unwrap();
    }

    #[test]
    fn lookups_read_two_blocks_per_level() {
        let keys = random_keys(50_000, 1);
        let (_d, mut t) = build(&recs(keys.iter().copied()), LippConfig::default());
        let (_, height) = t.node_stats().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let k = if rng.random_bool(0.5) { keys[rng.random_range(0..keys.len())] } else { rng.random_range(0..1u64 << 40) };
            t.io().reset_stats();
            let got = t.lookup(k).unwrap();
            assert_eq!(got, keys.binary_search(&k).ok().map(|_| k + 1));
            assert!(t.io().stats().blocks_read <= 2 * height as u64);
        }
    }

    #[test]
    fn null_insert_writes_slot_and_path_headers() {
        let (_d, mut t) = build(&recs((0..1000).map(|i| i * 1000)), LippConfig::default());
        let k = 500_500;
        let mut path = Vec::new();
        assert_eq!(t.descend(k, &mut path).unwrap(), Slot::Null);
        t.io().reset_stats();
        t.insert(k, 1).unwrap();
        // Root header and the slot share or split blocks; one write each at most.
        let w = t.io().stats().blocks_written;
        assert!(w >= 1 && w <= 2, "{w}");
        assert_eq!(t.lookup(k).unwrap(), Some(1));
        t.check().unwrap();
    }

    #[test]
    fn conflict_creates_child_node() {
        let (_d, mut t) = build(&recs((0..1000).map(|i| i * 1000)), LippConfig::default());
        // 1 predicts to the slot holding 0 with five slots per thousand.
        let mut path = Vec::new();
        assert!(matches!(t.descend(1, &mut path).unwrap(), Slot::Data(r) if r.key == 0));
        t.insert(1, 9).unwrap();
        let mut path = Vec::new();
        t.descend(1, &mut path).unwrap();
        assert_eq!(path.len(), 2);
        assert_eq!(path[1].node.h.slots, 8);
        assert_eq!(path[0].node.h.conflicts, 1);
        assert_eq!(t.lookup(0).unwrap(), Some(1));
        assert_eq!(t.lookup(1).unwrap(), Some(9));
        t.check().unwrap();
    }

    #[test]
    fn upsert_keeps_len_and_stats() {
        let (_d, mut t) = build(&recs([1, 5, 9]), LippConfig::default());
        t.insert(5, 50).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.lookup(5).unwrap(), Some(50));
        assert_eq!(t.rebuild_count(), 0);
    }

    #[test]
    fn collision_stream_stays_shallow() {
        let (_d, mut t) = build(&recs((0..1000).map(|i| i << 20)), LippConfig::default());
        // Every key lands between two loaded keys, in one root slot.
        for k in 1..4000u64 {
            t.insert((500 << 20) + k, k).unwrap();
        }
        assert!(t.rebuild_count() > 0);
        let (_, height) = t.node_stats().unwrap();
        assert!(height <= 2 + (4000f64).log2().ceil() as u32, "{height}");
        assert_eq!(t.check().unwrap().len(), 4999);
    }

    #[test]
    fn empty_index_grows() {
        let (_d, mut t) = build(&[], LippConfig::default());
        assert_eq!(t.lookup(3).unwrap(), None);
        assert!(t.scan(0, 5).unwrap().is_empty());
        let keys = random_keys(3000, 3);
        for &k in &keys {
            t.insert(k, k + 1).unwrap();
        }
        assert_eq!(t.check().unwrap(), recs(keys.iter().copied()));
    }

    #[test]
    fn scan_matches_and_costs_more_than_slots_suggest() {
        let keys = random_keys(20_000, 4);
        let (_d, mut t) = build(&recs(keys.iter().copied()), LippConfig::default());
        assert_eq!(t.scan(0, keys.len() + 5).unwrap(), recs(keys.iter().copied()));
        for start in [keys[10] + 1, keys[5000], keys[keys.len() - 2]] {
            let from = keys.partition_point(|&k| k < start);
            assert_eq!(t.scan(start, 100).unwrap(), recs(keys[from..].iter().copied().take(100)));
        }
    }

    #[test]
    fn reopen_after_sync() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lipp");
        let cfg = LippConfig::default();
        {
            let mut t = Lipp::bulk_load(&path, &recs(random_keys(5000, 5)), &cfg).unwrap();
            t.insert(7, 8).unwrap();
            t.sync().unwrap();
        }
        let mut t = Lipp::open(&path, &cfg).unwrap();
        assert_eq!(t.lookup(7).unwrap(), Some(8));
        t.check().unwrap();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn oracle_equivalence(
                init in proptest::collection::btree_set(0u64..1_000_000, 0..2000),
                ops in proptest::collection::vec((0u64..1_000_000, 0u8..3), 0..3000),
                ratio in 0.25f64..2.0,
            ) {
                let init: Vec<u64> = init.into_iter().collect();
                let cfg = LippConfig { rebuild_ratio: ratio, ..Default::default() };
                let (_d, mut t) = build(&recs(init.iter().copied()), cfg);
                let mut oracle: BTreeMap<u64, u64> = init.iter().map(|&k| (k, k + 1)).collect();
                for (k, op) in ops {
                    match op {
                        0 => { t.insert(k, k * 2).unwrap(); oracle.insert(k, k * 2); }
                        1 => prop_assert_eq!(t.lookup(k).unwrap(), oracle.get(&k).copied()),
                        _ => {
                            let want: Vec<Record> = oracle.range(k..).take(20).map(|(&k, &v)| Record::new(k, v)).collect();
                            prop_assert_eq!(t.scan(k, 20).unwrap(), want);
                        }
                    }
                }
                let all = t.check().unwrap();
                let want: Vec<Record> = oracle.iter().map(|(&k, &v)| Record::new(k, v)).collect();
                prop_assert_eq!(all, want);
            }
        }
    }
}
