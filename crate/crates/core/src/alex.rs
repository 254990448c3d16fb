//! Disk ALEX.
//!
//! Inner nodes hold a linear model and a child pointer array that the model
//! indexes directly. Data nodes hold a model, an occupancy bitmap and a gapped
//! array of records. A gap stores a copy of the next occupied key (u64::MAX
//! past the last record), so slot keys are non-decreasing and a lookup never
//! consults the bitmap.
//!
//! Layout `Separate` keeps inner nodes in `<path>.inner` and data nodes in
//! `<path>.data`; layout `Single` keeps both in `<path>`. Nodes are packed in
//! creation order and each occupies contiguous bytes. Replaced nodes are
//! abandoned in place.
//!
//! Bulk loading picks node fanouts with a cost model in the style of ALEX's
//! fanout tree: expected exponential-search iterations and shifts of a data
//! node against the traversal cost of one more inner level.

use std::path::{Path, PathBuf};

use crate::blockstore::{Access, BlockStore, DiskAddr, IoContext, Phase};
use crate::error::{Error, Result};
use crate::model::LinearModel;
use crate::{check_sorted_records, IndexKind, IndexShape, OrderedIndex, Record};

const META_KIND: u32 = 5;
const INNER_HEADER: usize = 32;
const DATA_HEADER: usize = 64;
const GAP_KEY: u64 = u64::MAX;
const DATA_FLAG: u32 = 1 << 31;
const MIN_CAPACITY: usize = 16;
const MAX_FANOUT_LOG: u32 = 20;

const EXP_SEARCH_WEIGHT: f64 = 20.0;
const SHIFT_WEIGHT: f64 = 0.5;
const TRAVERSAL_WEIGHT: f64 = 20.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlexLayout {
    /// Inner and data nodes in the same file.
    Single,
    /// One file per node type.
    #[default]
    Separate,
}

impl std::str::FromStr for AlexLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" | "1" => Ok(AlexLayout::Single),
            "separate" | "2" => Ok(AlexLayout::Separate),
            _ => Err(Error::Config(format!("unknown ALEX layout {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlexConfig {
    pub block_size: usize,
    pub buffer_capacity: usize,
    pub layout: AlexLayout,
    /// Density of data nodes written by bulk load.
    pub initial_density: f64,
    /// Density a node is rebuilt at by an SMO.
    pub lower_density: f64,
    /// An insert that would push a node above this density triggers an SMO.
    pub upper_density: f64,
    pub max_data_node_bytes: usize,
    pub max_inner_node_bytes: usize,
}

impl Default for AlexConfig {
    fn default() -> Self {
        AlexConfig {
            block_size: 4096,
            buffer_capacity: 0,
            layout: AlexLayout::Separate,
            initial_density: 0.7,
            lower_density: 0.6,
            upper_density: 0.8,
            max_data_node_bytes: 16 << 20,
            max_inner_node_bytes: 16 << 20,
        }
    }
}

fn bitmap_bytes(cap: usize) -> usize {
    cap.div_ceil(64) * 8
}

fn data_node_bytes(cap: usize) -> usize {
    DATA_HEADER + bitmap_bytes(cap) + cap * 16
}

fn is_data(addr: DiskAddr) -> bool {
    addr.block & DATA_FLAG != 0
}

fn tag_data(addr: DiskAddr) -> DiskAddr {
    DiskAddr::new(addr.block | DATA_FLAG, addr.offset)
}

fn untag(addr: DiskAddr) -> DiskAddr {
    DiskAddr::new(addr.block & !DATA_FLAG, addr.offset)
}

/// Least-squares fit of key → `i * scale`.
fn fit(keys: &[u64], scale: f64) -> LinearModel {
    let n = keys.len();
    let Some(&anchor) = keys.first() else { return LinearModel::new(0, 0.0, 0.0) };
    if n == 1 {
        return LinearModel::new(anchor, 0.0, 0.0);
    }
    let xs = |i: usize| (keys[i] - anchor) as f64;
    let mx = (0..n).map(xs).sum::<f64>() / n as f64;
    let my = (n - 1) as f64 * scale / 2.0;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for i in 0..n {
        let dx = xs(i) - mx;
        sxy += dx * (i as f64 * scale - my);
        sxx += dx * dx;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    LinearModel::new(anchor, slope, my - slope * mx)
}

/// Model-based placement: each key goes to its predicted slot, or just after
/// the previous key, leaving room for the keys still to come.
fn place(keys: &[u64], model: &LinearModel, cap: usize) -> Vec<usize> {
    let n = keys.len();
    let mut out = Vec::with_capacity(n);
    let mut next = 0usize;
    for (i, &k) in keys.iter().enumerate() {
        let pos = model.predict(k, cap).max(next).min(cap - (n - i));
        out.push(pos);
        next = pos + 1;
    }
    out
}

fn density_capacity(n: usize, density: f64) -> usize {
    ((n as f64 / density).floor() as usize).max(n + 1).max(MIN_CAPACITY)
}

/// Expected per-key cost of one data node over `keys`.
fn data_cost(keys: &[u64], density: f64) -> f64 {
    let n = keys.len();
    if n == 0 {
        return 0.0;
    }
    let cap = density_capacity(n, density);
    let model = fit(keys, cap as f64 / n as f64);
    let pos = place(keys, &model, cap);
    let mut iters = 0.0;
    let mut shifts = 0.0;
    let mut run = 0usize;
    for i in 0..n {
        let err = pos[i].abs_diff(model.predict(keys[i], cap));
        iters += ((err + 1) as f64).log2();
        if i > 0 && pos[i] == pos[i - 1] + 1 {
            run += 1;
        } else {
            shifts += (run * run) as f64;
            run = 1;
        }
    }
    shifts += (run * run) as f64;
    EXP_SEARCH_WEIGHT * iters / n as f64 + SHIFT_WEIGHT * shifts / (2 * n) as f64
}

/// Child boundaries of `keys` under `model` with `fanout` children:
/// child c receives `keys[bounds[c]..bounds[c + 1]]`.
fn partition(keys: &[u64], model: &LinearModel, fanout: usize) -> Vec<usize> {
    let mut bounds = vec![0usize; fanout + 1];
    let mut c = 0;
    for (i, &k) in keys.iter().enumerate() {
        let p = model.predict(k, fanout);
        while c < p {
            c += 1;
            bounds[c] = i;
        }
    }
    for b in bounds.iter_mut().skip(c + 1) {
        *b = keys.len();
    }
    bounds
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct DataHeader {
    model: LinearModel,
    cap: usize,
    count: usize,
    inserts: u64,
    shifts: u64,
    search_iters: u64,
}

impl DataHeader {
    fn to_bytes(self) -> [u8; DATA_HEADER] {
        let mut b = [0u8; DATA_HEADER];
        b[..24].copy_from_slice(&self.model.to_bytes());
        b[24..28].copy_from_slice(&(self.cap as u32).to_le_bytes());
        b[28..32].copy_from_slice(&(self.count as u32).to_le_bytes());
        b[32..40].copy_from_slice(&self.inserts.to_le_bytes());
        b[40..48].copy_from_slice(&self.shifts.to_le_bytes());
        b[48..56].copy_from_slice(&self.search_iters.to_le_bytes());
        b
    }

    fn from_bytes(b: &[u8]) -> Self {
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        DataHeader {
            model: LinearModel::from_bytes(&b[..24]),
            cap: u32::from_le_bytes(b[24..28].try_into().unwrap()) as usize,
            count: u32::from_le_bytes(b[28..32].try_into().unwrap()) as usize,
            inserts: u64_at(32),
            shifts: u64_at(40),
            search_iters: u64_at(48),
        }
    }
}

// A data node located on disk with its header in memory.
#[derive(Clone, Copy, Debug)]
struct DNode {
    base: u64,
    h: DataHeader,
}

impl DNode {
    fn bitmap_pos(&self) -> u64 {
        self.base + DATA_HEADER as u64
    }

    fn slot_pos(&self, i: usize) -> u64 {
        self.base + (DATA_HEADER + bitmap_bytes(self.h.cap) + i * 16) as u64
    }

    fn key_at(&self, s: &mut BlockStore, i: usize) -> Result<u64> {
        s.read_u64(self.slot_pos(i), Access::Leaf)
    }

    fn record_at(&self, s: &mut BlockStore, i: usize) -> Result<Record> {
        Ok(Record::from_bytes(&s.read_vec(self.slot_pos(i), 16, Access::Leaf)?))
    }

    /// First slot whose key exceeds `key`, by exponential search from the
    /// predicted slot. Also returns the number of probes.
    fn upper(&self, s: &mut BlockStore, key: u64) -> Result<(usize, u64)> {
        let cap = self.h.cap;
        let p = self.h.model.predict(key, cap);
        let mut probes = 1;
        let (mut lo, mut hi);
        if self.key_at(s, p)? <= key {
            lo = p + 1;
            hi = cap;
            let mut r = 1;
            while p + r < cap {
                probes += 1;
                if self.key_at(s, p + r)? > key {
                    hi = p + r;
                    break;
                }
                lo = p + r + 1;
                r *= 2;
            }
        } else {
            lo = 0;
            hi = p;
            let mut r = 1;
            while r <= p {
                probes += 1;
                if self.key_at(s, p - r)? <= key {
                    lo = p - r + 1;
                    break;
                }
                hi = p - r;
                r *= 2;
            }
        }
        let j = s.partition_entries(self.slot_pos(0), 16, lo, hi, lo + (hi - lo) / 2, Access::Leaf, |e| {
            u64::from_le_bytes(e[..8].try_into().unwrap()) <= key
        })?;
        Ok((j, probes))
    }

    fn word(&self, s: &mut BlockStore, w: usize) -> Result<u64> {
        s.read_u64(self.bitmap_pos() + w as u64 * 8, Access::Leaf)
    }

    fn words(&self) -> usize {
        self.h.cap.div_ceil(64)
    }

    /// First occupied slot at or after `from`.
    fn next_set(&self, s: &mut BlockStore, from: usize) -> Result<Option<usize>> {
        if from >= self.h.cap {
            return Ok(None);
        }
        let mut w = from / 64;
        let mut bits = self.word(s, w)? & (!0u64 << (from % 64));
        loop {
            if bits != 0 {
                let i = w * 64 + bits.trailing_zeros() as usize;
                return Ok((i < self.h.cap).then_some(i));
            }
            w += 1;
            if w >= self.words() {
                return Ok(None);
            }
            bits = self.word(s, w)?;
        }
    }

    /// Last occupied slot before `before`.
    fn prev_set(&self, s: &mut BlockStore, before: usize) -> Result<Option<usize>> {
        if before == 0 {
            return Ok(None);
        }
        let last = before - 1;
        let mut w = last / 64;
        let mut bits = self.word(s, w)? & (!0u64 >> (63 - last % 64));
        loop {
            if bits != 0 {
                return Ok(Some(w * 64 + 63 - bits.leading_zeros() as usize));
            }
            if w == 0 {
                return Ok(None);
            }
            w -= 1;
            bits = self.word(s, w)?;
        }
    }

    /// First empty slot at or after `from`.
    fn next_zero(&self, s: &mut BlockStore, from: usize) -> Result<Option<usize>> {
        if from >= self.h.cap {
            return Ok(None);
        }
        let mut w = from / 64;
        let mut bits = !self.word(s, w)? & (!0u64 << (from % 64));
        loop {
            if bits != 0 {
                let i = w * 64 + bits.trailing_zeros() as usize;
                return Ok((i < self.h.cap).then_some(i));
            }
            w += 1;
            if w >= self.words() {
                return Ok(None);
            }
            bits = !self.word(s, w)?;
        }
    }

    /// Last empty slot at or before `at`.
    fn prev_zero(&self, s: &mut BlockStore, at: usize) -> Result<Option<usize>> {
        let mut w = at / 64;
        let mut bits = !self.word(s, w)? & (!0u64 >> (63 - at % 64));
        loop {
            if bits != 0 {
                return Ok(Some(w * 64 + 63 - bits.leading_zeros() as usize));
            }
            if w == 0 {
                return Ok(None);
            }
            w -= 1;
            bits = !self.word(s, w)?;
        }
    }

    fn set_bit(&self, s: &mut BlockStore, i: usize) -> Result<()> {
        let pos = self.bitmap_pos() + (i / 64) as u64 * 8;
        let w = s.read_u64(pos, Access::Leaf)? | (1u64 << (i % 64));
        s.write_at(pos, &w.to_le_bytes(), Access::Leaf)
    }

    fn records(&self, s: &mut BlockStore) -> Result<Vec<Record>> {
        let bitmap = s.read_vec(self.bitmap_pos(), bitmap_bytes(self.h.cap), Access::Leaf)?;
        let slots = s.read_vec(self.slot_pos(0), self.h.cap * 16, Access::Leaf)?;
        let mut out = Vec::with_capacity(self.h.count);
        for i in 0..self.h.cap {
            if bitmap[i / 8] >> (i % 8) & 1 == 1 {
                out.push(Record::from_bytes(&slots[i * 16..i * 16 + 16]));
            }
        }
        Ok(out)
    }
}

/// Serialized data node for `records` with `cap` slots.
fn data_image(records: &[Record], cap: usize) -> (DataHeader, Vec<u8>) {
    let n = records.len();
    let keys: Vec<u64> = records.iter().map(|r| r.key).collect();
    let model = if n == 0 { LinearModel::new(0, 0.0, 0.0) } else { fit(&keys, cap as f64 / n as f64) };
    let pos = place(&keys, &model, cap);
    let h = DataHeader { model, cap, count: n, ..Default::default() };
    let bm = bitmap_bytes(cap);
    let mut bytes = vec![0u8; data_node_bytes(cap)];
    bytes[..DATA_HEADER].copy_from_slice(&h.to_bytes());
    let slots = DATA_HEADER + bm;
    let mut occupied = vec![false; cap];
    for (r, &p) in records.iter().zip(&pos) {
        occupied[p] = true;
        bytes[DATA_HEADER + p / 8] |= 1 << (p % 8);
        bytes[slots + p * 16..slots + p * 16 + 16].copy_from_slice(&r.to_bytes());
    }
    let mut next = GAP_KEY;
    for i in (0..cap).rev() {
        let at = slots + i * 16;
        if occupied[i] {
            next = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        } else {
            bytes[at..at + 8].copy_from_slice(&next.to_le_bytes());
        }
    }
    (h, bytes)
}

/// Midpoint of the parent slots `a..b` and the number of records routed
/// below it.
fn sideways_cut(model: &LinearModel, fanout: usize, a: usize, b: usize, records: &[Record]) -> (usize, usize) {
    let mid = a + (b - a) / 2;
    (mid, records.partition_point(|r| model.predict(r.key, fanout) < mid))
}

#[derive(Clone, Copy, Debug)]
struct InnerNode {
    addr: DiskAddr,
    model: LinearModel,
    fanout: usize,
}

#[derive(Clone, Copy, Debug)]
struct Step {
    node: InnerNode,
    idx: usize,
}

enum Smo {
    Expand,
    Sideways,
    DoubleParent,
    Down,
}

pub struct Alex {
    inner: BlockStore,
    data: Option<BlockStore>,
    root: DiskAddr,
    cfg: AlexConfig,
    len: u64,
    expansions: u64,
    splits: u64,
    max_capacity: usize,
    height: u32,
}

fn side_path(path: &Path, suffix: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

impl Alex {
    pub fn bulk_load(path: impl AsRef<Path>, records: &[Record], cfg: &AlexConfig) -> Result<Self> {
        Self::bulk_load_in(path, records, cfg, &IoContext::new(cfg.buffer_capacity))
    }

    pub fn bulk_load_in(path: impl AsRef<Path>, records: &[Record], cfg: &AlexConfig, ctx: &IoContext) -> Result<Self> {
        check_sorted_records(records)?;
        if records.last().is_some_and(|r| r.key == GAP_KEY) {
            return Err(Error::Input("key u64::MAX is reserved".into()));
        }
        let d = (cfg.lower_density, cfg.initial_density, cfg.upper_density);
        if !(0.0 < d.0 && d.0 <= d.1 && d.1 < d.2 && d.2 < 1.0) {
            return Err(Error::Config("densities must satisfy 0 < lower <= initial < upper < 1".into()));
        }
        if data_node_bytes(MIN_CAPACITY) > cfg.max_data_node_bytes || INNER_HEADER + 16 > cfg.max_inner_node_bytes {
            return Err(Error::Config("node size limits too small".into()));
        }
        let path = path.as_ref();
        let (inner_file, data_file) = match cfg.layout {
            AlexLayout::Single => (path.to_path_buf(), None),
            AlexLayout::Separate => (side_path(path, ".inner"), Some(side_path(path, ".data"))),
        };
        for f in std::iter::once(&inner_file).chain(data_file.as_ref()) {
            if f.exists() {
                std::fs::remove_file(f)?;
            }
        }
        let mut inner = BlockStore::open_in(&inner_file, cfg.block_size, ctx)?;
        inner.set_kind(META_KIND);
        let data = data_file.map(|f| BlockStore::open_in(f, cfg.block_size, ctx)).transpose()?;
        let mut a = Alex {
            inner,
            data,
            root: DiskAddr::NULL,
            cfg: cfg.clone(),
            len: records.len() as u64,
            expansions: 0,
            splits: 0,
            max_capacity: 0,
            height: 0,
        };
        a.root = a.build(records, 0)?;
        a.save_meta()?;
        Ok(a)
    }

    pub fn open(path: impl AsRef<Path>, cfg: &AlexConfig) -> Result<Self> {
        let path = path.as_ref();
        let ctx = IoContext::new(cfg.buffer_capacity);
        let (inner_file, data_file) = match cfg.layout {
            AlexLayout::Single => (path.to_path_buf(), None),
            AlexLayout::Separate => (side_path(path, ".inner"), Some(side_path(path, ".data"))),
        };
        let inner = BlockStore::open_in(&inner_file, cfg.block_size, &ctx)?;
        let m = inner.meta().extra().to_vec();
        if inner.meta().kind != META_KIND || m.len() < 40 {
            return Err(Error::Format(format!("{} is not an ALEX index", inner_file.display())));
        }
        let u = |i: usize| u64::from_le_bytes(m[i * 8..i * 8 + 8].try_into().unwrap());
        let data = data_file.map(|f| BlockStore::open_in(f, cfg.block_size, &ctx)).transpose()?;
        Ok(Alex {
            root: inner.root(),
            inner,
            data,
            cfg: cfg.clone(),
            len: u(0),
            expansions: u(1),
            splits: u(2),
            max_capacity: u(3) as usize,
            height: u(4) as u32,
        })
    }

    fn save_meta(&mut self) -> Result<()> {
        let m: Vec<u8> = [self.len, self.expansions, self.splits, self.max_capacity as u64, self.height as u64]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        self.inner.set_root(self.root);
        self.inner.set_meta_extra(m)
    }

    pub fn layout(&self) -> AlexLayout {
        self.cfg.layout
    }

    pub fn expansion_count(&self) -> u64 {
        self.expansions
    }

    pub fn split_count(&self) -> u64 {
        self.splits
    }

    /// Largest data node capacity in slots.
    pub fn max_data_capacity(&self) -> usize {
        self.max_capacity
    }

    fn dstore(&mut self) -> &mut BlockStore {
        match &mut self.data {
            Some(d) => d,
            None => &mut self.inner,
        }
    }

    fn bs(&self) -> usize {
        self.cfg.block_size
    }

    fn write_data_node(&mut self, records: &[Record], cap: usize) -> Result<DiskAddr> {
        let (_, bytes) = data_image(records, cap);
        let store = self.dstore();
        let addr = store.alloc_bytes(bytes.len())?;
        let pos = addr.byte_pos(store.block_size());
        store.write_at(pos, &bytes, Access::Leaf)?;
        self.max_capacity = self.max_capacity.max(cap);
        Ok(tag_data(addr))
    }

    fn alloc_inner(&mut self, fanout: usize) -> Result<DiskAddr> {
        self.inner.alloc_bytes(INNER_HEADER + fanout * 8)
    }

    fn write_inner(&mut self, addr: DiskAddr, model: &LinearModel, children: &[DiskAddr]) -> Result<()> {
        let mut bytes = Vec::with_capacity(INNER_HEADER + children.len() * 8);
        bytes.extend_from_slice(&model.to_bytes());
        bytes.extend_from_slice(&(children.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&[0u8; 4]);
        for c in children {
            bytes.extend_from_slice(&c.to_bytes());
        }
        let pos = addr.byte_pos(self.bs());
        self.inner.write_at(pos, &bytes, Access::Inner)
    }

    fn fits_data(&self, n: usize) -> bool {
        data_node_bytes(density_capacity(n, self.cfg.initial_density)) <= self.cfg.max_data_node_bytes
    }

    /// Picks a fanout for `keys`, or `None` when one data node is cheaper.
    /// Fanouts are tried in doubling order and the search stops at the first
    /// one that costs more than its predecessor.
    fn choose_fanout(&self, keys: &[u64]) -> Option<(LinearModel, usize)> {
        let n = keys.len();
        let density = self.cfg.initial_density;
        let mut prev = if self.fits_data(n) { data_cost(keys, density) } else { f64::INFINITY };
        let mut best = None;
        for lg in 1..=MAX_FANOUT_LOG {
            let f = 1usize << lg;
            if INNER_HEADER + f * 8 > self.cfg.max_inner_node_bytes || (f > n && prev.is_finite()) {
                break;
            }
            let model = fit(keys, f as f64 / n as f64);
            let bounds = partition(keys, &model, f);
            if (0..f).any(|c| bounds[c + 1] - bounds[c] == n) {
                continue;
            }
            let mut cost = TRAVERSAL_WEIGHT;
            for c in 0..f {
                let part = &keys[bounds[c]..bounds[c + 1]];
                if !part.is_empty() {
                    cost += part.len() as f64 / n as f64 * data_cost(part, density);
                }
            }
            if cost >= prev {
                break;
            }
            best = Some((model, f));
            prev = cost;
        }
        if best.is_none() && !self.fits_data(n) {
            // Nothing splits the keys and one node is too large: cut by rank.
            return Some((fit(keys, 2.0 / n as f64), 2));
        }
        best
    }

    fn build(&mut self, records: &[Record], depth: u32) -> Result<DiskAddr> {
        let keys: Vec<u64> = records.iter().map(|r| r.key).collect();
        let choice = if records.len() <= 1 || depth > 64 { None } else { self.choose_fanout(&keys) };
        self.height = self.height.max(depth + 1);
        let Some((model, f)) = choice else {
            let cap = density_capacity(records.len(), self.cfg.initial_density);
            return self.write_data_node(records, cap);
        };
        let addr = self.alloc_inner(f)?;
        let bounds = partition(&keys, &model, f);
        let mut children = Vec::with_capacity(f);
        for c in 0..f {
            let part = &records[bounds[c]..bounds[c + 1]];
            // Empty partitions share the previous data node when there is one.
            if part.is_empty() {
                if let Some(&prev) = children.last() {
                    if is_data(prev) {
                        children.push(prev);
                        continue;
                    }
                }
            }
            children.push(self.build(part, depth + 1)?);
        }
        self.write_inner(addr, &model, &children)?;
        Ok(addr)
    }

    fn read_inner(&mut self, addr: DiskAddr) -> Result<InnerNode> {
        let b = self.inner.read_vec(addr.byte_pos(self.bs()), INNER_HEADER, Access::Inner)?;
        Ok(InnerNode {
            addr,
            model: LinearModel::from_bytes(&b[..24]),
            fanout: u32::from_le_bytes(b[24..28].try_into().unwrap()) as usize,
        })
    }

    fn child(&mut self, node: &InnerNode, idx: usize) -> Result<DiskAddr> {
        let pos = node.addr.byte_pos(self.bs()) + (INNER_HEADER + idx * 8) as u64;
        Ok(DiskAddr::from_bytes(&self.inner.read_vec(pos, 8, Access::Inner)?))
    }

    fn set_children(&mut self, node: &InnerNode, from: usize, to: usize, child: DiskAddr) -> Result<()> {
        let pos = node.addr.byte_pos(self.bs()) + (INNER_HEADER + from * 8) as u64;
        let bytes: Vec<u8> = (from..to).flat_map(|_| child.to_bytes()).collect();
        self.inner.write_at(pos, &bytes, Access::Inner)
    }

    fn read_data(&mut self, addr: DiskAddr) -> Result<DNode> {
        let base = untag(addr).byte_pos(self.bs());
        let b = self.dstore().read_vec(base, DATA_HEADER, Access::Leaf)?;
        Ok(DNode { base, h: DataHeader::from_bytes(&b) })
    }

    /// Root-to-data-node descent by model prediction alone.
    fn descend(&mut self, key: u64, path: &mut Vec<Step>) -> Result<DiskAddr> {
        let mut addr = self.root;
        while !is_data(addr) {
            let node = self.read_inner(addr)?;
            let idx = node.model.predict(key, node.fanout);
            path.push(Step { node, idx });
            addr = self.child(&node, idx)?;
        }
        Ok(addr)
    }

    fn begin(&mut self) {
        self.inner.begin_op();
        if let Some(d) = &mut self.data {
            d.begin_op();
        }
    }

    fn end(&mut self) -> Result<()> {
        let a = self.inner.end_op();
        let b = self.data.as_mut().map_or(Ok(()), |d| d.end_op());
        a.and(b)
    }

    fn lookup_inner(&mut self, key: u64) -> Result<Option<u64>> {
        let addr = self.descend(key, &mut Vec::new())?;
        let node = self.read_data(addr)?;
        let s = self.dstore();
        let (j, _) = node.upper(s, key)?;
        if j > 0 {
            let r = node.record_at(s, j - 1)?;
            if r.key == key {
                return Ok(Some(r.payload));
            }
        }
        Ok(None)
    }

    fn insert_inner(&mut self, key: u64, payload: u64) -> Result<()> {
        let ctx = self.inner.context().clone();
        loop {
            ctx.set_phase(Phase::Search);
            let mut path = Vec::new();
            let addr = self.descend(key, &mut path)?;
            let node = self.read_data(addr)?;
            let s = self.dstore();
            let (j, probes) = node.upper(s, key)?;
            if j > 0 && node.key_at(s, j - 1)? == key {
                ctx.set_phase(Phase::Insert);
                return s.write_at(node.slot_pos(j - 1) + 8, &payload.to_le_bytes(), Access::Leaf);
            }
            if (node.h.count + 1) as f64 > self.cfg.upper_density * node.h.cap as f64 {
                ctx.set_phase(Phase::Smo);
                self.smo(addr, node, &path)?;
                continue;
            }
            let shifts = self.place_in(&node, j, key, payload)?;
            let mut h = node.h;
            h.count += 1;
            h.inserts += 1;
            h.shifts += shifts as u64;
            h.search_iters += probes;
            ctx.set_phase(Phase::Maintenance);
            self.dstore().write_at(node.base, &h.to_bytes(), Access::Leaf)?;
            self.len += 1;
            return Ok(());
        }
    }

    // Puts a new key into a node with room; `j` is the first slot with a
    // larger key. Returns the number of shifted records.
    fn place_in(&mut self, node: &DNode, j: usize, key: u64, payload: u64) -> Result<usize> {
        let s = self.dstore();
        let cap = node.h.cap;
        let left = node.prev_set(s, j)?;
        let right = node.next_set(s, j)?;
        let lo = left.map_or(0, |l| l + 1);
        let hi = right.unwrap_or(cap);
        let rec = Record::new(key, payload).to_bytes();
        s.context().set_phase(Phase::Insert);
        if lo < hi {
            // Gap available between the neighbours: take the one nearest the
            // prediction and refresh the gap copies before it.
            let pos = node.h.model.predict(key, cap).clamp(lo, hi - 1);
            let mut bytes = Vec::with_capacity((pos - lo + 1) * 16);
            for _ in lo..pos {
                bytes.extend_from_slice(&key.to_le_bytes());
                bytes.extend_from_slice(&[0u8; 8]);
            }
            bytes.extend_from_slice(&rec);
            s.write_at(node.slot_pos(lo), &bytes, Access::Leaf)?;
            node.set_bit(s, pos)?;
            return Ok(0);
        }
        // Neighbours are adjacent: shift toward the nearest gap.
        let r = hi;
        let gr = node.next_zero(s, r)?;
        let gl = match left {
            Some(l) => node.prev_zero(s, l)?,
            None => None,
        };
        let l = left.unwrap_or(0);
        let go_right = match (gl, gr) {
            (Some(a), Some(b)) => b - r <= l - a,
            (None, Some(_)) => true,
            (Some(_), None) => false,
            (None, None) => return Err(Error::Capacity("data node has no free slot".into())),
        };
        if go_right {
            let g = gr.unwrap();
            let moved = s.read_vec(node.slot_pos(r), (g - r) * 16, Access::Leaf)?;
            let mut bytes = rec.to_vec();
            bytes.extend_from_slice(&moved);
            s.write_at(node.slot_pos(r), &bytes, Access::Leaf)?;
            node.set_bit(s, g)?;
            Ok(g - r)
        } else {
            let g = gl.unwrap();
            let mut bytes = s.read_vec(node.slot_pos(g + 1), (l - g) * 16, Access::Leaf)?;
            bytes.extend_from_slice(&rec);
            s.write_at(node.slot_pos(g), &bytes, Access::Leaf)?;
            node.set_bit(s, g)?;
            Ok(l - g)
        }
    }

    // Run of parent slots pointing at `child` around `idx`.
    fn run_of(&mut self, parent: &InnerNode, idx: usize, child: DiskAddr) -> Result<(usize, usize)> {
        let (mut a, mut b) = (idx, idx + 1);
        while a > 0 && self.child(parent, a - 1)? == child {
            a -= 1;
        }
        while b < parent.fanout && self.child(parent, b)? == child {
            b += 1;
        }
        Ok((a, b))
    }

    fn replace_in_parent(&mut self, path: &[Step], old: DiskAddr, new: DiskAddr) -> Result<()> {
        match path.last() {
            None => {
                self.root = new;
                self.save_meta()
            }
            Some(step) => {
                let (a, b) = self.run_of(&step.node, step.idx, old)?;
                self.set_children(&step.node, a, b, new)
            }
        }
    }

    fn smo(&mut self, addr: DiskAddr, node: DNode, path: &[Step]) -> Result<()> {
        let records = node.records(self.dstore())?;
        let n = records.len() + 1;
        let cap = density_capacity(n, self.cfg.lower_density);
        let run = match path.last() {
            Some(step) => Some(self.run_of(&step.node, step.idx, addr)?),
            None => None,
        };
        let ld = self.cfg.lower_density;
        let max = self.cfg.max_data_node_bytes;
        let halves_fit = |cut: usize| {
            data_node_bytes(density_capacity(cut, ld)) <= max
                && data_node_bytes(density_capacity(records.len() - cut, ld)) <= max
        };
        let kind = if data_node_bytes(cap) <= max {
            Smo::Expand
        } else {
            match (path.last(), run) {
                (Some(step), Some((a, b))) if b - a >= 2 => {
                    let (_, cut) = sideways_cut(&step.node.model, step.node.fanout, a, b, &records);
                    if halves_fit(cut) { Smo::Sideways } else { Smo::Down }
                }
                (Some(step), Some((a, b)))
                    if INNER_HEADER + step.node.fanout * 16 <= self.cfg.max_inner_node_bytes =>
                {
                    let m = &step.node.model;
                    let doubled = LinearModel::new(m.anchor, m.slope * 2.0, m.intercept * 2.0);
                    let (_, cut) = sideways_cut(&doubled, step.node.fanout * 2, 2 * a, 2 * b, &records);
                    if halves_fit(cut) { Smo::DoubleParent } else { Smo::Down }
                }
                _ => Smo::Down,
            }
        };
        match kind {
            Smo::Expand => {
                let new = self.write_data_node(&records, cap)?;
                self.expansions += 1;
                self.replace_in_parent(path, addr, new)?;
            }
            Smo::Sideways => {
                let step = path.last().unwrap();
                let (a, b) = run.unwrap();
                self.split_sideways(&step.node, a, b, &records)?;
            }
            Smo::DoubleParent => {
                let step = *path.last().unwrap();
                let (a, b) = run.unwrap();
                let doubled = self.double(&step.node)?;
                self.replace_in_parent(&path[..path.len() - 1], step.node.addr, doubled.addr)?;
                self.split_sideways(&doubled, 2 * a, 2 * b, &records)?;
            }
            Smo::Down => {
                let keys: Vec<u64> = records.iter().map(|r| r.key).collect();
                let mut model = fit(&keys, 2.0 / keys.len().max(1) as f64);
                let mut bounds = partition(&keys, &model, 2);
                if bounds[1] == 0 || bounds[1] == keys.len() {
                    // Regression left one side empty: split at the key midpoint.
                    let (lo, hi) = (keys[0], keys[keys.len() - 1]);
                    model = LinearModel::new(lo, 2.0 / ((hi - lo) as f64 + 1.0), 0.0);
                    bounds = partition(&keys, &model, 2);
                }
                let iaddr = self.alloc_inner(2)?;
                let l = self.write_data_node(&records[..bounds[1]], density_capacity(bounds[1], self.cfg.lower_density))?;
                let rn = keys.len() - bounds[1];
                let r = self.write_data_node(&records[bounds[1]..], density_capacity(rn, self.cfg.lower_density))?;
                self.write_inner(iaddr, &model, &[l, r])?;
                self.replace_in_parent(path, addr, iaddr)?;
                self.height = self.height.max(path.len() as u32 + 2);
                self.splits += 1;
            }
        }
        self.save_meta()
    }

    fn split_sideways(&mut self, parent: &InnerNode, a: usize, b: usize, records: &[Record]) -> Result<()> {
        let (mid, cut) = sideways_cut(&parent.model, parent.fanout, a, b, records);
        let ld = self.cfg.lower_density;
        let l = self.write_data_node(&records[..cut], density_capacity(cut, ld))?;
        let r = self.write_data_node(&records[cut..], density_capacity(records.len() - cut, ld))?;
        self.set_children(parent, a, mid, l)?;
        self.set_children(parent, mid, b, r)?;
        self.splits += 1;
        Ok(())
    }

    /// Rewrites `node` with each child pointer duplicated and the model
    /// scaled to match.
    fn double(&mut self, node: &InnerNode) -> Result<InnerNode> {
        let pos = node.addr.byte_pos(self.bs()) + INNER_HEADER as u64;
        let bytes = self.inner.read_vec(pos, node.fanout * 8, Access::Inner)?;
        let children: Vec<DiskAddr> = bytes.chunks_exact(8).flat_map(|c| [DiskAddr::from_bytes(c); 2]).collect();
        let model = LinearModel::new(node.model.anchor, node.model.slope * 2.0, node.model.intercept * 2.0);
        let addr = self.alloc_inner(children.len())?;
        self.write_inner(addr, &model, &children)?;
        Ok(InnerNode { addr, model, fanout: children.len() })
    }

    /// Next data node to the right of the one reached through `path`.
    fn next_data(&mut self, path: &mut Vec<Step>) -> Result<Option<DiskAddr>> {
        while let Some(step) = path.last().copied() {
            let cur = self.child(&step.node, step.idx)?;
            let mut i = step.idx + 1;
            while i < step.node.fanout && self.child(&step.node, i)? == cur {
                i += 1;
            }
            if i == step.node.fanout {
                path.pop();
                continue;
            }
            path.last_mut().unwrap().idx = i;
            let mut addr = self.child(&step.node, i)?;
            while !is_data(addr) {
                let node = self.read_inner(addr)?;
                path.push(Step { node, idx: 0 });
                addr = self.child(&node, 0)?;
            }
            return Ok(Some(addr));
        }
        Ok(None)
    }

    fn scan_inner(&mut self, start: u64, count: usize) -> Result<Vec<Record>> {
        let mut out = Vec::with_capacity(count.min(1 << 16));
        let mut path = Vec::new();
        let mut addr = self.descend(start, &mut path)?;
        let node = self.read_data(addr)?;
        let s = self.dstore();
        let mut from = if start == 0 { 0 } else { node.upper(s, start - 1)?.0 };
        loop {
            let node = self.read_data(addr)?;
            let s = self.dstore();
            // The bitmap is consulted word by word, so only the bitmap blocks
            // covering the scanned range are fetched.
            let mut i = from;
            while out.len() < count {
                match node.next_set(s, i)? {
                    Some(p) => {
                        out.push(node.record_at(s, p)?);
                        i = p + 1;
                    }
                    None => break,
                }
            }
            if out.len() >= count {
                return Ok(out);
            }
            match self.next_data(&mut path)? {
                Some(a) => {
                    addr = a;
                    from = 0;
                }
                None => return Ok(out),
            }
        }
    }

    /// Audit: bitmap/slot coherence, sortedness, gap copies, density bound
    /// and routing of every record back to its node. Returns the records.
    pub fn check(&mut self) -> Result<Vec<Record>> {
        let mut out = Vec::<Record>::new();
        let mut path = Vec::new();
        let mut addr = Some(self.descend(0, &mut path)?);
        let mut nodes = 0;
        let upper = self.cfg.upper_density;
        while let Some(a) = addr {
            let node = self.read_data(a)?;
            let cap = node.h.cap;
            let s = self.dstore();
            let bitmap = s.read_vec(node.bitmap_pos(), bitmap_bytes(cap), Access::Leaf)?;
            let slots = s.read_vec(node.slot_pos(0), cap * 16, Access::Leaf)?;
            let mut next = GAP_KEY;
            let mut count = 0;
            for i in (0..cap).rev() {
                let r = Record::from_bytes(&slots[i * 16..i * 16 + 16]);
                if bitmap[i / 8] >> (i % 8) & 1 == 1 {
                    if r.key >= next {
                        return Err(Error::Format(format!("data node {a:?} unsorted at slot {i}")));
                    }
                    next = r.key;
                    count += 1;
                } else if r.key != next {
                    return Err(Error::Format(format!("data node {a:?} gap {i} holds {} not {next}", r.key)));
                }
            }
            if count != node.h.count {
                return Err(Error::Format(format!("data node {a:?} count {} but {count} bits", node.h.count)));
            }
            if count as f64 > upper * cap as f64 && cap > MIN_CAPACITY {
                return Err(Error::Format(format!("data node {a:?} above the density bound")));
            }
            let recs = node.records(s)?;
            for r in &recs {
                if self.descend(r.key, &mut Vec::new())? != a {
                    return Err(Error::Format(format!("key {} does not route to its node", r.key)));
                }
            }
            if let (Some(p), Some(f)) = (out.last(), recs.first()) {
                if p.key >= f.key {
                    return Err(Error::Format("data nodes out of order".into()));
                }
            }
            out.extend(recs);
            nodes += 1;
            addr = self.next_data(&mut path)?;
        }
        if out.len() as u64 != self.len {
            return Err(Error::Format(format!("{} records across {nodes} nodes, expected {}", out.len(), self.len)));
        }
        Ok(out)
    }

    /// Node counts and depth: (inner nodes, data nodes, height in levels).
    pub fn node_stats(&mut self) -> Result<(u64, u64, u32)> {
        let (mut inner, mut data, mut height) = (0u64, 0u64, 0u32);
        let mut stack = vec![(self.root, 1u32)];
        while let Some((a, d)) = stack.pop() {
            height = height.max(d);
            if is_data(a) {
                data += 1;
                continue;
            }
            inner += 1;
            let node = self.read_inner(a)?;
            let mut prev = DiskAddr::NULL;
            for i in 0..node.fanout {
                let c = self.child(&node, i)?;
                if c != prev {
                    stack.push((c, d + 1));
                    prev = c;
                }
            }
        }
        Ok((inner, data, height))
    }

    pub fn sync(&mut self) -> Result<()> {
        self.save_meta()?;
        self.inner.sync()?;
        if let Some(d) = &mut self.data {
            d.sync()?;
        }
        Ok(())
    }
}

impl OrderedIndex for Alex {
    fn kind(&self) -> IndexKind {
        IndexKind::Alex
    }

    fn lookup(&mut self, key: u64) -> Result<Option<u64>> {
        self.inner.context().set_phase(Phase::Search);
        self.begin();
        let r = self.lookup_inner(key);
        self.end()?;
        r
    }

    fn insert(&mut self, key: u64, payload: u64) -> Result<()> {
        if key == GAP_KEY {
            return Err(Error::Input("key u64::MAX is reserved".into()));
        }
        self.begin();
        let r = self.insert_inner(key, payload);
        let e = self.end();
        self.inner.context().set_phase(Phase::Search);
        r.and(e)
    }

    fn scan(&mut self, start: u64, count: usize) -> Result<Vec<Record>> {
        self.inner.context().set_phase(Phase::Search);
        if count == 0 {
            return Ok(Vec::new());
        }
        self.begin();
        let r = self.scan_inner(start, count);
        self.end()?;
        r
    }

    fn len(&self) -> u64 {
        self.len
    }

    fn io(&self) -> &IoContext {
        self.inner.context()
    }

    fn storage_bytes(&self) -> u64 {
        self.inner.storage_bytes() + self.data.as_ref().map_or(0, |d| d.storage_bytes())
    }

    fn smo_count(&self) -> u64 {
        self.expansions + self.splits
    }

    fn shape(&self) -> IndexShape {
        IndexShape {
            items: self.len,
            height: self.height,
            segments: 0,
            max_node_items: self.max_capacity as u64,
            run_sizes: Vec::new(),
            pinned_bytes: match self.cfg.layout {
                AlexLayout::Separate => self.inner.storage_bytes(),
                AlexLayout::Single => 0,
            },
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

    fn build(records: &[Record], cfg: AlexConfig) -> (tempfile::TempDir, Alex) {
        let dir = tempfile::tempdir().unwrap();
        let t = Alex::bulk_load(dir.path().join("alex"), records, &cfg).unwrap();
        (dir, t)
    }

    fn random_keys(n: usize, seed: u64) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<u64> = (0..n).map(|_| rng.random_range(0..1u64 << 40)).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    // Heavy-tailed keys that a single linear model fits badly.
    fn skewed_keys(n: usize, seed: u64) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<u64> = (0..n)
            .map(|_| {
                let u: f64 = rng.random_range(1e-9..1.0);
                ((-u.ln()).powi(4) * 1e9) as u64
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    fn small_nodes() -> AlexConfig {
        AlexConfig { max_data_node_bytes: data_node_bytes(256), max_inner_node_bytes: 1024, ..Default::default() }
    }

    #[test]
    fn fit_is_exact_on_linear_keys() {
        let keys: Vec<u64> = (0..100).map(|i| 1000 + 7 * i).collect();
        let m = fit(&keys, 2.0);
        for (i, &k) in keys.iter().enumerate() {
            assert!((m.predict_f(k) - 2.0 * i as f64).abs() < 1e-9);
        }
        assert!(data_cost(&keys, 0.7) < 1.0);
    }

    #[test]
    fn placement_keeps_order_and_room() {
        let keys = skewed_keys(500, 3);
        let cap = density_capacity(keys.len(), 0.7);
        let pos = place(&keys, &fit(&keys, cap as f64 / keys.len() as f64), cap);
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(*pos.last().unwrap() < cap);
    }

    #[test]
    fn data_image_gap_copies() {
        let (h, bytes) = data_image(&recs([5, 9, 20]), 16);
        assert_eq!(h.count, 3);
        let slots = DATA_HEADER + bitmap_bytes(16);
        let key = |i: usize| u64::from_le_bytes(bytes[slots + i * 16..slots + i * 16 + 8].try_into().unwrap());
        let keys: Vec<u64> = (0..16).map(key).collect();
        assert!(keys.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(keys[15], GAP_KEY);
        // Every slot between the records of 5 and 9 copies 9.
        let bits = |i: usize| bytes[DATA_HEADER + i / 8] >> (i % 8) & 1 == 1;
        let p5 = (0..16).find(|&i| bits(i) && keys[i] == 5).unwrap();
        let p9 = (0..16).find(|&i| bits(i) && keys[i] == 9).unwrap();
        assert!((p5 + 1..p9).all(|i| !bits(i) && keys[i] == 9));
        assert_eq!((0..16).filter(|&i| bits(i)).count(), 3);
    }

    #[test]
    fn uniform_keys_fit_one_data_node() {
        let keys = random_keys(50_000, 1);
        let (_d, mut t) = build(&recs(keys.iter().copied()), AlexConfig::default());
        let (inner, data, height) = t.node_stats().unwrap();
        assert_eq!((inner, data, height), (0, 1, 1));
        for &k in keys.iter().step_by(97) {
            assert_eq!(t.lookup(k).unwrap(), Some(k + 1));
        }
        assert_eq!(t.check().unwrap().len(), keys.len());
    }

    #[test]
    fn skewed_keys_get_inner_nodes() {
        let keys = skewed_keys(100_000, 2);
        let (_d, mut t) = build(&recs(keys.iter().copied()), AlexConfig::default());
        let (inner, data, height) = t.node_stats().unwrap();
        assert!(inner >= 1 && data >= 2, "{inner} {data}");
        assert_eq!(t.shape().height, height);
        for &k in keys.iter().step_by(101) {
            assert_eq!(t.lookup(k).unwrap(), Some(k + 1));
            assert_eq!(t.lookup(k + 1).unwrap().is_some(), keys.binary_search(&(k + 1)).is_ok());
        }
        t.check().unwrap();
    }

    #[test]
    fn lookup_reads_few_blocks() {
        let keys = random_keys(100_000, 4);
        let (_d, mut t) = build(&recs(keys.iter().copied()), AlexConfig::default());
        t.io().reset_stats();
        let probes = 500;
        for &k in keys.iter().step_by(keys.len() / probes) {
            t.lookup(k).unwrap();
        }
        let per = t.io().stats().blocks_read as f64 / probes as f64;
        assert!(per < 4.0, "{per}");
        assert_eq!(t.io().stats().blocks_written, 0);
    }

    #[test]
    fn inserts_into_gaps_and_shifts() {
        let (_d, mut t) = build(&recs((0..100).map(|i| i * 100)), AlexConfig::default());
        // Dense runs force shifts in both directions.
        for k in (1..60).chain((9000..9050).rev()) {
            t.insert(k, 7).unwrap();
        }
        let all = t.check().unwrap();
        assert_eq!(all.len(), 100 + 59 + 49);
        assert_eq!(t.lookup(30).unwrap(), Some(7));
        assert_eq!(t.lookup(9900).unwrap(), Some(9901));
        assert!(t.expansion_count() >= 1);
    }

    #[test]
    fn upsert_overwrites() {
        let (_d, mut t) = build(&recs([10, 20, 30]), AlexConfig::default());
        t.insert(20, 99).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.lookup(20).unwrap(), Some(99));
        assert!(t.insert(u64::MAX, 1).is_err());
    }

    #[test]
    fn empty_index_grows() {
        let (_d, mut t) = build(&[], AlexConfig::default());
        assert_eq!(t.lookup(5).unwrap(), None);
        assert!(t.scan(0, 10).unwrap().is_empty());
        let keys = random_keys(3000, 5);
        for &k in &keys {
            t.insert(k, k + 1).unwrap();
        }
        assert_eq!(t.check().unwrap(), recs(keys.iter().copied()));
    }

    #[test]
    fn small_node_limit_forces_splits() {
        let (_d, mut t) = build(&recs(random_keys(2000, 6)), small_nodes());
        let mut oracle: BTreeMap<u64, u64> = random_keys(2000, 6).into_iter().map(|k| (k, k + 1)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20_000 {
            // Clustered inserts hit the same nodes repeatedly.
            let k = rng.random_range(0..1u64 << 30);
            t.insert(k, 1).unwrap();
            oracle.insert(k, 1);
        }
        assert!(t.split_count() > 0);
        let all = t.check().unwrap();
        let want: Vec<Record> = oracle.iter().map(|(&k, &v)| Record::new(k, v)).collect();
        assert_eq!(all, want);
        assert!(t.max_data_capacity() <= 256 * 2);
        let (_, _, height) = t.node_stats().unwrap();
        assert_eq!(t.shape().height, height);
    }

    #[test]
    fn scan_crosses_nodes() {
        let keys = skewed_keys(50_000, 8);
        let (_d, mut t) = build(&recs(keys.iter().copied()), AlexConfig::default());
        for start in [0, keys[100], keys[keys.len() / 2] + 1, keys[keys.len() - 3]] {
            let from = keys.partition_point(|&k| k < start);
            let want = recs(keys[from..].iter().copied().take(1000));
            assert_eq!(t.scan(start, 1000).unwrap(), want);
        }
    }

    #[test]
    fn layouts_agree() {
        let keys = skewed_keys(30_000, 9);
        let single = AlexConfig { layout: AlexLayout::Single, ..Default::default() };
        let (_a, mut one) = build(&recs(keys.iter().copied()), single);
        let (_b, mut two) = build(&recs(keys.iter().copied()), AlexConfig::default());
        assert_eq!(one.check().unwrap(), two.check().unwrap());
        assert_eq!(one.node_stats().unwrap(), two.node_stats().unwrap());
        assert_eq!(one.shape().pinned_bytes, 0);
        assert!(two.shape().pinned_bytes > 0);
    }

    #[test]
    fn hybrid_lookup_counts_data_blocks_only() {
        let keys = skewed_keys(50_000, 10);
        let (_d, mut t) = build(&recs(keys.iter().copied()), AlexConfig::default());
        t.io().reset_stats();
        t.lookup(keys[777]).unwrap();
        let full = t.io().stats();
        t.io().set_hybrid(true);
        t.io().reset_stats();
        t.lookup(keys[777]).unwrap();
        let hyb = t.io().stats();
        assert_eq!(hyb.blocks_read, full.leaf_blocks_read());
        assert_eq!(hyb.inner_blocks_read, 0);
    }

    #[test]
    fn reopen_after_sync() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alex");
        let keys = skewed_keys(10_000, 11);
        let cfg = AlexConfig::default();
        {
            let mut t = Alex::bulk_load(&path, &recs(keys.iter().copied()), &cfg).unwrap();
            t.insert(3, 4).unwrap();
            t.sync().unwrap();
        }
        let mut t = Alex::open(&path, &cfg).unwrap();
        assert_eq!(t.len(), keys.len() as u64 + keys.binary_search(&3).map_or(1, |_| 0));
        assert_eq!(t.lookup(3).unwrap(), Some(4));
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
                single in any::<bool>(),
            ) {
                let init: Vec<u64> = init.into_iter().collect();
                let layout = if single { AlexLayout::Single } else { AlexLayout::Separate };
                let cfg = AlexConfig { layout, ..small_nodes() };
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
