//! Dynamic disk PGM.
//!
//! An LSM hierarchy of immutable static PGM runs, each in its own file,
//! fronted by a small sorted insert array in the principal file. Slot `i`
//! holds a run of at most `C0 * 2^i` records. A full insert array merges with
//! every occupied slot from 0 upwards into the first slot that is free and
//! large enough, like a binary counter.
//!
//! A run file stores its records from block 1, immediately followed by the
//! segment levels bottom-up. A segment entry is 32 bytes: first key, slope,
//! intercept, start index in the level below and count. The top level is a
//! single root entry.

use std::path::{Path, PathBuf};

use crate::blockstore::{Access, BlockStore, IoContext, Phase};
use crate::error::{Error, Result};
use crate::model::{optimal_pla_with, LinearModel};
use crate::{check_sorted_records, IndexKind, IndexShape, OrderedIndex, Record};

const META_KIND: u32 = 3;
const RUN_META_KIND: u32 = 4;
const ENTRY: usize = 32;
/// Insert-array records at 4 KB blocks (three blocks).
pub const BASE_INSERT_CAPACITY: usize = 585;

#[derive(Clone, Debug)]
pub struct PgmConfig {
    pub block_size: usize,
    pub buffer_capacity: usize,
    pub epsilon: u64,
    /// Error bound of the levels above the leaf segments.
    pub inner_epsilon: u64,
    /// Insert-array capacity; `None` scales 585 records with the block size.
    pub insert_capacity: Option<usize>,
    /// Accept only keys above every stored key; they are appended to the
    /// insert array without a search.
    pub append_only: bool,
}

impl Default for PgmConfig {
    fn default() -> Self {
        PgmConfig {
            block_size: 4096,
            buffer_capacity: 0,
            epsilon: 64,
            inner_epsilon: 4,
            insert_capacity: None,
            append_only: false,
        }
    }
}

impl PgmConfig {
    pub fn c0(&self) -> usize {
        self.insert_capacity.unwrap_or(BASE_INSERT_CAPACITY * self.block_size / 4096).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Entry {
    model: LinearModel,
    start: usize,
    count: usize,
}

impl Entry {
    fn first_key(&self) -> u64 {
        self.model.anchor
    }

    fn encode(&self) -> [u8; ENTRY] {
        let b = self.model.to_bytes();
        let mut out = [0u8; ENTRY];
        out[..24].copy_from_slice(&b);
        out[24..28].copy_from_slice(&(self.start as u32).to_le_bytes());
        out[28..].copy_from_slice(&(self.count as u32).to_le_bytes());
        out
    }

    fn decode(b: &[u8]) -> Self {
        Entry {
            model: LinearModel::from_bytes(&b[..24]),
            start: u32::from_le_bytes(b[24..28].try_into().unwrap()) as usize,
            count: u32::from_le_bytes(b[28..32].try_into().unwrap()) as usize,
        }
    }
}

fn entry_key(b: &[u8]) -> u64 {
    u64::from_le_bytes(b[..8].try_into().unwrap())
}

#[derive(Clone, Copy, Debug)]
struct Level {
    pos: u64,
    count: usize,
}

struct Run {
    store: BlockStore,
    slot: usize,
    gen: u64,
    n: usize,
    records_pos: u64,
    /// Bottom-up; the last level has one entry.
    levels: Vec<Level>,
}

impl Run {
    fn level_bytes(&self) -> u64 {
        self.levels.iter().map(|l| (l.count * ENTRY) as u64).sum()
    }

    fn save_meta(&mut self, eps: u64, eps_inner: u64) -> Result<()> {
        let mut m = Vec::new();
        for v in [self.n as u64, eps, eps_inner, self.records_pos, self.levels.len() as u64] {
            m.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.levels {
            m.extend_from_slice(&l.pos.to_le_bytes());
            m.extend_from_slice(&(l.count as u64).to_le_bytes());
        }
        self.store.set_meta_extra(m)
    }
}

fn run_path(path: &Path, slot: usize, gen: u64) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(format!(".run{slot}.{gen}"));
    PathBuf::from(p)
}

fn records_from(bytes: &[u8]) -> Vec<Record> {
    bytes.chunks_exact(16).map(Record::from_bytes).collect()
}

fn u64s(b: &[u8]) -> Vec<u64> {
    b.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()
}

/// Segment levels over `keys`, bottom-up, ending in a single root entry.
fn build_levels(keys: &[u64], eps: u64, eps_inner: u64) -> Vec<Vec<Entry>> {
    let mut levels: Vec<Vec<Entry>> = Vec::new();
    let mut below: Vec<u64> = keys.to_vec();
    let mut e = eps;
    loop {
        let mut level = Vec::new();
        let mut start = 0;
        optimal_pla_with(below.len(), |i| below[i], e, |s| {
            level.push(Entry { model: s.model, start, count: s.count });
            start += s.count;
        });
        let done = level.len() == 1;
        below = level.iter().map(|x| x.first_key()).collect();
        levels.push(level);
        if done {
            return levels;
        }
        e = eps_inner;
    }
}

fn build_run(path: &Path, slot: usize, gen: u64, records: &[Record], cfg: (usize, u64, u64), ctx: &IoContext) -> Result<Run> {
    let (bs, eps, eps_inner) = cfg;
    let file = run_path(path, slot, gen);
    if file.exists() {
        std::fs::remove_file(&file)?;
    }
    let mut store = BlockStore::open_in(&file, bs, ctx)?;
    store.set_kind(RUN_META_KIND);
    let keys: Vec<u64> = records.iter().map(|r| r.key).collect();
    let built = build_levels(&keys, eps, eps_inner);
    let rec_bytes = records.len() * 16;
    let total = rec_bytes + built.iter().map(|l| l.len() * ENTRY).sum::<usize>();
    let nblocks = total.div_ceil(bs) as u64;
    let first = store.allocate(nblocks)?;
    let records_pos = first as u64 * bs as u64;
    let mut image = Vec::with_capacity(nblocks as usize * bs);
    for r in records {
        image.extend_from_slice(&r.to_bytes());
    }
    let mut levels = Vec::with_capacity(built.len());
    for l in &built {
        levels.push(Level { pos: records_pos + image.len() as u64, count: l.len() });
        for e in l {
            image.extend_from_slice(&e.encode());
        }
    }
    image.resize(nblocks as usize * bs, 0);
    // A block holding any record counts as leaf data; pure level blocks are
    // inner structure.
    for (i, chunk) in image.chunks_exact(bs).enumerate() {
        let access = if i * bs < rec_bytes { Access::Leaf } else { Access::Inner };
        store.write_block_as(first + i as u32, chunk, access)?;
    }
    let mut run = Run { store, slot, gen, n: records.len(), records_pos, levels };
    run.save_meta(eps, eps_inner)?;
    Ok(run)
}

/// Merges two sorted runs; on equal keys the record from `newer` wins.
fn merge_newest(newer: &[Record], older: &[Record]) -> Vec<Record> {
    let mut out = Vec::with_capacity(newer.len() + older.len());
    let (mut i, mut j) = (0, 0);
    while i < newer.len() && j < older.len() {
        let (a, b) = (newer[i], older[j]);
        if a.key <= b.key {
            out.push(a);
            i += 1;
            if a.key == b.key {
                j += 1;
            }
        } else {
            out.push(b);
            j += 1;
        }
    }
    out.extend_from_slice(&newer[i..]);
    out.extend_from_slice(&older[j..]);
    out
}

// First index in the segment's range failing `pred`, searched in the ε
// window around the prediction with a fallback for float error at the edges.
#[allow(clippy::too_many_arguments)]
fn window_partition(
    store: &mut BlockStore,
    base: u64,
    width: usize,
    seg: &Entry,
    key: u64,
    eps: u64,
    access: Access,
    pred: impl Fn(&[u8]) -> bool,
) -> Result<usize> {
    let (start, end) = (seg.start, seg.start + seg.count);
    let p = start + seg.model.predict(key, seg.count);
    let w = eps as usize + 1;
    let lo = p.saturating_sub(w).max(start);
    let hi = (p + w + 1).min(end);
    let j = store.partition_entries(base, width, lo, hi, p, access, &pred)?;
    let at = |s: &mut BlockStore, i: usize| s.read_vec(base + (i * width) as u64, width, access);
    if j == lo && lo > start && !pred(&at(store, lo - 1)?) {
        return store.partition_entries(base, width, start, lo, start + (lo - start) / 2, access, &pred);
    }
    if j == hi && hi < end && pred(&at(store, hi)?) {
        return store.partition_entries(base, width, hi, end, hi + (end - hi) / 2, access, &pred);
    }
    Ok(j)
}

impl Run {
    fn read_entry(&mut self, level: usize, i: usize) -> Result<Entry> {
        let pos = self.levels[level].pos + (i * ENTRY) as u64;
        Ok(Entry::decode(&self.store.read_vec(pos, ENTRY, Access::Inner)?))
    }

    fn read_record(&mut self, i: usize) -> Result<Record> {
        Ok(Record::from_bytes(&self.store.read_vec(self.records_pos + i as u64 * 16, 16, Access::Leaf)?))
    }

    /// Index of the first record with key ≥ `key`, and the record if equal.
    fn seek(&mut self, key: u64, eps: u64, eps_inner: u64) -> Result<(usize, Option<Record>)> {
        let top = self.levels.len() - 1;
        let mut seg = self.read_entry(top, 0)?;
        if key < seg.first_key() {
            return Ok((0, None));
        }
        for l in (0..top).rev() {
            let base = self.levels[l].pos;
            let j = window_partition(&mut self.store, base, ENTRY, &seg, key, eps_inner, Access::Inner, |e| entry_key(e) <= key)?;
            seg = self.read_entry(l, j - 1)?;
        }
        let base = self.records_pos;
        let j = window_partition(&mut self.store, base, 16, &seg, key, eps, Access::Leaf, |e| entry_key(e) < key)?;
        if j < self.n {
            let r = self.read_record(j)?;
            if r.key == key {
                return Ok((j, Some(r)));
            }
        }
        Ok((j, None))
    }

    fn read_all(&mut self) -> Result<Vec<Record>> {
        Ok(records_from(&self.store.read_vec(self.records_pos, self.n * 16, Access::Leaf)?))
    }
}

// Reads records [from, end of from's block) capped at `end`.
fn read_chunk(store: &mut BlockStore, base: u64, from: usize, end: usize) -> Result<Vec<Record>> {
    let bs = store.block_size() as u64;
    let pos = base + from as u64 * 16;
    let blk_end = (pos / bs + 1) * bs;
    let to = (((blk_end - base) / 16) as usize).clamp(from + 1, end);
    Ok(records_from(&store.read_vec(pos, (to - from) * 16, Access::Leaf)?))
}

struct Cursor {
    /// 0 is the insert array, `r + 1` is run `r`.
    src: usize,
    next: usize,
    end: usize,
    buf: Vec<Record>,
    at: usize,
}

pub struct DynamicPgm {
    path: PathBuf,
    main: BlockStore,
    runs: Vec<Run>,
    c0: usize,
    eps: u64,
    eps_inner: u64,
    append_only: bool,
    array_block: u32,
    array_count: usize,
    next_gen: u64,
    max_key: Option<u64>,
    len: u64,
    merges: u64,
}

impl DynamicPgm {
    pub fn bulk_load(path: impl AsRef<Path>, records: &[Record], cfg: &PgmConfig) -> Result<Self> {
        Self::bulk_load_in(path, records, cfg, &IoContext::new(cfg.buffer_capacity))
    }

    pub fn bulk_load_in(path: impl AsRef<Path>, records: &[Record], cfg: &PgmConfig, ctx: &IoContext) -> Result<Self> {
        check_sorted_records(records)?;
        if cfg.epsilon == 0 || cfg.inner_epsilon == 0 {
            return Err(Error::Config("epsilon must be at least 1".into()));
        }
        let path = path.as_ref().to_path_buf();
        if path.exists() {
            std::fs::remove_file(&path)?;
        }
        let mut main = BlockStore::open_in(&path, cfg.block_size, ctx)?;
        main.set_kind(META_KIND);
        let c0 = cfg.c0();
        let array_block = main.allocate((c0 * 16).div_ceil(cfg.block_size) as u64)?;
        let mut p = DynamicPgm {
            path,
            main,
            runs: Vec::new(),
            c0,
            eps: cfg.epsilon,
            eps_inner: cfg.inner_epsilon,
            append_only: cfg.append_only,
            array_block,
            array_count: 0,
            next_gen: 1,
            max_key: records.last().map(|r| r.key),
            len: records.len() as u64,
            merges: 0,
        };
        if !records.is_empty() {
            let mut slot = 0;
            while p.slot_capacity(slot) < records.len() as u128 {
                slot += 1;
            }
            p.add_run(slot, records)?;
        }
        p.save_meta()?;
        Ok(p)
    }

    /// Reopens an index written by `bulk_load` and later synced.
    pub fn open(path: impl AsRef<Path>, cfg: &PgmConfig) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let ctx = IoContext::new(cfg.buffer_capacity);
        let main = BlockStore::open_in(&path, cfg.block_size, &ctx)?;
        if main.meta().kind != META_KIND {
            return Err(Error::Format(format!("{} is not a PGM index", path.display())));
        }
        let m = u64s(main.meta().extra());
        if m.len() < 10 || m.len() < 10 + 2 * m[9] as usize {
            return Err(Error::Format("truncated PGM manifest".into()));
        }
        let mut p = DynamicPgm {
            path,
            main,
            runs: Vec::new(),
            c0: m[0] as usize,
            eps: m[1],
            eps_inner: m[2],
            array_block: m[3] as u32,
            array_count: m[4] as usize,
            next_gen: m[5],
            append_only: m[6] != 0,
            max_key: (m[7] != 0).then_some(m[8]),
            len: 0,
            merges: 0,
        };
        for s in 0..m[9] as usize {
            let (slot, gen) = (m[10 + 2 * s] as usize, m[11 + 2 * s]);
            let store = BlockStore::open_in(run_path(&p.path, slot, gen), cfg.block_size, &ctx)?;
            let rm = u64s(store.meta().extra());
            if store.meta().kind != RUN_META_KIND || rm.len() < 5 || rm.len() < 5 + 2 * rm[4] as usize {
                return Err(Error::Format(format!("bad run file for slot {slot}")));
            }
            let levels = (0..rm[4] as usize).map(|l| Level { pos: rm[5 + 2 * l], count: rm[6 + 2 * l] as usize }).collect();
            p.runs.push(Run { store, slot, gen, n: rm[0] as usize, records_pos: rm[3], levels });
        }
        p.len = p.runs.iter().map(|r| r.n as u64).sum::<u64>() + p.array_count as u64;
        Ok(p)
    }

    fn save_meta(&mut self) -> Result<()> {
        let mut m = vec![
            self.c0 as u64,
            self.eps,
            self.eps_inner,
            self.array_block as u64,
            self.array_count as u64,
            self.next_gen,
            self.append_only as u64,
            self.max_key.is_some() as u64,
            self.max_key.unwrap_or(0),
            self.runs.len() as u64,
        ];
        for r in &self.runs {
            m.push(r.slot as u64);
            m.push(r.gen);
        }
        self.main.set_meta_extra(m.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    fn slot_capacity(&self, slot: usize) -> u128 {
        (self.c0 as u128) << slot.min(100)
    }

    fn array_pos(&self) -> u64 {
        self.array_block as u64 * self.main.block_size() as u64
    }

    fn add_run(&mut self, slot: usize, records: &[Record]) -> Result<()> {
        let gen = self.next_gen;
        self.next_gen += 1;
        let cfg = (self.main.block_size(), self.eps, self.eps_inner);
        let run = build_run(&self.path, slot, gen, records, cfg, self.main.context())?;
        let at = self.runs.partition_point(|r| r.slot < slot);
        self.runs.insert(at, run);
        Ok(())
    }

    pub fn insert_capacity(&self) -> usize {
        self.c0
    }

    pub fn insert_array_len(&self) -> usize {
        self.array_count
    }

    pub fn merge_count(&self) -> u64 {
        self.merges
    }

    pub fn epsilon(&self) -> u64 {
        self.eps
    }

    /// Occupied slots with their record counts, newest first.
    pub fn runs(&self) -> Vec<(usize, u64)> {
        self.runs.iter().map(|r| (r.slot, r.n as u64)).collect()
    }

    /// Per run: segment levels plus the record level, newest first.
    pub fn run_heights(&self) -> Vec<u32> {
        self.runs.iter().map(|r| r.levels.len() as u32 + 1).collect()
    }

    /// Per run: entry counts of each segment level, bottom-up.
    pub fn level_sizes(&self) -> Vec<Vec<usize>> {
        self.runs.iter().map(|r| r.levels.iter().map(|l| l.count).collect()).collect()
    }

    pub fn array_blocks(&self) -> u64 {
        (self.c0 as u64 * 16).div_ceil(self.main.block_size() as u64)
    }

    fn begin(&mut self) {
        self.main.begin_op();
        for r in &mut self.runs {
            r.store.begin_op();
        }
    }

    fn end(&mut self) -> Result<()> {
        let mut res = self.main.end_op();
        for r in &mut self.runs {
            res = res.and(r.store.end_op());
        }
        res
    }

    fn array_search(&mut self, key: u64) -> Result<(usize, Option<Record>)> {
        let n = self.array_count;
        let base = self.array_pos();
        let j = self.main.partition_entries(base, 16, 0, n, n / 2, Access::Leaf, |e| entry_key(e) < key)?;
        if j < n {
            let r = Record::from_bytes(&self.main.read_vec(base + j as u64 * 16, 16, Access::Leaf)?);
            if r.key == key {
                return Ok((j, Some(r)));
            }
        }
        Ok((j, None))
    }

    fn lookup_inner(&mut self, key: u64) -> Result<Option<u64>> {
        if let (_, Some(r)) = self.array_search(key)? {
            return Ok(Some(r.payload));
        }
        let (eps, ei) = (self.eps, self.eps_inner);
        for run in &mut self.runs {
            if let (_, Some(r)) = run.seek(key, eps, ei)? {
                return Ok(Some(r.payload));
            }
        }
        Ok(None)
    }

    fn insert_inner(&mut self, key: u64, payload: u64) -> Result<()> {
        let ctx = self.main.context().clone();
        ctx.set_phase(Phase::Search);
        let base = self.array_pos();
        let j = if self.append_only {
            if self.max_key.is_some_and(|m| key <= m) {
                return Err(Error::Input(format!("append-only index got key {key} not above the maximum")));
            }
            self.array_count
        } else {
            match self.array_search(key)? {
                (j, Some(_)) => {
                    ctx.set_phase(Phase::Insert);
                    return self.main.write_at(base + j as u64 * 16 + 8, &payload.to_le_bytes(), Access::Leaf);
                }
                (j, None) => j,
            }
        };
        let tail = self.main.read_vec(base + j as u64 * 16, (self.array_count - j) * 16, Access::Leaf)?;
        ctx.set_phase(Phase::Insert);
        let mut bytes = Record::new(key, payload).to_bytes().to_vec();
        bytes.extend_from_slice(&tail);
        self.main.write_at(base + j as u64 * 16, &bytes, Access::Leaf)?;
        self.array_count += 1;
        self.len += 1;
        self.max_key = Some(self.max_key.map_or(key, |m| m.max(key)));
        if self.array_count >= self.c0 {
            ctx.set_phase(Phase::Smo);
            self.merge()?;
        }
        self.save_meta()
    }

    fn merge(&mut self) -> Result<()> {
        let base = self.array_pos();
        let mut data = records_from(&self.main.read_vec(base, self.array_count * 16, Access::Leaf)?);
        self.array_count = 0;
        let mut slot = 0;
        loop {
            if let Some(i) = self.runs.iter().position(|r| r.slot == slot) {
                let mut run = self.runs.remove(i);
                let older = run.read_all()?;
                data = merge_newest(&data, &older);
                run.store.remove()?;
                slot += 1;
            } else if data.len() as u128 > self.slot_capacity(slot) {
                slot += 1;
            } else {
                break;
            }
        }
        self.add_run(slot, &data)?;
        self.len = self.runs.iter().map(|r| r.n as u64).sum();
        self.merges += 1;
        Ok(())
    }

    fn scan_inner(&mut self, start: u64, count: usize) -> Result<Vec<Record>> {
        let (eps, ei) = (self.eps, self.eps_inner);
        let mut cursors = Vec::with_capacity(self.runs.len() + 1);
        let (j, _) = self.array_search(start)?;
        cursors.push(Cursor { src: 0, next: j, end: self.array_count, buf: Vec::new(), at: 0 });
        for (r, run) in self.runs.iter_mut().enumerate() {
            let (j, _) = run.seek(start, eps, ei)?;
            cursors.push(Cursor { src: r + 1, next: j, end: run.n, buf: Vec::new(), at: 0 });
        }
        let mut out = Vec::with_capacity(count.min(1 << 16));
        while out.len() < count {
            let mut best: Option<(u64, usize)> = None;
            for ci in 0..cursors.len() {
                let Some(k) = self.cursor_head(&mut cursors[ci])? else { continue };
                // Sources are ordered newest first, so the first minimum wins.
                if best.is_none_or(|(bk, _)| k < bk) {
                    best = Some((k, ci));
                }
            }
            let Some((k, ci)) = best else { break };
            out.push(cursors[ci].buf[cursors[ci].at]);
            for c in cursors.iter_mut() {
                if c.at < c.buf.len() && c.buf[c.at].key == k {
                    c.at += 1;
                }
            }
        }
        Ok(out)
    }

    fn cursor_head(&mut self, c: &mut Cursor) -> Result<Option<u64>> {
        if c.at == c.buf.len() {
            if c.next >= c.end {
                return Ok(None);
            }
            c.buf = if c.src == 0 {
                let base = self.array_pos();
                read_chunk(&mut self.main, base, c.next, c.end)?
            } else {
                let run = &mut self.runs[c.src - 1];
                read_chunk(&mut run.store, run.records_pos, c.next, c.end)?
            };
            c.next += c.buf.len();
            c.at = 0;
        }
        Ok(Some(c.buf[c.at].key))
    }

    /// Audit: every level honours its error bound and partitions the level
    /// below, runs respect their slot capacity. Returns the live records.
    pub fn check(&mut self) -> Result<Vec<Record>> {
        let mut seen = std::collections::HashSet::new();
        let mut live: Vec<Record> = Vec::new();
        for i in 0..self.runs.len() {
            let slot = self.runs[i].slot;
            if !seen.insert(slot) || self.runs[i].n as u128 > self.slot_capacity(slot) {
                return Err(Error::Format(format!("slot {slot} repeated or over capacity")));
            }
            let recs = self.runs[i].read_all()?;
            if recs.len() != self.runs[i].n || recs.windows(2).any(|w| w[0].key >= w[1].key) {
                return Err(Error::Format(format!("run in slot {slot} unsorted")));
            }
            let mut below: Vec<u64> = recs.iter().map(|r| r.key).collect();
            for l in 0..self.runs[i].levels.len() {
                let eps = if l == 0 { self.eps } else { self.eps_inner };
                let lv = self.runs[i].levels[l];
                let bytes = self.runs[i].store.read_vec(lv.pos, lv.count * ENTRY, Access::Inner)?;
                let entries: Vec<Entry> = bytes.chunks_exact(ENTRY).map(Entry::decode).collect();
                let mut next = 0;
                for e in &entries {
                    if e.start != next || e.count == 0 || below[e.start] != e.first_key() {
                        return Err(Error::Format(format!("slot {slot} level {l} does not partition its input")));
                    }
                    for r in 0..e.count {
                        if e.model.predict(below[e.start + r], e.count).abs_diff(r) > eps as usize {
                            return Err(Error::Format(format!("slot {slot} level {l} breaks the error bound")));
                        }
                    }
                    next += e.count;
                }
                if next != below.len() {
                    return Err(Error::Format(format!("slot {slot} level {l} misses entries")));
                }
                below = entries.iter().map(|e| e.first_key()).collect();
            }
            if below.len() != 1 {
                return Err(Error::Format(format!("slot {slot} has no single root")));
            }
            live = merge_newest(&live, &recs);
        }
        let array = records_from(&self.main.read_vec(self.array_pos(), self.array_count * 16, Access::Leaf)?);
        if array.windows(2).any(|w| w[0].key >= w[1].key) {
            return Err(Error::Format("insert array unsorted".into()));
        }
        Ok(merge_newest(&array, &live))
    }

    pub fn sync(&mut self) -> Result<()> {
        self.save_meta()?;
        self.main.sync()?;
        for r in &mut self.runs {
            r.store.sync()?;
        }
        Ok(())
    }
}

impl OrderedIndex for DynamicPgm {
    fn kind(&self) -> IndexKind {
        IndexKind::Pgm
    }

    fn lookup(&mut self, key: u64) -> Result<Option<u64>> {
        self.main.context().set_phase(Phase::Search);
        self.begin();
        let r = self.lookup_inner(key);
        self.end()?;
        r
    }

    fn insert(&mut self, key: u64, payload: u64) -> Result<()> {
        self.begin();
        let r = self.insert_inner(key, payload);
        let e = self.end();
        self.main.context().set_phase(Phase::Search);
        r.and(e)
    }

    fn scan(&mut self, start: u64, count: usize) -> Result<Vec<Record>> {
        self.main.context().set_phase(Phase::Search);
        if count == 0 {
            return Ok(Vec::new());
        }
        self.begin();
        let r = self.scan_inner(start, count);
        self.end()?;
        r
    }

    /// Stored records. A key overwritten while an older version sits in a
    /// deeper run counts twice until the two versions meet in a merge.
    fn len(&self) -> u64 {
        self.len
    }

    fn io(&self) -> &IoContext {
        self.main.context()
    }

    fn storage_bytes(&self) -> u64 {
        self.main.storage_bytes() + self.runs.iter().map(|r| r.store.storage_bytes()).sum::<u64>()
    }

    fn smo_count(&self) -> u64 {
        self.merges
    }

    fn shape(&self) -> IndexShape {
        IndexShape {
            items: self.len,
            height: self.runs.iter().map(|r| r.levels.len() as u32 + 1).max().unwrap_or(1),
            segments: self.runs.iter().map(|r| r.levels[0].count as u64).sum(),
            max_node_items: self.c0 as u64,
            run_sizes: self.runs.iter().map(|r| r.n as u64).collect(),
            pinned_bytes: self.runs.iter().map(Run::level_bytes).sum(),
        }
    }
}
