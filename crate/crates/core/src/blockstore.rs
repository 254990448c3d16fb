//! File-backed block storage with exact I/O accounting.
//!
//! Every index persists through [`BlockStore`]. A store is one flat file of
//! fixed-size blocks whose block 0 is the meta block. Stores that belong to the
//! same index share an [`IoContext`], which owns the counters and the optional
//! LRU buffer, so multi-file indexes (ALEX's split layout, PGM's runs) report a
//! single set of numbers.
//!
//! Indexes bracket each logical operation with [`BlockStore::begin_op`] and
//! [`BlockStore::end_op`]. Inside an operation a block is fetched at most once
//! and written back at most once; this is the working memory of a single
//! request, not a cache (the LRU buffer is separate and defaults to off).

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::num::NonZeroUsize;
use std::ops::Sub;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use lru::LruCache;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BLOCK_SIZE: usize = 4096;
pub const SUPPORTED_BLOCK_SIZES: [usize; 3] = [4096, 8192, 16384];

const META_MAGIC: u32 = 0x5844_494C; // "LIDX" little-endian
const META_VERSION: u32 = 1;
/// Fixed meta fields: magic, version, block_size, allocated, root, kind.
pub const META_FIXED_LEN: usize = 32;
// tail (8) + extra length (4) follow the fixed fields.
const META_EXTRA_OFFSET: usize = META_FIXED_LEN + 12;

/// Location of a node or slot: block number plus byte offset inside the block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DiskAddr {
    pub block: u32,
    pub offset: u32,
}

impl DiskAddr {
    /// Block 0 is always the meta block, so `(0, 0)` never names a node.
    pub const NULL: DiskAddr = DiskAddr { block: 0, offset: 0 };
    pub const ENCODED_LEN: usize = 8;

    pub fn new(block: u32, offset: u32) -> Self {
        DiskAddr { block, offset }
    }

    pub fn is_null(self) -> bool {
        self == Self::NULL
    }

    pub fn to_bytes(self) -> [u8; 8] {
        let mut out = [0u8; 8];
        out[..4].copy_from_slice(&self.block.to_le_bytes());
        out[4..].copy_from_slice(&self.offset.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        DiskAddr {
            block: u32::from_le_bytes(bytes[..4].try_into().unwrap()),
            offset: u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
        }
    }

    pub fn to_u64(self) -> u64 {
        u64::from_le_bytes(self.to_bytes())
    }

    pub fn from_u64(v: u64) -> Self {
        Self::from_bytes(&v.to_le_bytes())
    }

    pub fn byte_pos(self, block_size: usize) -> u64 {
        self.block as u64 * block_size as u64 + self.offset as u64
    }

    pub fn from_byte_pos(pos: u64, block_size: usize) -> Self {
        DiskAddr {
            block: (pos / block_size as u64) as u32,
            offset: (pos % block_size as u64) as u32,
        }
    }
}

/// Block-level counters. `blocks_read` excludes buffer hits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoStats {
    pub blocks_read: u64,
    pub blocks_written: u64,
    pub buffer_hits: u64,
    /// Subset of `blocks_read` that touched inner (non-leaf) structure.
    pub inner_blocks_read: u64,
}

impl IoStats {
    pub fn leaf_blocks_read(&self) -> u64 {
        self.blocks_read - self.inner_blocks_read
    }
}

impl Sub for IoStats {
    type Output = IoStats;

    fn sub(self, rhs: IoStats) -> IoStats {
        IoStats {
            blocks_read: self.blocks_read - rhs.blocks_read,
            blocks_written: self.blocks_written - rhs.blocks_written,
            buffer_hits: self.buffer_hits - rhs.buffer_hits,
            inner_blocks_read: self.inner_blocks_read - rhs.inner_blocks_read,
        }
    }
}

/// Which part of an index a block belongs to. In hybrid mode inner blocks are
/// memory-resident: their reads and writes are free and bypass the buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Access {
    Inner,
    Leaf,
}

/// Step of a write operation that an I/O is charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Search,
    Insert,
    Smo,
    Maintenance,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Search, Phase::Insert, Phase::Smo, Phase::Maintenance];

    fn index(self) -> usize {
        match self {
            Phase::Search => 0,
            Phase::Insert => 1,
            Phase::Smo => 2,
            Phase::Maintenance => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Search => "search",
            Phase::Insert => "insert",
            Phase::Smo => "smo",
            Phase::Maintenance => "maintenance",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseIo {
    pub blocks_read: u64,
    pub blocks_written: u64,
}

impl Sub for PhaseIo {
    type Output = PhaseIo;

    fn sub(self, rhs: PhaseIo) -> PhaseIo {
        PhaseIo {
            blocks_read: self.blocks_read - rhs.blocks_read,
            blocks_written: self.blocks_written - rhs.blocks_written,
        }
    }
}

struct IoShared {
    stats: IoStats,
    phases: [PhaseIo; 4],
    phase: Phase,
    cache: Option<LruCache<(u32, u32), Vec<u8>>>,
    hybrid: bool,
    next_file_id: u32,
}

/// Counters and buffer shared by every store of one index.
#[derive(Clone)]
pub struct IoContext {
    shared: Arc<Mutex<IoShared>>,
}

impl IoContext {
    pub fn new(buffer_capacity: usize) -> Self {
        IoContext {
            shared: Arc::new(Mutex::new(IoShared {
                stats: IoStats::default(),
                phases: [PhaseIo::default(); 4],
                phase: Phase::Search,
                cache: NonZeroUsize::new(buffer_capacity).map(LruCache::new),
                hybrid: false,
                next_file_id: 0,
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, IoShared> {
        self.shared.lock().expect("io context poisoned")
    }

    pub fn stats(&self) -> IoStats {
        self.lock().stats
    }

    pub fn reset_stats(&self) {
        let mut s = self.lock();
        s.stats = IoStats::default();
        s.phases = [PhaseIo::default(); 4];
    }

    pub fn phase_io(&self) -> [PhaseIo; 4] {
        self.lock().phases
    }

    pub fn set_phase(&self, phase: Phase) {
        self.lock().phase = phase;
    }

    pub fn phase(&self) -> Phase {
        self.lock().phase
    }

    pub fn set_hybrid(&self, hybrid: bool) {
        self.lock().hybrid = hybrid;
    }

    pub fn is_hybrid(&self) -> bool {
        self.lock().hybrid
    }

    pub fn buffer_capacity(&self) -> usize {
        self.lock().cache.as_ref().map_or(0, |c| c.cap().get())
    }

    /// Empties the buffer without touching counters (a cold start).
    pub fn clear_buffer(&self) {
        if let Some(cache) = self.lock().cache.as_mut() {
            cache.clear();
        }
    }

    fn register_file(&self) -> u32 {
        let mut s = self.lock();
        let id = s.next_file_id;
        s.next_file_id += 1;
        id
    }

    fn forget_file(&self, file_id: u32) {
        let mut s = self.lock();
        if let Some(cache) = s.cache.as_mut() {
            let stale: Vec<_> = cache.iter().map(|(k, _)| *k).filter(|k| k.0 == file_id).collect();
            for k in stale {
                cache.pop(&k);
            }
        }
    }
}

impl std::fmt::Debug for IoContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IoContext").field("stats", &self.stats()).finish()
    }
}

/// In-memory copy of block 0. The meta block is memory-resident while a store
/// is open; persisting it is not counted as block I/O.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Meta {
    pub root: DiskAddr,
    pub kind: u32,
    extra: Vec<u8>,
}

impl Meta {
    pub fn extra(&self) -> &[u8] {
        &self.extra
    }
}

struct Held {
    data: Vec<u8>,
    dirty: Option<(Access, Phase)>,
}

pub struct BlockStore {
    path: PathBuf,
    file: File,
    block_size: usize,
    allocated: u64,
    /// Next free byte for packed (sub-block) allocations; 0 when none is open.
    tail: u64,
    meta: Meta,
    ctx: IoContext,
    file_id: u32,
    held: Option<HashMap<u32, Held>>,
    op_depth: u32,
    removed: bool,
}

impl BlockStore {
    /// Opens or creates a store with its own private counters and buffer.
    pub fn open(path: impl AsRef<Path>, block_size: usize, buffer_capacity: usize) -> Result<Self> {
        Self::open_in(path, block_size, &IoContext::new(buffer_capacity))
    }

    /// Opens or creates a store that reports into `ctx`.
    pub fn open_in(path: impl AsRef<Path>, block_size: usize, ctx: &IoContext) -> Result<Self> {
        if !SUPPORTED_BLOCK_SIZES.contains(&block_size) {
            return Err(Error::Config(format!(
                "block size {block_size} not in {SUPPORTED_BLOCK_SIZES:?}"
            )));
        }
        let path = path.as_ref().to_path_buf();
        let exists = path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(&path)?;
        let mut store = BlockStore {
            path,
            file,
            block_size,
            allocated: 1,
            tail: 0,
            meta: Meta::default(),
            ctx: ctx.clone(),
            file_id: ctx.register_file(),
            held: None,
            op_depth: 0,
            removed: false,
        };
        if exists {
            store.load_meta()?;
        } else {
            store.sync()?;
        }
        Ok(store)
    }

    fn load_meta(&mut self) -> Result<()> {
        let mut buf = vec![0u8; self.block_size];
        let n = read_full(&self.file, &mut buf, 0)?;
        if n < META_EXTRA_OFFSET {
            return Err(Error::Format(format!("{}: truncated meta block", self.path.display())));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        if u32_at(0) != META_MAGIC {
            return Err(Error::Format(format!("{}: bad meta magic", self.path.display())));
        }
        if u32_at(4) != META_VERSION {
            return Err(Error::Format(format!("{}: unsupported version {}", self.path.display(), u32_at(4))));
        }
        let stored_bs = u32_at(8) as usize;
        if stored_bs != self.block_size {
            return Err(Error::Config(format!(
                "{}: stored block size {stored_bs} != requested {}",
                self.path.display(),
                self.block_size
            )));
        }
        self.allocated = u64_at(12);
        self.meta.root = DiskAddr::from_bytes(&buf[20..28]);
        self.meta.kind = u32_at(28);
        self.tail = u64_at(32);
        let extra_len = u32_at(40) as usize;
        if self.allocated == 0 || META_EXTRA_OFFSET + extra_len > self.block_size {
            return Err(Error::Format(format!("{}: corrupt meta block", self.path.display())));
        }
        self.meta.extra = buf[META_EXTRA_OFFSET..META_EXTRA_OFFSET + extra_len].to_vec();
        Ok(())
    }

    /// Persists the meta block. Not counted: the meta block lives in memory.
    pub fn sync(&mut self) -> Result<()> {
        let mut buf = vec![0u8; self.block_size];
        buf[0..4].copy_from_slice(&META_MAGIC.to_le_bytes());
        buf[4..8].copy_from_slice(&META_VERSION.to_le_bytes());
        buf[8..12].copy_from_slice(&(self.block_size as u32).to_le_bytes());
        buf[12..20].copy_from_slice(&self.allocated.to_le_bytes());
        buf[20..28].copy_from_slice(&self.meta.root.to_bytes());
        buf[28..32].copy_from_slice(&self.meta.kind.to_le_bytes());
        buf[32..40].copy_from_slice(&self.tail.to_le_bytes());
        buf[40..44].copy_from_slice(&(self.meta.extra.len() as u32).to_le_bytes());
        buf[META_EXTRA_OFFSET..META_EXTRA_OFFSET + self.meta.extra.len()].copy_from_slice(&self.meta.extra);
        self.file.write_all_at(&buf, 0)?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn allocated(&self) -> u64 {
        self.allocated
    }

    pub fn storage_bytes(&self) -> u64 {
        self.allocated * self.block_size as u64
    }

    pub fn context(&self) -> &IoContext {
        &self.ctx
    }

    pub fn io_stats(&self) -> IoStats {
        self.ctx.stats()
    }

    pub fn reset_stats(&self) {
        self.ctx.reset_stats()
    }

    pub fn meta(&self) -> &Meta {
        &self.meta
    }

    pub fn root(&self) -> DiskAddr {
        self.meta.root
    }

    pub fn set_root(&mut self, root: DiskAddr) {
        self.meta.root = root;
    }

    pub fn set_kind(&mut self, kind: u32) {
        self.meta.kind = kind;
    }

    /// Bytes available for index-specific metadata in the meta block.
    pub fn meta_extra_capacity(&self) -> usize {
        self.block_size - META_EXTRA_OFFSET
    }

    pub fn set_meta_extra(&mut self, extra: Vec<u8>) -> Result<()> {
        if extra.len() > self.meta_extra_capacity() {
            return Err(Error::Capacity(format!(
                "meta payload of {} bytes exceeds {}",
                extra.len(),
                self.meta_extra_capacity()
            )));
        }
        self.meta.extra = extra;
        Ok(())
    }

    /// Reserves `n` contiguous blocks and returns the first block number.
    pub fn allocate(&mut self, n: u64) -> Result<u32> {
        if n == 0 {
            return Err(Error::Input("allocate(0)".into()));
        }
        let first = self.allocated;
        if first + n > u32::MAX as u64 {
            return Err(Error::Capacity("block numbers exhausted".into()));
        }
        self.allocated += n;
        Ok(first as u32)
    }

    /// Reserves `len` contiguous bytes. Small requests are packed into the
    /// unused tail of the last packed block; anything that does not fit there
    /// starts on a fresh block boundary.
    pub fn alloc_bytes(&mut self, len: usize) -> Result<DiskAddr> {
        let bs = self.block_size as u64;
        let len = len.max(1) as u64;
        let in_block = self.tail % bs;
        if self.tail != 0 && in_block != 0 && in_block + len <= bs {
            let addr = DiskAddr::from_byte_pos(self.tail, self.block_size);
            self.tail += len;
            return Ok(addr);
        }
        let first = self.allocate(len.div_ceil(bs))?;
        self.tail = first as u64 * bs + len;
        Ok(DiskAddr::new(first, 0))
    }

    fn check_block(&self, block: u32) -> Result<()> {
        if block as u64 >= self.allocated {
            return Err(Error::Address { block: block as u64, allocated: self.allocated });
        }
        Ok(())
    }

    /// Reads one whole block, charging it as leaf I/O.
    pub fn read_block(&mut self, block: u32) -> Result<Vec<u8>> {
        self.read_block_as(block, Access::Leaf)
    }

    pub fn read_block_as(&mut self, block: u32, access: Access) -> Result<Vec<u8>> {
        self.check_block(block)?;
        if self.held.is_some() {
            return Ok(self.hold(block, access)?.data.clone());
        }
        self.raw_read(block, access)
    }

    /// Writes one whole block, charging it as leaf I/O.
    pub fn write_block(&mut self, block: u32, bytes: &[u8]) -> Result<()> {
        self.write_block_as(block, bytes, Access::Leaf)
    }

    pub fn write_block_as(&mut self, block: u32, bytes: &[u8], access: Access) -> Result<()> {
        if bytes.len() != self.block_size {
            return Err(Error::Size { expected: self.block_size, got: bytes.len() });
        }
        self.check_block(block)?;
        self.write_at(block as u64 * self.block_size as u64, bytes, access)
    }

    fn raw_read(&mut self, block: u32, access: Access) -> Result<Vec<u8>> {
        {
            let mut s = self.ctx.lock();
            let pinned = s.hybrid && access == Access::Inner;
            if !pinned {
                if let Some(hit) = s.cache.as_mut().and_then(|c| c.get(&(self.file_id, block))) {
                    let hit = hit.clone();
                    s.stats.buffer_hits += 1;
                    return Ok(hit);
                }
                s.stats.blocks_read += 1;
                if access == Access::Inner {
                    s.stats.inner_blocks_read += 1;
                }
                let p = s.phase.index();
                s.phases[p].blocks_read += 1;
            }
        }
        let mut buf = vec![0u8; self.block_size];
        read_full(&self.file, &mut buf, block as u64 * self.block_size as u64)?;
        let mut s = self.ctx.lock();
        if !(s.hybrid && access == Access::Inner) {
            if let Some(cache) = s.cache.as_mut() {
                cache.put((self.file_id, block), buf.clone());
            }
        }
        Ok(buf)
    }

    fn raw_write(&mut self, block: u32, data: &[u8], access: Access, phase: Phase) -> Result<()> {
        {
            let mut s = self.ctx.lock();
            if !(s.hybrid && access == Access::Inner) {
                s.stats.blocks_written += 1;
                s.phases[phase.index()].blocks_written += 1;
            }
            if let Some(slot) = s.cache.as_mut().and_then(|c| c.peek_mut(&(self.file_id, block))) {
                slot.copy_from_slice(data);
            }
        }
        self.file.write_all_at(data, block as u64 * self.block_size as u64)?;
        Ok(())
    }

    fn hold(&mut self, block: u32, access: Access) -> Result<&mut Held> {
        let present = self.held.as_ref().is_some_and(|h| h.contains_key(&block));
        if !present {
            let data = self.raw_read(block, access)?;
            self.held.as_mut().unwrap().insert(block, Held { data, dirty: None });
        }
        Ok(self.held.as_mut().unwrap().get_mut(&block).unwrap())
    }

    /// Opens an operation scope (nestable).
    pub fn begin_op(&mut self) {
        if self.op_depth == 0 {
            self.held = Some(HashMap::new());
        }
        self.op_depth += 1;
    }

    /// Closes an operation scope, writing every dirty block exactly once.
    pub fn end_op(&mut self) -> Result<()> {
        // A store created inside another store's scope may see an unmatched end.
        if self.op_depth == 0 {
            return Ok(());
        }
        self.op_depth -= 1;
        if self.op_depth > 0 {
            return Ok(());
        }
        let Some(held) = self.held.take() else { return Ok(()) };
        let mut dirty: Vec<_> = held.into_iter().filter(|(_, h)| h.dirty.is_some()).collect();
        dirty.sort_unstable_by_key(|(b, _)| *b);
        for (block, h) in dirty {
            let (access, phase) = h.dirty.unwrap();
            self.raw_write(block, &h.data, access, phase)?;
        }
        Ok(())
    }

    pub fn in_op(&self) -> bool {
        self.held.is_some()
    }

    /// Copies `buf.len()` bytes starting at absolute byte position `pos`.
    pub fn read_at(&mut self, pos: u64, buf: &mut [u8], access: Access) -> Result<()> {
        let bs = self.block_size as u64;
        let mut done = 0usize;
        while done < buf.len() {
            let at = pos + done as u64;
            let block = (at / bs) as u32;
            self.check_block(block)?;
            let off = (at % bs) as usize;
            let take = (self.block_size - off).min(buf.len() - done);
            if self.held.is_some() {
                let h = self.hold(block, access)?;
                buf[done..done + take].copy_from_slice(&h.data[off..off + take]);
            } else {
                let data = self.raw_read(block, access)?;
                buf[done..done + take].copy_from_slice(&data[off..off + take]);
            }
            done += take;
        }
        Ok(())
    }

    pub fn read_vec(&mut self, pos: u64, len: usize, access: Access) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.read_at(pos, &mut buf, access)?;
        Ok(buf)
    }

    pub fn read_u64(&mut self, pos: u64, access: Access) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_at(pos, &mut b, access)?;
        Ok(u64::from_le_bytes(b))
    }

    /// Binary search over fixed-width entries stored contiguously from byte
    /// `base`: returns the first index in `[lo, hi)` whose entry fails `pred`
    /// (`pred` must hold for a prefix). Whole blocks are examined at a time,
    /// starting with the block holding entry `probe`, so a search whose answer
    /// lies in the probed block costs one block.
    #[allow(clippy::too_many_arguments)]
    pub fn partition_entries(
        &mut self,
        base: u64,
        width: usize,
        mut lo: usize,
        mut hi: usize,
        probe: usize,
        access: Access,
        pred: impl Fn(&[u8]) -> bool,
    ) -> Result<usize> {
        let bs = self.block_size as u64;
        let w = width as u64;
        let mut probe = probe;
        while lo < hi {
            probe = probe.clamp(lo, hi - 1);
            let start = base + probe as u64 * w;
            let blk_start = start / bs * bs;
            let blk_end = blk_start + bs;
            // Entries that lie wholly inside this block.
            let mut a = (blk_start.saturating_sub(base)).div_ceil(w) as usize;
            let mut b = ((blk_end - base) / w) as usize;
            if a > probe || b <= probe {
                // The probed entry straddles a boundary; take it alone.
                a = probe;
                b = probe + 1;
            }
            let a = a.max(lo);
            let b = b.min(hi);
            let bytes = self.read_vec(base + a as u64 * w, (b - a) * width, access)?;
            let entries: Vec<&[u8]> = bytes.chunks_exact(width).collect();
            if !pred(entries[0]) {
                hi = a;
            } else if pred(entries[entries.len() - 1]) {
                lo = b;
            } else {
                return Ok(a + entries.partition_point(|e| pred(e)));
            }
            probe = lo + (hi - lo) / 2;
        }
        Ok(lo)
    }

    /// Writes `data` at absolute byte position `pos`. A block that is only
    /// partially covered and not already held is read first.
    pub fn write_at(&mut self, pos: u64, data: &[u8], access: Access) -> Result<()> {
        let bs = self.block_size as u64;
        let phase = self.ctx.phase();
        let mut done = 0usize;
        while done < data.len() {
            let at = pos + done as u64;
            let block = (at / bs) as u32;
            self.check_block(block)?;
            let off = (at % bs) as usize;
            let take = (self.block_size - off).min(data.len() - done);
            let whole = off == 0 && take == self.block_size;
            let chunk = &data[done..done + take];
            if self.held.is_some() {
                let held = self.held.as_mut().unwrap();
                if whole && !held.contains_key(&block) {
                    held.insert(block, Held { data: chunk.to_vec(), dirty: Some((access, phase)) });
                } else {
                    let h = self.hold(block, access)?;
                    h.data[off..off + take].copy_from_slice(chunk);
                    h.dirty = Some(merge_dirty(h.dirty, access, phase));
                }
            } else if whole {
                self.raw_write(block, chunk, access, phase)?;
            } else {
                let mut cur = self.raw_read(block, access)?;
                cur[off..off + take].copy_from_slice(chunk);
                self.raw_write(block, &cur, access, phase)?;
            }
            done += take;
        }
        Ok(())
    }

    /// Closes the store and deletes its file, dropping any buffered blocks.
    pub fn remove(mut self) -> Result<()> {
        self.removed = true;
        self.ctx.forget_file(self.file_id);
        std::fs::remove_file(&self.path)?;
        Ok(())
    }
}

impl Drop for BlockStore {
    fn drop(&mut self) {
        if !self.removed {
            let _ = self.sync();
        }
    }
}

impl std::fmt::Debug for BlockStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockStore")
            .field("path", &self.path)
            .field("block_size", &self.block_size)
            .field("allocated", &self.allocated)
            .finish()
    }
}

// Leaf wins: a block touched by any leaf write is charged as leaf I/O.
fn merge_dirty(prev: Option<(Access, Phase)>, access: Access, phase: Phase) -> (Access, Phase) {
    match prev {
        Some((Access::Leaf, p)) => (Access::Leaf, p),
        Some((Access::Inner, p)) if access == Access::Inner => (Access::Inner, p),
        _ => (access, phase),
    }
}

fn read_full(file: &File, buf: &mut [u8], pos: u64) -> Result<usize> {
    let mut done = 0;
    while done < buf.len() {
        let n = file.read_at(&mut buf[done..], pos + done as u64)?;
        if n == 0 {
            break;
        }
        done += n;
    }
    buf[done..].fill(0);
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh(cap: usize) -> (tempfile::TempDir, BlockStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = BlockStore::open(dir.path().join("t.idx"), 4096, cap).unwrap();
        (dir, s)
    }

    #[test]
    fn fresh_store_has_only_meta_block() {
        let (_d, s) = fresh(0);
        assert_eq!(s.allocated(), 1);
        assert_eq!(s.io_stats(), IoStats::default());
    }

    #[test]
    fn large_block_size_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let s = BlockStore::open(dir.path().join("t"), 16384, 0).unwrap();
        assert_eq!(s.block_size(), 16384);
        assert!(BlockStore::open(dir.path().join("u"), 1000, 0).is_err());
    }

    #[test]
    fn reopen_with_other_block_size_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t");
        drop(BlockStore::open(&p, 4096, 0).unwrap());
        let err = BlockStore::open(&p, 8192, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn corrupt_meta_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t");
        std::fs::write(&p, vec![7u8; 4096]).unwrap();
        assert!(matches!(BlockStore::open(&p, 4096, 0), Err(Error::Format(_))));
    }

    #[test]
    fn allocate_is_contiguous_and_skips_meta() {
        let (_d, mut s) = fresh(0);
        assert_eq!(s.allocate(3).unwrap(), 1);
        assert_eq!(s.allocated(), 4);
        let a = s.allocate(1).unwrap();
        let b = s.allocate(1).unwrap();
        assert_eq!(b, a + 1);
    }

    #[test]
    fn read_your_write_and_counters() {
        let (_d, mut s) = fresh(0);
        let b = s.allocate(1).unwrap();
        let data: Vec<u8> = (0..4096).map(|i| (i % 251) as u8).collect();
        s.write_block(b, &data).unwrap();
        assert_eq!(s.read_block(b).unwrap(), data);
        s.read_block(b).unwrap();
        let st = s.io_stats();
        assert_eq!((st.blocks_read, st.blocks_written, st.buffer_hits), (2, 1, 0));
        s.reset_stats();
        s.read_block(b).unwrap();
        assert_eq!(s.io_stats().blocks_read, 1);
    }

    #[test]
    fn ten_writes_count_ten() {
        let (_d, mut s) = fresh(0);
        let b = s.allocate(1).unwrap();
        for i in 0..10u8 {
            s.write_block(b, &vec![i; 4096]).unwrap();
        }
        assert_eq!(s.io_stats().blocks_written, 10);
    }

    #[test]
    fn buffer_hit_does_not_count_as_read() {
        let (_d, mut s) = fresh(1);
        let b = s.allocate(1).unwrap();
        s.write_block(b, &vec![1; 4096]).unwrap();
        s.read_block(b).unwrap();
        s.read_block(b).unwrap();
        let st = s.io_stats();
        assert_eq!((st.blocks_read, st.buffer_hits), (1, 1));
    }

    #[test]
    fn wrong_size_and_range_errors() {
        let (_d, mut s) = fresh(0);
        let b = s.allocate(1).unwrap();
        assert!(matches!(s.write_block(b, &[0; 10]), Err(Error::Size { .. })));
        assert!(matches!(s.read_block(99), Err(Error::Address { .. })));
    }

    #[test]
    fn op_scope_reads_and_writes_each_block_once() {
        let (_d, mut s) = fresh(0);
        let b = s.allocate(2).unwrap();
        s.begin_op();
        for i in 0..8u64 {
            s.write_at(b as u64 * 4096 + i * 8, &i.to_le_bytes(), Access::Leaf).unwrap();
            s.read_u64(b as u64 * 4096 + i * 8, Access::Leaf).unwrap();
        }
        s.end_op().unwrap();
        let st = s.io_stats();
        assert_eq!((st.blocks_read, st.blocks_written), (1, 1));
        assert_eq!(s.read_u64(b as u64 * 4096 + 56, Access::Leaf).unwrap(), 7);
    }

    #[test]
    fn hybrid_inner_access_is_free() {
        let (_d, mut s) = fresh(4);
        s.context().set_hybrid(true);
        let b = s.allocate(1).unwrap();
        s.write_block_as(b, &vec![3; 4096], Access::Inner).unwrap();
        s.read_block_as(b, Access::Inner).unwrap();
        assert_eq!(s.io_stats(), IoStats::default());
    }

    #[test]
    fn packed_allocation_shares_blocks() {
        let (_d, mut s) = fresh(0);
        let a = s.alloc_bytes(100).unwrap();
        let b = s.alloc_bytes(100).unwrap();
        assert_eq!((a.block, a.offset), (b.block, 0));
        assert_eq!(b.offset, 100);
        let big = s.alloc_bytes(5000).unwrap();
        assert_eq!(big.offset, 0);
        assert_eq!(s.allocated(), 4);
        // 5000 bytes leave 3192 free in the last block
        let c = s.alloc_bytes(3000).unwrap();
        assert_eq!((c.block, c.offset), (big.block + 1, 904));
    }

    #[test]
    fn lru_cycle_law() {
        for cap in [1usize, 3, 8] {
            let (_d, mut s) = fresh(cap);
            let first = s.allocate(cap as u64 + 1).unwrap();
            for _ in 0..3 {
                for i in 0..cap as u32 {
                    s.read_block(first + i).unwrap();
                }
            }
            assert_eq!(s.io_stats().buffer_hits, 2 * cap as u64);
            s.context().clear_buffer();
            s.reset_stats();
            for _ in 0..3 {
                for i in 0..=cap as u32 {
                    s.read_block(first + i).unwrap();
                }
            }
            assert_eq!(s.io_stats().buffer_hits, 0);
        }
    }

    #[test]
    fn meta_round_trips_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t");
        {
            let mut s = BlockStore::open(&p, 8192, 0).unwrap();
            let b = s.allocate(2).unwrap();
            s.write_block(b + 1, &vec![9; 8192]).unwrap();
            s.set_root(DiskAddr::new(b, 24));
            s.set_kind(7);
            s.set_meta_extra(vec![1, 2, 3]).unwrap();
        }
        let mut s = BlockStore::open(&p, 8192, 0).unwrap();
        assert_eq!(s.allocated(), 3);
        assert_eq!(s.root(), DiskAddr::new(1, 24));
        assert_eq!(s.meta().kind, 7);
        assert_eq!(s.meta().extra(), &[1, 2, 3]);
        assert_eq!(s.read_block(2).unwrap(), vec![9; 8192]);
    }

    #[test]
    fn partition_reads_one_block_when_probe_is_right() {
        let (_d, mut s) = fresh(0);
        let first = s.allocate(4).unwrap();
        let base = first as u64 * 4096 + 16;
        let keys: Vec<u8> = (0..900u64).flat_map(|k| [(k * 2).to_le_bytes(), [0; 8]].concat()).collect();
        s.write_at(base, &keys, Access::Leaf).unwrap();
        let key_of = |e: &[u8]| u64::from_le_bytes(e[..8].try_into().unwrap());
        s.reset_stats();
        s.begin_op();
        let j = s.partition_entries(base, 16, 0, 900, 300, Access::Leaf, |e| key_of(e) < 601).unwrap();
        s.end_op().unwrap();
        assert_eq!(j, 301);
        assert_eq!(s.io_stats().blocks_read, 1);
        for target in [0u64, 1, 2, 17, 1797, 1798, 5000] {
            for probe in [0usize, 450, 899] {
                let j = s.partition_entries(base, 32, 0, 450, probe, Access::Leaf, |e| key_of(e) < target).unwrap();
                let want = (0..450u64).filter(|i| i * 4 < target).count();
                assert_eq!(j, want, "target {target} probe {probe}");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn buffer_is_transparent(
                ops in proptest::collection::vec((0u32..6, any::<u8>(), any::<bool>()), 1..60),
                cap in 0usize..5,
            ) {
                let dir = tempfile::tempdir().unwrap();
                let mut plain = BlockStore::open(dir.path().join("a"), 4096, 0).unwrap();
                let mut buffered = BlockStore::open(dir.path().join("b"), 4096, cap).unwrap();
                plain.allocate(6).unwrap();
                buffered.allocate(6).unwrap();
                for (i, fill, write) in ops {
                    let block = 1 + i;
                    if write {
                        plain.write_block(block, &vec![fill; 4096]).unwrap();
                        buffered.write_block(block, &vec![fill; 4096]).unwrap();
                    } else {
                        prop_assert_eq!(plain.read_block(block).unwrap(), buffered.read_block(block).unwrap());
                    }
                }
                let (p, b) = (plain.io_stats(), buffered.io_stats());
                prop_assert_eq!(p.blocks_read, b.blocks_read + b.buffer_hits);
                prop_assert_eq!(p.blocks_written, b.blocks_written);
            }

            #[test]
            fn addr_encoding_is_eight_bytes(block in any::<u32>(), offset in 0u32..16384) {
                let a = DiskAddr::new(block, offset);
                prop_assert_eq!(DiskAddr::from_bytes(&a.to_bytes()), a);
                prop_assert_eq!(DiskAddr::from_u64(a.to_u64()), a);
            }
        }
    }
}
