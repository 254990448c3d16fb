//! Disk FITing-tree with delta inserts.
//!
//! Segments live in the principal file. Each one is a 56-byte header and its
//! sorted records, followed by a sorted insert buffer in dedicated trailing
//! blocks. A B+-tree in `<path>.inner` maps each segment's first key to its
//! address, model and record count, so a lookup needs no segment header read.
//! Keys below the smallest segment key go to a one-block head buffer.

use std::path::{Path, PathBuf};

use crate::blockstore::{Access, BlockStore, DiskAddr, IoContext, Phase};
use crate::bptree::{self, BTree};
use crate::error::{Error, Result};
use crate::model::{optimal_pla_with, LinearModel};
use crate::{check_sorted_records, IndexKind, IndexShape, OrderedIndex, Record};

pub const SEG_HEADER: usize = 56;
const ENTRY_WIDTH: usize = 28;

/// Entries per inner-tree leaf after a bulk load at `fill`.
pub fn inner_fanout(block_size: usize, fill: f64) -> usize {
    (fill * bptree::leaf_capacity(block_size, ENTRY_WIDTH) as f64).ceil() as usize
}
const EMPTY_KEY: u64 = u64::MAX;
const META_KIND: u32 = 2;

#[derive(Clone, Debug)]
pub struct FitingConfig {
    pub block_size: usize,
    pub buffer_capacity: usize,
    pub epsilon: u64,
    /// Records per segment insert buffer.
    pub buffer_size: usize,
    /// Bulk fill of the inner B+-tree.
    pub inner_fill: f64,
}

impl Default for FitingConfig {
    fn default() -> Self {
        FitingConfig { block_size: 4096, buffer_capacity: 0, epsilon: 64, buffer_size: 256, inner_fill: 0.8 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct SegHeader {
    model: LinearModel,
    count: u32,
    buffer_count: u32,
    left: DiskAddr,
    right: DiskAddr,
    left_count: u32,
    right_count: u32,
}

impl SegHeader {
    fn to_bytes(self) -> [u8; SEG_HEADER] {
        let mut b = [0u8; SEG_HEADER];
        b[..24].copy_from_slice(&self.model.to_bytes());
        b[24..28].copy_from_slice(&self.count.to_le_bytes());
        b[28..32].copy_from_slice(&self.buffer_count.to_le_bytes());
        b[32..40].copy_from_slice(&self.left.to_bytes());
        b[40..48].copy_from_slice(&self.right.to_bytes());
        b[48..52].copy_from_slice(&self.left_count.to_le_bytes());
        b[52..56].copy_from_slice(&self.right_count.to_le_bytes());
        b
    }

    fn from_bytes(b: &[u8]) -> Self {
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        SegHeader {
            model: LinearModel::from_bytes(&b[..24]),
            count: u32_at(24),
            buffer_count: u32_at(28),
            left: DiskAddr::from_bytes(&b[32..40]),
            right: DiskAddr::from_bytes(&b[40..48]),
            left_count: u32_at(48),
            right_count: u32_at(52),
        }
    }
}

// Inner-tree value: segment block, model, body count. The key is the anchor.
// The top bit of the stored count marks a non-empty insert buffer, so reads
// of an empty buffer are skipped.
#[derive(Clone, Copy, Debug)]
struct Entry {
    first_key: u64,
    block: u32,
    model: LinearModel,
    count: usize,
    buffered: bool,
}

const BUFFERED: u32 = 1 << 31;

impl Entry {
    fn encode(&self) -> [u8; ENTRY_WIDTH] {
        let mut b = [0u8; ENTRY_WIDTH];
        b[..8].copy_from_slice(&DiskAddr::new(self.block, 0).to_bytes());
        b[8..16].copy_from_slice(&self.model.slope.to_le_bytes());
        b[16..24].copy_from_slice(&self.model.intercept.to_le_bytes());
        let c = self.count as u32 | if self.buffered { BUFFERED } else { 0 };
        b[24..28].copy_from_slice(&c.to_le_bytes());
        b
    }

    fn decode(first_key: u64, b: &[u8]) -> Self {
        let c = u32::from_le_bytes(b[24..28].try_into().unwrap());
        Entry {
            first_key,
            block: DiskAddr::from_bytes(&b[..8]).block,
            model: LinearModel::new(
                first_key,
                f64::from_le_bytes(b[8..16].try_into().unwrap()),
                f64::from_le_bytes(b[16..24].try_into().unwrap()),
            ),
            count: (c & !BUFFERED) as usize,
            buffered: c & BUFFERED != 0,
        }
    }
}

pub struct FitingTree {
    segs: BlockStore,
    inner: BTree,
    eps: u64,
    buffer_size: usize,
    head_block: u32,
    head_count: usize,
    /// First segment in key order; null when there are no segments.
    first_seg: DiskAddr,
    min_seg_key: u64,
    len: u64,
    segments: u64,
    max_seg_items: u64,
    resegments: u64,
}

fn inner_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".inner");
    PathBuf::from(p)
}

fn records_from(bytes: &[u8]) -> Vec<Record> {
    bytes.chunks_exact(16).map(Record::from_bytes).collect()
}

fn records_to(records: &[Record]) -> Vec<u8> {
    records.iter().flat_map(|r| r.to_bytes()).collect()
}

impl FitingTree {
    pub fn bulk_load(path: impl AsRef<Path>, records: &[Record], cfg: &FitingConfig) -> Result<Self> {
        Self::bulk_load_in(path, records, cfg, &IoContext::new(cfg.buffer_capacity))
    }

    pub fn bulk_load_in(path: impl AsRef<Path>, records: &[Record], cfg: &FitingConfig, ctx: &IoContext) -> Result<Self> {
        check_sorted_records(records)?;
        if cfg.epsilon == 0 || cfg.buffer_size == 0 {
            return Err(Error::Config("epsilon and buffer size must be at least 1".into()));
        }
        if records.last().is_some_and(|r| r.key == EMPTY_KEY) {
            return Err(Error::Input("key u64::MAX is reserved".into()));
        }
        let path = path.as_ref();
        let mut segs = BlockStore::open_in(path, cfg.block_size, ctx)?;
        segs.set_kind(META_KIND);
        let inner = BTree::create(inner_path(path), cfg.block_size, ctx, ENTRY_WIDTH, cfg.inner_fill, Access::Inner)?;
        let head_block = segs.allocate(1)?;
        let mut t = FitingTree {
            segs,
            inner,
            eps: cfg.epsilon,
            buffer_size: cfg.buffer_size,
            head_block,
            head_count: 0,
            first_seg: DiskAddr::NULL,
            min_seg_key: 0,
            len: records.len() as u64,
            segments: 0,
            max_seg_items: 0,
            resegments: 0,
        };
        t.inner.set_phase_tracking(false);
        if !records.is_empty() {
            let entries = t.write_segments(records, DiskAddr::NULL, 0, DiskAddr::NULL, 0)?;
            let keys: Vec<u64> = entries.iter().map(|e| e.first_key).collect();
            let vals: Vec<u8> = entries.iter().flat_map(|e| e.encode()).collect();
            t.inner.bulk_load(&keys, &vals)?;
            t.first_seg = DiskAddr::new(entries[0].block, 0);
            t.min_seg_key = records[0].key;
        }
        t.save_meta()?;
        Ok(t)
    }

    fn save_meta(&mut self) -> Result<()> {
        let mut m = Vec::with_capacity(72);
        for v in [
            self.eps,
            self.buffer_size as u64,
            self.head_block as u64,
            self.head_count as u64,
            self.first_seg.to_u64(),
            self.min_seg_key,
            self.len,
            self.segments,
            self.max_seg_items,
        ] {
            m.extend_from_slice(&v.to_le_bytes());
        }
        self.segs.set_root(self.first_seg);
        self.segs.set_meta_extra(m)
    }

    fn bs(&self) -> u64 {
        self.segs.block_size() as u64
    }

    fn buffer_blocks(&self) -> u64 {
        (self.buffer_size as u64 * 16).div_ceil(self.bs())
    }

    fn body_blocks(&self, count: usize) -> u64 {
        (SEG_HEADER as u64 + count as u64 * 16).div_ceil(self.bs())
    }

    fn seg_pos(&self, block: u32) -> u64 {
        block as u64 * self.bs()
    }

    fn rec_pos(&self, block: u32, i: usize) -> u64 {
        self.seg_pos(block) + SEG_HEADER as u64 + i as u64 * 16
    }

    fn buffer_pos(&self, block: u32, count: usize) -> u64 {
        self.seg_pos(block) + self.body_blocks(count) * self.bs()
    }

    fn has_segments(&self) -> bool {
        !self.first_seg.is_null()
    }

    pub fn segment_count(&self) -> u64 {
        self.segments
    }

    pub fn resegment_count(&self) -> u64 {
        self.resegments
    }

    pub fn inner_height(&self) -> u32 {
        self.inner.height()
    }

    pub fn epsilon(&self) -> u64 {
        self.eps
    }

    /// Writes `records` as freshly segmented, contiguous segments between the
    /// given neighbours and returns their inner-tree entries.
    fn write_segments(
        &mut self,
        records: &[Record],
        left: DiskAddr,
        left_count: u32,
        right: DiskAddr,
        right_count: u32,
    ) -> Result<Vec<Entry>> {
        let mut specs = Vec::new();
        optimal_pla_with(records.len(), |i| records[i].key, self.eps, |s| specs.push(s));
        let bs = self.bs();
        let total: u64 = specs.iter().map(|s| self.body_blocks(s.count) + self.buffer_blocks()).sum();
        let mut block = self.segs.allocate(total)?;
        let mut entries = Vec::with_capacity(specs.len());
        for s in &specs {
            entries.push(Entry { first_key: s.first_key, block, model: s.model, count: s.count, buffered: false });
            block += (self.body_blocks(s.count) + self.buffer_blocks()) as u32;
        }
        let mut base = 0usize;
        for (i, e) in entries.iter().enumerate() {
            let h = SegHeader {
                model: e.model,
                count: e.count as u32,
                buffer_count: 0,
                left: if i > 0 { DiskAddr::new(entries[i - 1].block, 0) } else { left },
                right: entries.get(i + 1).map_or(right, |n| DiskAddr::new(n.block, 0)),
                left_count: if i > 0 { entries[i - 1].count as u32 } else { left_count },
                right_count: entries.get(i + 1).map_or(right_count, |n| n.count as u32),
            };
            let len = ((self.body_blocks(e.count) + self.buffer_blocks()) * bs) as usize;
            let mut bytes = vec![0u8; len];
            bytes[..SEG_HEADER].copy_from_slice(&h.to_bytes());
            let body = records_to(&records[base..base + e.count]);
            bytes[SEG_HEADER..SEG_HEADER + body.len()].copy_from_slice(&body);
            let buf_at = (self.body_blocks(e.count) * bs) as usize;
            for slot in 0..self.buffer_size {
                let at = buf_at + slot * 16;
                bytes[at..at + 8].copy_from_slice(&EMPTY_KEY.to_le_bytes());
            }
            self.segs.write_at(self.seg_pos(e.block), &bytes, Access::Leaf)?;
            base += e.count;
            self.max_seg_items = self.max_seg_items.max(e.count as u64);
        }
        self.segments += entries.len() as u64;
        Ok(entries)
    }

    // Binary search over [lo, hi) of a segment body, one block at a time,
    // starting with the block that holds `probe`. Returns the first index with
    // key ≥ `key` and whether it matches.
    fn search_range(&mut self, block: u32, key: u64, mut lo: usize, mut hi: usize, probe: usize) -> Result<(usize, Option<Record>)> {
        let bs = self.bs();
        let mut probe = probe.clamp(lo, hi.saturating_sub(1));
        while lo < hi {
            let pos = self.rec_pos(block, probe);
            let blk_start = pos / bs * bs;
            // Records wholly or partly inside this block.
            let first = ((blk_start.max(self.rec_pos(block, 0)) - self.rec_pos(block, 0)) / 16) as usize;
            let last = (((blk_start + bs).saturating_sub(self.rec_pos(block, 0))).div_ceil(16)) as usize;
            let a = first.max(lo);
            let b = last.min(hi);
            let bytes = self.segs.read_vec(self.rec_pos(block, a), (b - a) * 16, Access::Leaf)?;
            let recs = records_from(&bytes);
            if key < recs[0].key {
                hi = a;
            } else if key > recs[recs.len() - 1].key {
                lo = b;
            } else {
                let j = recs.partition_point(|r| r.key < key);
                let hit = (recs[j].key == key).then_some(recs[j]);
                return Ok((a + j, hit));
            }
            probe = lo + (hi - lo) / 2;
        }
        Ok((lo, None))
    }

    // Predicted-window search with a fallback when float error pushed the
    // true position just outside the window.
    fn search_body(&mut self, e: &Entry, key: u64) -> Result<(usize, Option<Record>)> {
        if e.count == 0 {
            return Ok((0, None));
        }
        let p = e.model.predict(key, e.count);
        let w = self.eps as usize + 1;
        let lo = p.saturating_sub(w);
        let hi = (p + w + 1).min(e.count);
        // Predictions are monotone in the key, so the rank of any key, stored
        // or not, lies within ε + 1 of its prediction.
        self.search_range(e.block, key, lo, hi, p)
    }

    fn read_buffer(&mut self, e: &Entry) -> Result<Vec<Record>> {
        if !e.buffered {
            return Ok(Vec::new());
        }
        let pos = self.buffer_pos(e.block, e.count);
        let bytes = self.segs.read_vec(pos, self.buffer_size * 16, Access::Leaf)?;
        let mut recs = records_from(&bytes);
        let n = recs.partition_point(|r| r.key != EMPTY_KEY);
        recs.truncate(n);
        Ok(recs)
    }

    fn read_head(&mut self) -> Result<Vec<Record>> {
        if self.head_count == 0 {
            return Ok(Vec::new());
        }
        let pos = self.head_block as u64 * self.bs();
        Ok(records_from(&self.segs.read_vec(pos, self.head_count * 16, Access::Leaf)?))
    }

    fn head_capacity(&self) -> usize {
        self.segs.block_size() / 16
    }

    fn goes_to_head(&self, key: u64) -> bool {
        !self.has_segments() || key < self.min_seg_key
    }

    fn route(&mut self, key: u64) -> Result<Entry> {
        let (k, v) = self.inner.floor(key)?.ok_or_else(|| Error::Format("inner tree empty".into()))?;
        Ok(Entry::decode(k, &v))
    }

    fn begin(&mut self) {
        self.segs.begin_op();
        self.inner.store_mut().begin_op();
    }

    fn end(&mut self) -> Result<()> {
        let a = self.segs.end_op();
        let b = self.inner.store_mut().end_op();
        a.and(b)
    }

    fn lookup_inner(&mut self, key: u64) -> Result<Option<u64>> {
        if self.goes_to_head(key) {
            let head = self.read_head()?;
            return Ok(head.binary_search_by_key(&key, |r| r.key).ok().map(|i| head[i].payload));
        }
        let e = self.route(key)?;
        if let (_, Some(r)) = self.search_body(&e, key)? {
            return Ok(Some(r.payload));
        }
        let buf = self.read_buffer(&e)?;
        Ok(buf.binary_search_by_key(&key, |r| r.key).ok().map(|i| buf[i].payload))
    }

    fn insert_inner(&mut self, key: u64, payload: u64) -> Result<()> {
        let ctx = self.segs.context().clone();
        ctx.set_phase(Phase::Search);
        if self.goes_to_head(key) {
            return self.insert_head(key, payload);
        }
        let e = self.route(key)?;
        if let (idx, Some(_)) = self.search_body(&e, key)? {
            ctx.set_phase(Phase::Insert);
            let pos = self.rec_pos(e.block, idx) + 8;
            return self.segs.write_at(pos, &payload.to_le_bytes(), Access::Leaf);
        }
        let mut buf = self.read_buffer(&e)?;
        let bpos = self.buffer_pos(e.block, e.count);
        ctx.set_phase(Phase::Insert);
        match buf.binary_search_by_key(&key, |r| r.key) {
            Ok(i) => self.segs.write_at(bpos + i as u64 * 16 + 8, &payload.to_le_bytes(), Access::Leaf),
            Err(i) if buf.len() < self.buffer_size => {
                buf.insert(i, Record::new(key, payload));
                let tail = records_to(&buf[i..]);
                self.segs.write_at(bpos + i as u64 * 16, &tail, Access::Leaf)?;
                // The item count lives in the segment header block.
                let hpos = self.seg_pos(e.block) + 28;
                self.segs.write_at(hpos, &(buf.len() as u32).to_le_bytes(), Access::Leaf)?;
                if !e.buffered {
                    self.inner.put(e.first_key, &Entry { buffered: true, ..e }.encode())?;
                }
                self.len += 1;
                Ok(())
            }
            Err(i) => {
                ctx.set_phase(Phase::Smo);
                buf.insert(i, Record::new(key, payload));
                self.len += 1;
                self.resegment(&e, buf)
            }
        }
    }

    fn resegment(&mut self, e: &Entry, buf: Vec<Record>) -> Result<()> {
        let bytes = self.segs.read_vec(self.seg_pos(e.block), SEG_HEADER + e.count * 16, Access::Leaf)?;
        let h = SegHeader::from_bytes(&bytes[..SEG_HEADER]);
        let body = records_from(&bytes[SEG_HEADER..]);
        let merged = merge_sorted(&body, &buf);
        let entries = self.write_segments(&merged, h.left, h.left_count, h.right, h.right_count)?;
        self.segments -= 1;
        self.resegments += 1;
        let (first, last) = (entries[0], entries[entries.len() - 1]);
        if !h.left.is_null() {
            self.patch_right(h.left.block, DiskAddr::new(first.block, 0), first.count)?;
        }
        if !h.right.is_null() {
            self.patch_left(h.right.block, DiskAddr::new(last.block, 0), last.count)?;
        }
        if self.first_seg.block == e.block {
            self.first_seg = DiskAddr::new(first.block, 0);
        }
        for en in &entries {
            self.inner.put(en.first_key, &en.encode())?;
        }
        self.save_meta()
    }

    fn patch_right(&mut self, block: u32, right: DiskAddr, count: usize) -> Result<()> {
        let pos = self.seg_pos(block);
        self.segs.write_at(pos + 40, &right.to_bytes(), Access::Leaf)?;
        self.segs.write_at(pos + 52, &(count as u32).to_le_bytes(), Access::Leaf)
    }

    fn patch_left(&mut self, block: u32, left: DiskAddr, count: usize) -> Result<()> {
        let pos = self.seg_pos(block);
        self.segs.write_at(pos + 32, &left.to_bytes(), Access::Leaf)?;
        self.segs.write_at(pos + 48, &(count as u32).to_le_bytes(), Access::Leaf)
    }

    fn insert_head(&mut self, key: u64, payload: u64) -> Result<()> {
        let mut head = self.read_head()?;
        let hpos = self.head_block as u64 * self.bs();
        self.segs.context().set_phase(Phase::Insert);
        match head.binary_search_by_key(&key, |r| r.key) {
            Ok(i) => {
                head[i].payload = payload;
                self.segs.write_at(hpos + i as u64 * 16 + 8, &payload.to_le_bytes(), Access::Leaf)
            }
            Err(i) if head.len() < self.head_capacity() => {
                head.insert(i, Record::new(key, payload));
                self.segs.write_at(hpos + i as u64 * 16, &records_to(&head[i..]), Access::Leaf)?;
                self.head_count = head.len();
                self.len += 1;
                self.save_meta()
            }
            Err(i) => {
                // Head overflow: segment its contents in front of the first segment.
                self.segs.context().set_phase(Phase::Smo);
                head.insert(i, Record::new(key, payload));
                self.len += 1;
                let old_first = self.first_seg;
                let old_count = if old_first.is_null() {
                    0
                } else {
                    let e = self.route(self.min_seg_key)?;
                    e.count as u32
                };
                let entries = self.write_segments(&head, DiskAddr::NULL, 0, old_first, old_count)?;
                let last = entries[entries.len() - 1];
                if !old_first.is_null() {
                    self.patch_left(old_first.block, DiskAddr::new(last.block, 0), last.count)?;
                }
                if self.inner.is_empty() {
                    let keys: Vec<u64> = entries.iter().map(|e| e.first_key).collect();
                    let vals: Vec<u8> = entries.iter().flat_map(|e| e.encode()).collect();
                    self.inner.bulk_load(&keys, &vals)?;
                } else {
                    for en in &entries {
                        self.inner.put(en.first_key, &en.encode())?;
                    }
                }
                self.first_seg = DiskAddr::new(entries[0].block, 0);
                self.min_seg_key = head[0].key;
                self.head_count = 0;
                self.resegments += 1;
                self.save_meta()
            }
        }
    }

    fn scan_inner(&mut self, start: u64, count: usize) -> Result<Vec<Record>> {
        let mut out = Vec::with_capacity(count.min(1 << 16));
        let (mut block, mut idx, mut body_count, mut buf);
        // Next segment as seen in the inner tree leaf, saving a header read.
        let mut next_hint: Option<Entry> = None;
        if self.goes_to_head(start) {
            let head = self.read_head()?;
            let i = head.partition_point(|r| r.key < start);
            out.extend(head[i..].iter().take(count).copied());
            if out.len() >= count || !self.has_segments() {
                return Ok(out);
            }
            block = self.first_seg.block;
            let h = self.read_header(block)?;
            body_count = h.count as usize;
            buf = self.read_buffer_counted(block, body_count, h.buffer_count as usize)?;
            idx = 0;
        } else {
            let (cur, next) = self.inner.floor_with_next(start)?.ok_or_else(|| Error::Format("inner tree empty".into()))?;
            let e = Entry::decode(cur.0, &cur.1);
            next_hint = next.map(|(k, v)| Entry::decode(k, &v));
            let (i, _) = self.search_body(&e, start)?;
            block = e.block;
            body_count = e.count;
            idx = i;
            buf = self.read_buffer(&e)?;
            let skip = buf.partition_point(|r| r.key < start);
            buf.drain(..skip);
        }
        loop {
            let mut chunk: Vec<Record> = Vec::new();
            let (mut ci, mut bi) = (0, 0);
            loop {
                if ci == chunk.len() && idx < body_count {
                    let end = self.block_end_index(block, idx, body_count);
                    let bytes = self.segs.read_vec(self.rec_pos(block, idx), (end - idx) * 16, Access::Leaf)?;
                    chunk = records_from(&bytes);
                    ci = 0;
                    idx = end;
                }
                let next = match (chunk.get(ci), buf.get(bi)) {
                    (None, None) => break,
                    (Some(a), Some(b)) if b.key < a.key => {
                        bi += 1;
                        *b
                    }
                    (Some(a), _) => {
                        ci += 1;
                        *a
                    }
                    (None, Some(b)) => {
                        bi += 1;
                        *b
                    }
                };
                out.push(next);
                if out.len() >= count {
                    return Ok(out);
                }
            }
            let right = match next_hint.take() {
                Some(n) => n.block,
                None => {
                    let h = self.read_header(block)?;
                    if h.right.is_null() {
                        return Ok(out);
                    }
                    h.right.block
                }
            };
            block = right;
            let nh = self.read_header(block)?;
            body_count = nh.count as usize;
            buf = self.read_buffer_counted(block, body_count, nh.buffer_count as usize)?;
            idx = 0;
        }
    }

    // One past the last body index stored in the block holding index `i`.
    fn block_end_index(&self, block: u32, i: usize, count: usize) -> usize {
        let bs = self.bs();
        let pos = self.rec_pos(block, i);
        let blk_end = (pos / bs + 1) * bs;
        let end = ((blk_end - self.rec_pos(block, 0)).div_ceil(16)) as usize;
        end.clamp(i + 1, count.max(i + 1))
    }

    fn read_header(&mut self, block: u32) -> Result<SegHeader> {
        let b = self.segs.read_vec(self.seg_pos(block), SEG_HEADER, Access::Leaf)?;
        Ok(SegHeader::from_bytes(&b))
    }

    fn read_buffer_counted(&mut self, block: u32, count: usize, n: usize) -> Result<Vec<Record>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let pos = self.buffer_pos(block, count);
        Ok(records_from(&self.segs.read_vec(pos, n * 16, Access::Leaf)?))
    }

    /// Audit: every segment honours ε, buffers are sorted and within
    /// capacity, sibling links and inner entries agree. Returns the records.
    pub fn check(&mut self) -> Result<Vec<Record>> {
        let mut all = self.read_head()?;
        if all.windows(2).any(|w| w[0].key >= w[1].key) {
            return Err(Error::Format("head buffer unsorted".into()));
        }
        let entries: Vec<Entry> = self.inner.entries()?.into_iter().map(|(k, v)| Entry::decode(k, &v)).collect();
        if entries.len() as u64 != self.segments {
            return Err(Error::Format(format!("{} inner entries for {} segments", entries.len(), self.segments)));
        }
        let mut prev = DiskAddr::NULL;
        let mut cur = self.first_seg;
        let mut i = 0;
        while !cur.is_null() {
            let h = self.read_header(cur.block)?;
            let e = entries.get(i).ok_or_else(|| Error::Format("more linked segments than entries".into()))?;
            if e.block != cur.block || e.count != h.count as usize || h.left != prev || e.buffered != (h.buffer_count > 0)
            {
                return Err(Error::Format(format!("segment {} disagrees with inner tree or links", cur.block)));
            }
            let body = records_from(&self.segs.read_vec(self.rec_pos(cur.block, 0), e.count * 16, Access::Leaf)?);
            if body.first().map(|r| r.key) != Some(e.first_key) {
                return Err(Error::Format("segment first key mismatch".into()));
            }
            for (r, rec) in body.iter().enumerate() {
                if h.model.predict(rec.key, e.count).abs_diff(r) > self.eps as usize {
                    return Err(Error::Format(format!("segment {} breaks the error bound at rank {r}", cur.block)));
                }
            }
            let buf = self.read_buffer(e)?;
            if buf.len() != h.buffer_count as usize || buf.len() > self.buffer_size {
                return Err(Error::Format("buffer count mismatch".into()));
            }
            if !h.right.is_null() {
                let next = entries.get(i + 1).ok_or_else(|| Error::Format("dangling right link".into()))?;
                if h.right_count as usize != next.count {
                    return Err(Error::Format("stale right sibling count".into()));
                }
            }
            let seg = merge_sorted(&body, &buf);
            if buf.iter().any(|r| r.key < e.first_key) {
                return Err(Error::Format("buffered key below segment start".into()));
            }
            all.extend(seg);
            prev = cur;
            cur = h.right;
            i += 1;
        }
        if i != entries.len() {
            return Err(Error::Format("unlinked segments".into()));
        }
        if all.windows(2).any(|w| w[0].key >= w[1].key) {
            return Err(Error::Format("global order broken".into()));
        }
        Ok(all)
    }

    pub fn sync(&mut self) -> Result<()> {
        self.save_meta()?;
        self.segs.sync()?;
        self.inner.sync()
    }
}

fn merge_sorted(a: &[Record], b: &[Record]) -> Vec<Record> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i].key <= b[j].key {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

impl OrderedIndex for FitingTree {
    fn kind(&self) -> IndexKind {
        IndexKind::Fiting
    }

    fn lookup(&mut self, key: u64) -> Result<Option<u64>> {
        self.segs.context().set_phase(Phase::Search);
        self.begin();
        let r = self.lookup_inner(key);
        self.end()?;
        r
    }

    fn insert(&mut self, key: u64, payload: u64) -> Result<()> {
        if key == EMPTY_KEY {
            return Err(Error::Input("key u64::MAX is reserved".into()));
        }
        self.begin();
        let r = self.insert_inner(key, payload);
        let e = self.end();
        self.segs.context().set_phase(Phase::Search);
        r.and(e)
    }

    fn scan(&mut self, start: u64, count: usize) -> Result<Vec<Record>> {
        self.segs.context().set_phase(Phase::Search);
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
        self.segs.context()
    }

    fn storage_bytes(&self) -> u64 {
        self.segs.storage_bytes() + self.inner.store().storage_bytes()
    }

    fn smo_count(&self) -> u64 {
        self.resegments
    }

    fn shape(&self) -> IndexShape {
        IndexShape {
            items: self.len,
            height: self.inner.height() + 1,
            segments: self.segments,
            max_node_items: self.max_seg_items + self.buffer_size as u64,
            run_sizes: Vec::new(),
            pinned_bytes: self.inner.store().storage_bytes(),
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

    fn build(records: &[Record], cfg: FitingConfig) -> (tempfile::TempDir, FitingTree) {
        let dir = tempfile::tempdir().unwrap();
        let t = FitingTree::bulk_load(dir.path().join("fit"), records, &cfg).unwrap();
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
    fn linear_keys_one_segment() {
        let (_d, mut t) = build(&recs((0..10_000).map(|i| i * 10)), FitingConfig::default());
        assert_eq!(t.segment_count(), 1);
        assert_eq!(t.inner_height(), 1);
        assert_eq!(t.lookup(5000).unwrap(), Some(5001));
        assert_eq!(t.lookup(5001).unwrap(), None);
    }

    #[test]
    fn segment_count_equals_optimal_pla() {
        let keys = random_keys(50_000, 1);
        let want = crate::model::optimal_pla(&keys, 16).unwrap().len() as u64;
        let cfg = FitingConfig { epsilon: 16, ..Default::default() };
        let (_d, mut t) = build(&recs(keys.iter().copied()), cfg);
        assert_eq!(t.segment_count(), want);
        assert_eq!(t.check().unwrap().len(), keys.len());
    }

    #[test]
    fn lookup_block_bound() {
        let keys = random_keys(200_000, 2);
        let (_d, mut t) = build(&recs(keys.iter().copied()), FitingConfig::default());
        let h = t.inner_height() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let k = keys[rng.random_range(0..keys.len())];
            t.io().reset_stats();
            assert_eq!(t.lookup(k).unwrap(), Some(k + 1));
            // inner levels + at most two body blocks (window of 2ε+3 records)
            assert!(t.io().stats().blocks_read <= h + 2);
        }
    }

    #[test]
    fn buffered_insert_costs() {
        let keys: Vec<u64> = (0..5000).map(|i| i * 100).collect();
        let (_d, mut t) = build(&recs(keys), FitingConfig::default());
        t.io().reset_stats();
        t.insert(150, 7).unwrap();
        // buffer block + header count block + inner entry flag
        assert_eq!(t.io().stats().blocks_written, 3);
        t.io().reset_stats();
        t.insert(250, 7).unwrap();
        assert_eq!(t.io().stats().blocks_written, 2);
        assert_eq!(t.lookup(150).unwrap(), Some(7));
        t.insert(150, 8).unwrap();
        assert_eq!(t.lookup(150).unwrap(), Some(8));
        assert_eq!(t.len(), 5002);
        t.check().unwrap();
    }

    #[test]
    fn full_buffer_resegments_once() {
        let keys: Vec<u64> = (0..1000).map(|i| i * 1000).collect();
        let cfg = FitingConfig { buffer_size: 16, ..Default::default() };
        let (_d, mut t) = build(&recs(keys), cfg);
        for i in 0..16u64 {
            t.insert(i * 1000 + 1, i).unwrap();
        }
        assert_eq!(t.resegment_count(), 0);
        t.insert(555_555, 1).unwrap();
        assert_eq!(t.resegment_count(), 1);
        let all = t.check().unwrap();
        assert_eq!(all.len(), 1017);
    }

    #[test]
    fn head_buffer_takes_small_keys_and_overflows() {
        let keys: Vec<u64> = (0..2000).map(|i| 1_000_000 + i * 7).collect();
        let (_d, mut t) = build(&recs(keys), FitingConfig::default());
        for k in (0..600u64).rev() {
            t.insert(k * 3, k).unwrap();
        }
        assert!(t.resegment_count() >= 1);
        for k in 0..600u64 {
            assert_eq!(t.lookup(k * 3).unwrap(), Some(k));
        }
        let all = t.check().unwrap();
        assert_eq!(all.len(), 2600);
        assert_eq!(t.scan(0, 5).unwrap()[0].key, 0);
    }

    #[test]
    fn empty_start_and_reserved_key() {
        let (_d, mut t) = build(&[], FitingConfig::default());
        assert_eq!(t.lookup(1).unwrap(), None);
        for k in 0..1000u64 {
            t.insert(k * 5 + 3, k).unwrap();
        }
        assert_eq!(t.check().unwrap().len(), 1000);
        assert_eq!(t.lookup(503).unwrap(), Some(100));
        assert!(matches!(t.insert(u64::MAX, 0), Err(Error::Input(_))));
    }

    #[test]
    fn scan_merges_buffer_across_segments() {
        let keys = random_keys(30_000, 9);
        let cfg = FitingConfig { epsilon: 8, ..Default::default() };
        let (_d, mut t) = build(&recs(keys.iter().copied()), cfg);
        let mut oracle: BTreeMap<u64, u64> = keys.iter().map(|&k| (k, k + 1)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5000 {
            let k = rng.random_range(0..1u64 << 40);
            t.insert(k, 3).unwrap();
            oracle.insert(k, 3);
        }
        for _ in 0..300 {
            let k = rng.random_range(0..1u64 << 40);
            let got = t.scan(k, 100).unwrap();
            let want: Vec<Record> = oracle.range(k..).take(100).map(|(&k, &v)| Record::new(k, v)).collect();
            assert_eq!(got, want);
        }
        assert_eq!(t.scan(0, usize::MAX).unwrap().len(), oracle.len());
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
                ops in proptest::collection::vec((0u64..1_000_000, 0u8..3), 0..1500),
                eps in 1u64..32,
                bufsz in 1usize..40,
            ) {
                let init: Vec<u64> = init.into_iter().collect();
                let cfg = FitingConfig { epsilon: eps, buffer_size: bufsz, ..Default::default() };
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
                prop_assert_eq!(all.len(), oracle.len());
            }
        }
    }
}
