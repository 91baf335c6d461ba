//! Hybrid record log spanning memory, local page files and the shared tier.
//!
//! Logical address space, oldest to newest:
//!
//! ```text
//! begin .. shared_boundary .. local_begin .. head .. safe_read_only .. read_only .. tail
//!          (shared tier)      (local files)   (memory, immutable)  (fuzzy)  (mutable)
//! ```
//!
//! Memory holds `memory_pages` page frames used circularly. Offsets only move
//! forward. Shifts of `read_only` and `head` take effect through epoch actions:
//! `safe_read_only` advances once every thread has seen the new read-only
//! offset, and a frame is zeroed and reused only once no thread can still be
//! reading the page it held.
//!
//! Pages below `safe_read_only` are written to local page files by a
//! background flusher, which also copies flushed pages below `head` into the
//! shared tier and drops local files according to the retention setting.

mod disk;
pub mod record;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use parking_lot::Mutex;
use thiserror::Error;

use crate::address::Address;
use crate::epoch::{EpochManager, EpochThread};
use crate::io::{IoPool, Ticket};
use crate::shared_tier::{SharedTier, SharedTierError};

use disk::LocalPages;
pub use record::{OwnedRecord, RecordInfo, RecordRef};

/// First address handed out; zero is the null address.
pub const START_ADDRESS: u64 = 64;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("no free page frame; refresh the epoch and retry")]
    Backpressure,
    #[error("record of {size} bytes exceeds the page size {max}")]
    TooLarge { size: u64, max: u64 },
    #[error("address {0} is not available in any tier")]
    Unavailable(Address),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Shared(#[from] SharedTierError),
}

#[derive(Debug, Clone)]
pub struct LogConfig {
    pub log_id: u64,
    pub page_bits: u32,
    pub memory_pages: u64,
    pub mutable_fraction: f64,
    pub dir: PathBuf,
    /// Flushed pages stay out of the shared tier until they are this many
    /// pages below `head`.
    pub shared_lag_pages: u64,
    /// Local page files kept below `head`; `None` keeps everything.
    pub local_retain_pages: Option<u64>,
    pub io_threads: usize,
    /// Upper bound on a record, used to size single-record reads.
    pub max_record_bytes: u64,
    pub sync_writes: bool,
}

impl LogConfig {
    pub fn new(log_id: u64, dir: impl Into<PathBuf>) -> Self {
        LogConfig {
            log_id,
            page_bits: 25,
            memory_pages: 8,
            mutable_fraction: 0.9,
            dir: dir.into(),
            shared_lag_pages: 0,
            local_retain_pages: None,
            io_threads: 2,
            max_record_bytes: 4096,
            sync_writes: false,
        }
    }

    pub fn page_size(&self) -> u64 {
        1 << self.page_bits
    }

    /// Sizes the in-memory portion from a byte budget.
    pub fn with_memory_budget(mut self, bytes: u64) -> Self {
        self.memory_pages = (bytes >> self.page_bits).max(3);
        self
    }

    /// Pages in the mutable region: `floor(memory_pages * fraction)`, at least
    /// one, leaving room for an immutable page and a free frame.
    pub fn mutable_pages(&self) -> u64 {
        let m = (self.memory_pages as f64 * self.mutable_fraction).floor() as u64;
        m.clamp(1, self.memory_pages.saturating_sub(2).max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Mutable,
    Fuzzy,
    ReadOnly,
    StableLocal,
    SharedTier,
}

/// Why a storage read was issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadPurpose {
    Request = 0,
    Migration = 1,
    Compaction = 2,
    Background = 3,
}

const PURPOSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RegionOffsets {
    pub begin: Address,
    pub shared_boundary: Address,
    pub local_begin: Address,
    pub head: Address,
    pub safe_head: Address,
    pub safe_read_only: Address,
    pub read_only: Address,
    pub flushed_until: Address,
    pub tail: Address,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LogStats {
    pub local_reads: [u64; PURPOSES],
    pub shared_reads: [u64; PURPOSES],
    pub pages_flushed: u64,
    pub pages_shared: u64,
    pub local_pages_removed: u64,
}

impl LogStats {
    pub fn local(&self, p: ReadPurpose) -> u64 {
        self.local_reads[p as usize]
    }

    pub fn shared(&self, p: ReadPurpose) -> u64 {
        self.shared_reads[p as usize]
    }

    pub fn reads(&self, p: ReadPurpose) -> u64 {
        self.local(p) + self.shared(p)
    }
}

#[derive(Debug, Default)]
struct Counters {
    local_reads: [AtomicU64; PURPOSES],
    shared_reads: [AtomicU64; PURPOSES],
    pages_flushed: AtomicU64,
    pages_shared: AtomicU64,
    local_pages_removed: AtomicU64,
}

enum FlushMsg {
    Work,
    Shutdown,
}

struct Inner {
    cfg: LogConfig,
    page_size: u64,
    mutable_pages: u64,
    frames: Box<[Box<[AtomicU64]>]>,

    tail: AtomicU64,
    read_only: AtomicU64,
    safe_read_only: AtomicU64,
    head: AtomicU64,
    safe_head: AtomicU64,
    flushed_until: AtomicU64,
    shared_boundary: AtomicU64,
    local_begin: AtomicU64,
    begin: AtomicU64,
    head_target: AtomicU64,

    epoch: Arc<EpochManager>,
    local: LocalPages,
    shared: Arc<dyn SharedTier>,
    flush_tx: Sender<FlushMsg>,
    frame_lock: Mutex<()>,
    share_lock: Mutex<()>,
    local_lock: Mutex<()>,
    counters: Counters,
    background_error: Mutex<Option<String>>,
    /// Bytes of flushed pages not yet copied to the shared tier, so the copy
    /// does not read local files back. Bounded; older pages fall back to a read.
    staged: Mutex<BTreeMap<u64, Arc<[u8]>>>,
    this: Weak<Inner>,
}

const STAGED_BYTES: u64 = 64 << 20;

pub struct HybridLog {
    inner: Arc<Inner>,
    flusher: Option<JoinHandle<()>>,
    io: IoPool,
}

impl std::fmt::Debug for HybridLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HybridLog")
            .field("log_id", &self.inner.cfg.log_id)
            .field("offsets", &self.offsets())
            .finish()
    }
}

impl HybridLog {
    pub fn open(
        cfg: LogConfig,
        epoch: Arc<EpochManager>,
        shared: Arc<dyn SharedTier>,
    ) -> Result<Self, LogError> {
        assert!(cfg.memory_pages >= 3, "need at least three page frames");
        assert!(
            shared.page_size() == cfg.page_size(),
            "shared tier page size differs from log page size"
        );
        let page_size = cfg.page_size();
        let words = (page_size / 8) as usize;
        let frames = (0..cfg.memory_pages)
            .map(|_| (0..words).map(|_| AtomicU64::new(0)).collect())
            .collect();
        let local = LocalPages::open(&cfg.dir, cfg.page_bits, cfg.sync_writes)?;
        let (tx, rx) = crossbeam_channel::unbounded();
        let inner = Arc::new_cyclic(|this| Inner {
            this: this.clone(),
            mutable_pages: cfg.mutable_pages(),
            page_size,
            frames,
            tail: AtomicU64::new(START_ADDRESS),
            read_only: AtomicU64::new(0),
            safe_read_only: AtomicU64::new(0),
            head: AtomicU64::new(0),
            safe_head: AtomicU64::new(0),
            flushed_until: AtomicU64::new(0),
            shared_boundary: AtomicU64::new(0),
            local_begin: AtomicU64::new(0),
            begin: AtomicU64::new(START_ADDRESS),
            head_target: AtomicU64::new(0),
            epoch,
            local,
            shared,
            flush_tx: tx,
            frame_lock: Mutex::new(()),
            share_lock: Mutex::new(()),
            local_lock: Mutex::new(()),
            counters: Counters::default(),
            background_error: Mutex::new(None),
            staged: Mutex::new(BTreeMap::new()),
            cfg,
        });
        let worker = inner.clone();
        let flusher = std::thread::Builder::new()
            .name(format!("log-{}-flush", inner.cfg.log_id))
            .spawn(move || flusher_loop(worker, rx))
            .expect("spawn flusher");
        let io = IoPool::new(&format!("log-{}", inner.cfg.log_id), inner.cfg.io_threads);
        Ok(HybridLog {
            inner,
            flusher: Some(flusher),
            io,
        })
    }

    pub fn log_id(&self) -> u64 {
        self.inner.cfg.log_id
    }

    pub fn config(&self) -> &LogConfig {
        &self.inner.cfg
    }

    pub fn page_size(&self) -> u64 {
        self.inner.page_size
    }

    pub fn epoch(&self) -> &Arc<EpochManager> {
        &self.inner.epoch
    }

    pub fn shared_tier(&self) -> &Arc<dyn SharedTier> {
        &self.inner.shared
    }

    pub fn tail(&self) -> Address {
        Address::new(self.inner.tail.load(Ordering::Acquire))
    }

    pub fn read_only(&self) -> Address {
        Address::new(self.inner.read_only.load(Ordering::Acquire))
    }

    pub fn safe_read_only(&self) -> Address {
        Address::new(self.inner.safe_read_only.load(Ordering::Acquire))
    }

    pub fn head(&self) -> Address {
        Address::new(self.inner.head.load(Ordering::Acquire))
    }

    pub fn begin(&self) -> Address {
        Address::new(self.inner.begin.load(Ordering::Acquire))
    }

    pub fn offsets(&self) -> RegionOffsets {
        let i = &self.inner;
        let a = |v: &AtomicU64| Address::new(v.load(Ordering::Acquire));
        RegionOffsets {
            begin: a(&i.begin),
            shared_boundary: a(&i.shared_boundary),
            local_begin: a(&i.local_begin),
            head: a(&i.head),
            safe_head: a(&i.safe_head),
            safe_read_only: a(&i.safe_read_only),
            read_only: a(&i.read_only),
            flushed_until: a(&i.flushed_until),
            tail: a(&i.tail),
        }
    }

    pub fn stats(&self) -> LogStats {
        let c = &self.inner.counters;
        let load = |a: &[AtomicU64; PURPOSES]| {
            let mut out = [0; PURPOSES];
            for (o, v) in out.iter_mut().zip(a) {
                *o = v.load(Ordering::Relaxed);
            }
            out
        };
        LogStats {
            local_reads: load(&c.local_reads),
            shared_reads: load(&c.shared_reads),
            pages_flushed: c.pages_flushed.load(Ordering::Relaxed),
            pages_shared: c.pages_shared.load(Ordering::Relaxed),
            local_pages_removed: c.local_pages_removed.load(Ordering::Relaxed),
        }
    }

    /// Error raised by the background flusher, if any.
    pub fn background_error(&self) -> Option<String> {
        self.inner.background_error.lock().clone()
    }

    /// Classifies `address` for a thread whose cached read-only offset is
    /// `cached_read_only`.
    pub fn region(&self, address: Address, cached_read_only: Address) -> Region {
        let a = address.raw();
        if a >= cached_read_only.raw() {
            Region::Mutable
        } else if a >= self.inner.safe_read_only.load(Ordering::Acquire) {
            Region::Fuzzy
        } else if a >= self.inner.head.load(Ordering::Acquire) {
            Region::ReadOnly
        } else if a >= self.inner.local_begin.load(Ordering::Acquire) {
            Region::StableLocal
        } else {
            Region::SharedTier
        }
    }

    /// Reserves `size` bytes at the tail. The caller must be epoch protected
    /// and must write the record before its next refresh.
    pub fn allocate(&self, size: u64, caller: EpochThread) -> Result<Address, LogError> {
        self.inner.allocate(size, Some(caller))
    }

    /// Allocates and writes a record in one step.
    pub fn append(
        &self,
        caller: EpochThread,
        info: RecordInfo,
        tag: u16,
        key: u64,
        value: &[u8],
    ) -> Result<Address, LogError> {
        let addr = self.allocate(record::record_size(value.len()), caller)?;
        record::write_record(self.inner.words(addr), info, tag, key, value);
        Ok(addr)
    }

    /// Memory-resident record at `address`, or `None` below `head`. The caller
    /// must be epoch protected for as long as it uses the reference.
    pub fn get(&self, address: Address) -> Option<RecordRef<'_>> {
        if address.raw() < self.inner.head.load(Ordering::Acquire) || address.is_null() {
            return None;
        }
        Some(RecordRef::new(address, self.inner.words(address)))
    }

    /// Issues an asynchronous read of the record at `address` from local
    /// files or the shared tier.
    pub fn read_async(
        &self,
        address: Address,
        purpose: ReadPurpose,
    ) -> Ticket<Result<OwnedRecord, LogError>> {
        let inner = self.inner.clone();
        self.io
            .submit(move || inner.read_record_from_storage(address, purpose))
    }

    pub fn read_sync(&self, address: Address, purpose: ReadPurpose) -> Result<OwnedRecord, LogError> {
        self.inner.read_record_from_storage(address, purpose)
    }

    /// Moves the read-only offset forward to the page boundary at or below
    /// `target`.
    pub fn shift_read_only(&self, target: Address, caller: Option<EpochThread>) {
        self.inner.shift_read_only(target.raw(), caller);
    }

    /// Moves `head` forward, bounded by what has been flushed.
    pub fn shift_head(&self, target: Address, caller: Option<EpochThread>) {
        self.inner.shift_head(target.raw(), caller);
    }

    /// Pads the rest of the tail page so everything written so far lies on
    /// complete pages. Returns the new tail.
    pub fn seal_tail_page(&self) -> Address {
        let i = &self.inner;
        let mask = i.page_size - 1;
        loop {
            let cur = i.tail.load(Ordering::Acquire);
            if cur & mask == 0 {
                return Address::new(cur);
            }
            let next = (cur | mask) + 1;
            if i
                .tail
                .compare_exchange(cur, next, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                return Address::new(next);
            }
        }
    }

    /// Blocks until every page below `until` is in local page files. Must not
    /// be called while holding an epoch-protected thread idle.
    pub fn flush_until(&self, until: Address) -> Result<(), LogError> {
        let target = self.inner.page_floor(until.raw());
        self.inner.shift_read_only(target, None);
        self.wait_for("local flush", || {
            self.inner.flushed_until.load(Ordering::Acquire) >= target
        })
    }

    /// Flushes and evicts every page below `until` from memory.
    pub fn evict_until(&self, until: Address) -> Result<(), LogError> {
        let target = self.inner.page_floor(until.raw());
        self.flush_until(Address::new(target))?;
        self.inner.shift_head(target, None);
        self.wait_for("eviction", || {
            self.inner.safe_head.load(Ordering::Acquire) >= target
        })
    }

    /// Seals the tail page and evicts the whole log to storage.
    pub fn evict_all(&self) -> Result<Address, LogError> {
        let tail = self.seal_tail_page();
        self.evict_until(tail)?;
        Ok(tail)
    }

    /// Copies every page below `until` (bounded by `head`) into the shared tier.
    pub fn flush_to_shared(&self, until: Address) -> Result<Address, LogError> {
        let i = &self.inner;
        let limit = i.page_floor(until.raw()).min(i.safe_head.load(Ordering::Acquire));
        i.copy_to_shared(limit)?;
        Ok(Address::new(i.shared_boundary.load(Ordering::Acquire)))
    }

    /// Blocks until the page holding `address` is in the shared tier.
    pub fn ensure_shared(&self, address: Address) -> Result<(), LogError> {
        let i = &self.inner;
        let target = i.page_floor(address.raw()) + i.page_size;
        if i.shared_boundary.load(Ordering::Acquire) >= target {
            return Ok(());
        }
        if address.raw() >= i.head.load(Ordering::Acquire) {
            return Err(LogError::Unavailable(address));
        }
        self.wait_for("eviction", || i.safe_head.load(Ordering::Acquire) >= target)?;
        i.copy_to_shared(target)
    }

    /// Drops local page files below `until` that are already in the shared tier.
    pub fn evict_local(&self, until: Address) -> Result<Address, LogError> {
        self.inner.evict_local(until.raw())?;
        Ok(Address::new(self.inner.local_begin.load(Ordering::Acquire)))
    }

    /// Marks everything below `until` as reclaimed; reads below it fail.
    pub fn truncate_until(&self, until: Address) -> Result<(), LogError> {
        let i = &self.inner;
        let target = i.page_floor(until.raw()).min(i.safe_head.load(Ordering::Acquire));
        let old = i.begin.fetch_max(target, Ordering::AcqRel);
        if target > old {
            let _g = i.local_lock.lock();
            let lb = i.local_begin.fetch_max(target, Ordering::AcqRel);
            for p in (lb >> i.cfg.page_bits)..(target >> i.cfg.page_bits) {
                i.local.remove_page(p)?;
            }
        }
        Ok(())
    }

    /// Reads complete pages of `[from, to)` from storage in address order and
    /// hands each record to `f`, stopping early when `f` returns false.
    /// Only addresses below `head` are visited. Returns the address reached.
    pub fn scan_storage<F>(
        &self,
        from: Address,
        to: Address,
        purpose: ReadPurpose,
        mut f: F,
    ) -> Result<Address, LogError>
    where
        F: FnMut(OwnedRecord) -> bool,
    {
        let i = &self.inner;
        let bits = i.cfg.page_bits;
        let end = to
            .raw()
            .min(i.safe_head.load(Ordering::Acquire))
            .min(i.head.load(Ordering::Acquire));
        let mut addr = from.raw().max(i.begin.load(Ordering::Acquire));
        while addr < end {
            let page = addr >> bits;
            let bytes = i.read_page_from_storage(page, purpose)?;
            let page_start = page << bits;
            let mut off = (addr - page_start) as usize;
            while off + record::HEADER_BYTES as usize <= bytes.len() && page_start + (off as u64) < end {
                let Some(rec) = OwnedRecord::parse(Address::new(page_start + off as u64), &bytes[off..])
                else {
                    break;
                };
                off += rec.size() as usize;
                if !f(rec) {
                    return Ok(Address::new(page_start + off as u64));
                }
            }
            addr = (page + 1) << bits;
        }
        Ok(Address::new(end.max(from.raw())))
    }

    fn wait_for(&self, what: &'static str, mut done: impl FnMut() -> bool) -> Result<(), LogError> {
        let deadline = Instant::now() + Duration::from_secs(60);
        loop {
            if done() {
                return Ok(());
            }
            if let Some(e) = self.background_error() {
                return Err(LogError::Io(std::io::Error::other(e)));
            }
            if Instant::now() > deadline {
                return Err(LogError::Timeout(what));
            }
            self.inner.epoch.try_drain();
            let _ = self.inner.flush_tx.send(FlushMsg::Work);
            std::thread::sleep(Duration::from_micros(200));
        }
    }
}

impl Drop for HybridLog {
    fn drop(&mut self) {
        let _ = self.inner.flush_tx.send(FlushMsg::Shutdown);
        if let Some(h) = self.flusher.take() {
            let _ = h.join();
        }
    }
}

impl Inner {
    fn page_floor(&self, a: u64) -> u64 {
        a & !(self.page_size - 1)
    }

    fn words(&self, address: Address) -> &[AtomicU64] {
        let bits = self.cfg.page_bits;
        let frame = (address.page(bits) % self.cfg.memory_pages) as usize;
        let off = (address.offset(bits) / 8) as usize;
        &self.frames[frame][off..]
    }

    fn allocate(&self, size: u64, caller: Option<EpochThread>) -> Result<Address, LogError> {
        let size = size.div_ceil(8) * 8;
        if size > self.page_size {
            return Err(LogError::TooLarge {
                size,
                max: self.page_size,
            });
        }
        let bits = self.cfg.page_bits;
        let mask = self.page_size - 1;
        loop {
            let cur = self.tail.load(Ordering::Acquire);
            let start = if (cur & mask) + size <= self.page_size {
                cur
            } else {
                (cur | mask) + 1
            };
            let page = start >> bits;
            if page >= self.cfg.memory_pages {
                let needed = (page + 1 - self.cfg.memory_pages) << bits;
                if self.safe_head.load(Ordering::Acquire) < needed {
                    self.shift_read_only(needed, caller);
                    self.request_head(needed, caller);
                    return Err(LogError::Backpressure);
                }
            }
            if self
                .tail
                .compare_exchange_weak(cur, start + size, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                if start & mask == 0 || start != cur {
                    self.on_page_opened(page, caller);
                }
                return Ok(Address::new(start));
            }
        }
    }

    fn on_page_opened(&self, page: u64, caller: Option<EpochThread>) {
        let bits = self.cfg.page_bits;
        if page + 1 > self.mutable_pages {
            self.shift_read_only((page + 1 - self.mutable_pages) << bits, caller);
        }
        if page + 2 > self.cfg.memory_pages {
            self.request_head((page + 2 - self.cfg.memory_pages) << bits, caller);
        }
    }

    fn request_head(&self, target: u64, caller: Option<EpochThread>) {
        self.head_target.fetch_max(target, Ordering::AcqRel);
        self.shift_head(target, caller);
        let _ = self.flush_tx.send(FlushMsg::Work);
    }

    fn bump(self: &Inner, caller: Option<EpochThread>, action: impl FnOnce() + Send + 'static) {
        match caller {
            Some(t) => self.epoch.bump_with_action_from(t, action),
            None => self.epoch.bump_with_action(action),
        };
    }

    fn weak(&self) -> Weak<Inner> {
        self.this.clone()
    }

    fn shift_read_only(&self, target: u64, caller: Option<EpochThread>) {
        let tail_floor = self.page_floor(self.tail.load(Ordering::Acquire));
        let target = self.page_floor(target).min(tail_floor);
        let old = self.read_only.fetch_max(target, Ordering::AcqRel);
        if target <= old {
            return;
        }
        let weak = self.weak();
        self.bump(caller, move || {
            if let Some(i) = weak.upgrade() {
                i.safe_read_only.fetch_max(target, Ordering::AcqRel);
                let _ = i.flush_tx.send(FlushMsg::Work);
            }
        });
    }

    fn shift_head(&self, target: u64, caller: Option<EpochThread>) {
        let target = self
            .page_floor(target)
            .min(self.flushed_until.load(Ordering::Acquire));
        let old = self.head.fetch_max(target, Ordering::AcqRel);
        if target <= old {
            return;
        }
        let weak = self.weak();
        self.bump(caller, move || {
            if let Some(i) = weak.upgrade() {
                i.release_frames(target);
            }
        });
    }

    /// Zeroes frames of pages below `target` and makes them reusable.
    fn release_frames(&self, target: u64) {
        let _g = self.frame_lock.lock();
        let bits = self.cfg.page_bits;
        let from = self.safe_head.load(Ordering::Acquire);
        if target <= from {
            return;
        }
        let first = from >> bits;
        let last = target >> bits;
        // Only the newest `memory_pages` pages can still own a frame.
        let first = first.max(last.saturating_sub(self.cfg.memory_pages));
        for p in first..last {
            for w in self.frames[(p % self.cfg.memory_pages) as usize].iter() {
                w.store(0, Ordering::Relaxed);
            }
        }
        self.safe_head.store(target, Ordering::Release);
        let _ = self.flush_tx.send(FlushMsg::Work);
    }

    fn flush_local(&self) -> Result<bool, LogError> {
        let bits = self.cfg.page_bits;
        let target = self.safe_read_only.load(Ordering::Acquire) >> bits;
        let mut page = self.flushed_until.load(Ordering::Acquire) >> bits;
        let progressed = page < target;
        while page < target {
            let frame = &self.frames[(page % self.cfg.memory_pages) as usize];
            let mut bytes = Vec::with_capacity(self.page_size as usize);
            for w in frame.iter() {
                bytes.extend_from_slice(&w.load(Ordering::Acquire).to_le_bytes());
            }
            self.local.write_page(page, &bytes)?;
            self.stage(page, bytes);
            page += 1;
            self.flushed_until.store(page << bits, Ordering::Release);
            self.counters.pages_flushed.fetch_add(1, Ordering::Relaxed);
        }
        Ok(progressed)
    }

    fn stage(&self, page: u64, bytes: Vec<u8>) {
        let cap = (STAGED_BYTES / self.page_size).max(1) as usize;
        let mut st = self.staged.lock();
        st.insert(page, bytes.into());
        while st.len() > cap {
            st.pop_first();
        }
    }

    fn copy_to_shared(&self, limit: u64) -> Result<(), LogError> {
        let _g = self.share_lock.lock();
        let bits = self.cfg.page_bits;
        let limit = limit
            .min(self.safe_head.load(Ordering::Acquire))
            .min(self.flushed_until.load(Ordering::Acquire));
        let mut page = self.shared_boundary.load(Ordering::Acquire) >> bits;
        while (page << bits) < limit {
            let staged = self.staged.lock().remove(&page);
            let bytes = match staged {
                Some(b) => b,
                None => self.read_page_from_storage(page, ReadPurpose::Background)?.into(),
            };
            self.shared
                .append_pages(self.cfg.log_id, Address::new(page << bits), &bytes)?;
            page += 1;
            self.shared_boundary.store(page << bits, Ordering::Release);
            self.counters.pages_shared.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }

    fn evict_local(&self, until: u64) -> Result<(), LogError> {
        let _g = self.local_lock.lock();
        let bits = self.cfg.page_bits;
        let target = self
            .page_floor(until)
            .min(self.shared_boundary.load(Ordering::Acquire));
        let old = self.local_begin.fetch_max(target, Ordering::AcqRel);
        for p in (old >> bits)..(target >> bits) {
            self.local.remove_page(p)?;
            self.counters
                .local_pages_removed
                .fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }

    fn background_pass(&self) -> Result<(), LogError> {
        self.flush_local()?;
        let target = self.head_target.load(Ordering::Acquire);
        if target > self.head.load(Ordering::Acquire) {
            self.shift_head(target, None);
        }
        let bits = self.cfg.page_bits;
        let safe_head = self.safe_head.load(Ordering::Acquire);
        let lagged = safe_head.saturating_sub(self.cfg.shared_lag_pages << bits);
        if lagged > self.shared_boundary.load(Ordering::Acquire) {
            self.copy_to_shared(lagged)?;
        }
        if let Some(keep) = self.cfg.local_retain_pages {
            let limit = safe_head.saturating_sub(keep << bits);
            if limit > self.local_begin.load(Ordering::Acquire) {
                self.evict_local(limit)?;
            }
        }
        Ok(())
    }

    fn storage_read(&self, address: Address, len: usize, purpose: ReadPurpose) -> Result<Vec<u8>, LogError> {
        let a = address.raw();
        if a < self.begin.load(Ordering::Acquire) {
            return Err(LogError::Unavailable(address));
        }
        if a >= self.local_begin.load(Ordering::Acquire) {
            match self.local.read(address, len) {
                Ok(Some(bytes)) => {
                    self.counters.local_reads[purpose as usize].fetch_add(1, Ordering::Relaxed);
                    return Ok(bytes);
                }
                Ok(None) => {}
                Err(e) if a >= self.shared_boundary.load(Ordering::Acquire) => return Err(e.into()),
                Err(_) => {}
            }
        }
        if a < self.shared_boundary.load(Ordering::Acquire) {
            let bytes = self.shared.read(self.cfg.log_id, address, len)?;
            self.counters.shared_reads[purpose as usize].fetch_add(1, Ordering::Relaxed);
            return Ok(bytes);
        }
        Err(LogError::Unavailable(address))
    }

    fn read_record_from_storage(&self, address: Address, purpose: ReadPurpose) -> Result<OwnedRecord, LogError> {
        let page_end = self.page_floor(address.raw()) + self.page_size;
        let len = (page_end - address.raw()).min(self.cfg.max_record_bytes.max(record::HEADER_BYTES));
        let bytes = self.storage_read(address, len as usize, purpose)?;
        match OwnedRecord::parse(address, &bytes) {
            Some(r) => Ok(r),
            None => {
                // Record longer than the read hint: fetch the remainder.
                if bytes.len() >= record::HEADER_BYTES as usize {
                    let meta = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
                    if meta != 0 {
                        let full = record::record_size(record::meta_value_len(meta)) as usize;
                        let bytes = self.storage_read(address, full, purpose)?;
                        if let Some(r) = OwnedRecord::parse(address, &bytes) {
                            return Ok(r);
                        }
                    }
                }
                Err(LogError::Unavailable(address))
            }
        }
    }

    fn read_page_from_storage(&self, page: u64, purpose: ReadPurpose) -> Result<Vec<u8>, LogError> {
        let bits = self.cfg.page_bits;
        let start = page << bits;
        if start >= self.local_begin.load(Ordering::Acquire) {
            if let Some(bytes) = self.local.read_page(page)? {
                self.counters.local_reads[purpose as usize].fetch_add(1, Ordering::Relaxed);
                return Ok(bytes);
            }
        }
        if start < self.shared_boundary.load(Ordering::Acquire) {
            let bytes = self
                .shared
                .read(self.cfg.log_id, Address::new(start), self.page_size as usize)?;
            self.counters.shared_reads[purpose as usize].fetch_add(1, Ordering::Relaxed);
            return Ok(bytes);
        }
        Err(LogError::Unavailable(Address::new(start)))
    }
}

/// Reads one record of log `log_id` straight from the shared tier.
pub fn read_shared_record(
    shared: &dyn SharedTier,
    log_id: u64,
    address: Address,
    max_record_bytes: u64,
) -> Result<OwnedRecord, LogError> {
    let page = shared.page_size();
    let page_end = (address.raw() & !(page - 1)) + page;
    let hint = (page_end - address.raw()).min(max_record_bytes.max(record::HEADER_BYTES));
    let bytes = shared.read(log_id, address, hint as usize)?;
    if let Some(r) = OwnedRecord::parse(address, &bytes) {
        return Ok(r);
    }
    if bytes.len() >= record::HEADER_BYTES as usize {
        let meta = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if meta != 0 {
            let full = record::record_size(record::meta_value_len(meta)) as usize;
            if let Some(r) = OwnedRecord::parse(address, &shared.read(log_id, address, full)?) {
                return Ok(r);
            }
        }
    }
    Err(LogError::Unavailable(address))
}

fn flusher_loop(inner: Arc<Inner>, rx: Receiver<FlushMsg>) {
    loop {
        match rx.recv_timeout(Duration::from_millis(20)) {
            Ok(FlushMsg::Shutdown) => return,
            Ok(FlushMsg::Work) | Err(crossbeam_channel::RecvTimeoutError::Timeout) => {}
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => return,
        }
        while let Ok(msg) = rx.try_recv() {
            if let FlushMsg::Shutdown = msg {
                return;
            }
        }
        inner.epoch.try_drain();
        if let Err(e) = inner.background_pass() {
            tracing::error!(log_id = inner.cfg.log_id, error = %e, "background flush failed");
            *inner.background_error.lock() = Some(e.to_string());
        }
    }
}
