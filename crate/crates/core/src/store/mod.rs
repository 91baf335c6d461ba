//! Single-node key-value store over the hash index and the hybrid log.
//!
//! Every key's versions hang off one index entry as a chain of records linked
//! newest to oldest. Updates to records in the mutable region happen in place;
//! anything older is copied to the tail and installed with a compare-exchange
//! on the entry. Lookups that run into storage go pending and finish in
//! [`StoreSession::complete_pending`] on the thread that issued them.
//!
//! Migration support lives here too: indirection records that stand in for a
//! chain on another server's shared-tier log, dead zones that hide stale
//! records of ranges this server gave up, and the hooks that sampling and
//! receiving install.

mod indirection;
mod session;
mod transfer;

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use arc_swap::{ArcSwap, ArcSwapOption};
use parking_lot::Mutex;
use thiserror::Error;

use crate::address::Address;
use crate::epoch::{EpochError, EpochManager};
use crate::index::{HashIndex, IndexConfig, IndexError};
use crate::io::IoPool;
use crate::log::record::{FLAG_INVALID, HEADER_BYTES};
use crate::log::{read_shared_record, HybridLog, LogConfig, LogError, OwnedRecord, RecordRef};
use crate::ownership::{HashRange, RangeSet};
use crate::shared_tier::SharedTier;

pub use indirection::Indirection;
pub use session::{Completion, Op, PendingId, RmwOp, Status, StoreSession};
pub use transfer::{Audit, CompactionReport, MigratedItem, RegionScan, WalkMode};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Epoch(#[from] EpochError),
    #[error("value of {0} bytes exceeds the configured bound")]
    ValueTooLarge(usize),
    #[error("gave up after {0} conflicting attempts")]
    Conflict(u32),
    #[error("indirection fetch failed: {0}")]
    Indirection(String),
    #[error("{0}")]
    Usage(&'static str),
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub log: LogConfig,
    pub index: IndexConfig,
    pub max_value_bytes: usize,
    /// Compare-exchange failures tolerated per operation.
    pub max_retries: u32,
    /// Pending operations per session above which a warning is logged.
    pub pending_warn: usize,
    pub fetch_threads: usize,
}

impl StoreConfig {
    pub fn new(log_id: u64, dir: impl Into<PathBuf>) -> Self {
        StoreConfig {
            log: LogConfig::new(log_id, dir),
            index: IndexConfig::new(1 << 16),
            max_value_bytes: 1024,
            max_retries: 10_000,
            pending_warn: 1 << 20,
            fetch_threads: 2,
        }
    }

    pub fn with_memory_budget(mut self, bytes: u64) -> Self {
        self.log = self.log.with_memory_budget(bytes);
        self
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        self.index.validate()?;
        let max = self.log.page_size() - HEADER_BYTES;
        if self.max_value_bytes == 0 || self.max_value_bytes as u64 > max {
            return Err(StoreError::Usage("value bound must be positive and fit a page"));
        }
        if self.max_retries == 0 {
            return Err(StoreError::Usage("max_retries must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct Counters {
    in_place: AtomicU64,
    rcu: AtomicU64,
    cas_retries: AtomicU64,
    fuzzy_retries: AtomicU64,
    pending_started: AtomicU64,
    pending_peak: AtomicU64,
    indirection_fetches: AtomicU64,
    indirection_reads: AtomicU64,
    indirection_errors: AtomicU64,
    sample_copies: AtomicU64,
    migrated_inserted: AtomicU64,
    migrated_skipped: AtomicU64,
    forwarded_inserted: AtomicU64,
    forwarded_discarded: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub in_place: u64,
    pub rcu: u64,
    pub cas_retries: u64,
    pub fuzzy_retries: u64,
    pub pending_started: u64,
    pub pending_peak: u64,
    pub indirection_fetches: u64,
    /// Shared-tier record reads made while resolving indirections.
    pub indirection_reads: u64,
    pub indirection_errors: u64,
    pub sample_copies: u64,
    pub migrated_inserted: u64,
    pub migrated_skipped: u64,
    pub forwarded_inserted: u64,
    pub forwarded_discarded: u64,
}

/// Hot-record sampling at a migration source.
#[derive(Debug)]
pub struct SamplingHook {
    pub ranges: RangeSet,
    pub tail_at_start: Address,
    capacity: usize,
    sampled: Mutex<(HashSet<u64>, Vec<u64>)>,
    overflow: AtomicU64,
}

impl SamplingHook {
    fn note(&self, key: u64) {
        let mut s = self.sampled.lock();
        if s.0.contains(&key) {
            return;
        }
        if s.1.len() >= self.capacity {
            self.overflow.fetch_add(1, Ordering::Relaxed);
            return;
        }
        s.0.insert(key);
        s.1.push(key);
    }

    /// Sampled keys in first-access order.
    pub fn sampled_keys(&self) -> Vec<u64> {
        self.sampled.lock().1.clone()
    }

    /// Accesses that found the sampled set full.
    pub fn overflow(&self) -> u64 {
        self.overflow.load(Ordering::Relaxed)
    }
}

/// Ranges a migration target is receiving.
#[derive(Debug)]
pub struct ReceiveHook {
    pub ranges: RangeSet,
    pub source_log_id: u64,
    written: Mutex<HashSet<u64>>,
    inserted: Mutex<HashSet<u64>>,
    indirections: Mutex<HashSet<Indirection>>,
}

impl ReceiveHook {
    /// Keys written locally since receiving began.
    pub fn written_keys(&self) -> Vec<u64> {
        let mut v: Vec<_> = self.written.lock().iter().copied().collect();
        v.sort_unstable();
        v
    }
}

/// Records of `range` below `below` are stale leftovers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeadZone {
    pub range: HashRange,
    pub below: Address,
}

type FetchKey = (u64, u64, u64);

struct FetchSlot {
    result: OnceLock<Result<Option<OwnedRecord>, String>>,
}

/// Where a walk over the in-memory part of a chain ended.
#[derive(Debug, Clone, Copy)]
enum End {
    Memory(Address),
    Disk(Address),
    Null,
}

#[derive(Debug, Clone, Copy)]
struct Walk {
    end: End,
    indirection: Option<Indirection>,
}

pub struct Store {
    cfg: StoreConfig,
    epoch: Arc<EpochManager>,
    index: HashIndex,
    log: HybridLog,
    shared: Arc<dyn SharedTier>,
    fetch_pool: IoPool,
    fetches: Mutex<HashMap<FetchKey, Arc<FetchSlot>>>,
    dead_zones: ArcSwap<Vec<DeadZone>>,
    has_dead_zones: AtomicBool,
    watermarks: ArcSwap<HashMap<u64, Address>>,
    has_watermarks: AtomicBool,
    sampling: ArcSwapOption<SamplingHook>,
    sampling_on: AtomicBool,
    receiving: ArcSwapOption<ReceiveHook>,
    receiving_on: AtomicBool,
    counters: Arc<Counters>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("log", &self.log)
            .field("index", &self.index)
            .finish()
    }
}

impl Store {
    pub fn open(
        cfg: StoreConfig,
        epoch: Arc<EpochManager>,
        shared: Arc<dyn SharedTier>,
    ) -> Result<Arc<Store>, StoreError> {
        cfg.validate()?;
        let index = HashIndex::new(cfg.index)?;
        let log = HybridLog::open(cfg.log.clone(), epoch.clone(), shared.clone())?;
        let fetch_pool = IoPool::new(&format!("fetch-{}", cfg.log.log_id), cfg.fetch_threads);
        Ok(Arc::new(Store {
            cfg,
            epoch,
            index,
            log,
            shared,
            fetch_pool,
            fetches: Mutex::new(HashMap::new()),
            dead_zones: ArcSwap::from_pointee(Vec::new()),
            has_dead_zones: AtomicBool::new(false),
            watermarks: ArcSwap::from_pointee(HashMap::new()),
            has_watermarks: AtomicBool::new(false),
            sampling: ArcSwapOption::empty(),
            sampling_on: AtomicBool::new(false),
            receiving: ArcSwapOption::empty(),
            receiving_on: AtomicBool::new(false),
            counters: Arc::new(Counters::default()),
        }))
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn log(&self) -> &HybridLog {
        &self.log
    }

    pub fn index(&self) -> &HashIndex {
        &self.index
    }

    pub fn epoch(&self) -> &Arc<EpochManager> {
        &self.epoch
    }

    pub fn log_id(&self) -> u64 {
        self.log.log_id()
    }

    pub fn session(self: &Arc<Self>) -> Result<StoreSession, StoreError> {
        StoreSession::new(self.clone())
    }

    pub fn stats(&self) -> StoreStats {
        let c = &*self.counters;
        let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
        StoreStats {
            in_place: l(&c.in_place),
            rcu: l(&c.rcu),
            cas_retries: l(&c.cas_retries),
            fuzzy_retries: l(&c.fuzzy_retries),
            pending_started: l(&c.pending_started),
            pending_peak: l(&c.pending_peak),
            indirection_fetches: l(&c.indirection_fetches),
            indirection_reads: l(&c.indirection_reads),
            indirection_errors: l(&c.indirection_errors),
            sample_copies: l(&c.sample_copies),
            migrated_inserted: l(&c.migrated_inserted),
            migrated_skipped: l(&c.migrated_skipped),
            forwarded_inserted: l(&c.forwarded_inserted),
            forwarded_discarded: l(&c.forwarded_discarded),
        }
    }

    // ---- hooks ----

    /// Starts sampling accesses to `ranges`. Records older than the current
    /// tail that are read from the immutable region or storage get copied to
    /// the tail.
    pub fn begin_sampling(&self, ranges: RangeSet, capacity: usize) -> Arc<SamplingHook> {
        let hook = Arc::new(SamplingHook {
            ranges,
            tail_at_start: self.log.tail(),
            capacity,
            sampled: Mutex::new((HashSet::new(), Vec::new())),
            overflow: AtomicU64::new(0),
        });
        self.sampling.store(Some(hook.clone()));
        self.sampling_on.store(true, Ordering::Release);
        hook
    }

    pub fn end_sampling(&self) -> Option<Arc<SamplingHook>> {
        self.sampling_on.store(false, Ordering::Release);
        self.sampling.swap(None)
    }

    /// Starts receiving `ranges` from the log `source_log_id`. Anything this
    /// log still holds for those ranges is from an earlier period of
    /// ownership and becomes a dead zone.
    pub fn begin_receiving(&self, ranges: RangeSet, source_log_id: u64) -> Arc<ReceiveHook> {
        let tail = self.log.tail();
        for r in ranges.ranges() {
            self.add_dead_zone(*r, tail);
        }
        let hook = Arc::new(ReceiveHook {
            ranges,
            source_log_id,
            written: Mutex::new(HashSet::new()),
            inserted: Mutex::new(HashSet::new()),
            indirections: Mutex::new(HashSet::new()),
        });
        self.receiving.store(Some(hook.clone()));
        self.receiving_on.store(true, Ordering::Release);
        hook
    }

    pub fn end_receiving(&self) -> Option<Arc<ReceiveHook>> {
        self.receiving_on.store(false, Ordering::Release);
        self.receiving.swap(None)
    }

    pub fn receive_hook(&self) -> Option<Arc<ReceiveHook>> {
        self.receiving.load_full()
    }

    pub fn add_dead_zone(&self, range: HashRange, below: Address) {
        self.dead_zones.rcu(|cur| {
            let mut v = (**cur).clone();
            v.push(DeadZone { range, below });
            v
        });
        self.has_dead_zones.store(true, Ordering::Release);
    }

    pub fn dead_zones(&self) -> Vec<DeadZone> {
        (**self.dead_zones.load()).clone()
    }

    /// Indirections into `log_id` that point below `upto` are retired: the
    /// source compacted that part of its log and forwarded what was live.
    pub fn set_watermark(&self, log_id: u64, upto: Address) {
        self.watermarks.rcu(|cur| {
            let mut m = (**cur).clone();
            let e = m.entry(log_id).or_insert(Address::NULL);
            *e = (*e).max(upto);
            m
        });
        self.has_watermarks.store(true, Ordering::Release);
        self.fetches.lock().retain(|k, _| k.1 != log_id);
    }

    // ---- chain walking ----

    /// Lowest address a lookup for `hash` may visit.
    fn stop_below(&self, hash: u64) -> u64 {
        let mut stop = self.log.begin().raw();
        if self.has_dead_zones.load(Ordering::Acquire) {
            for z in self.dead_zones.load().iter() {
                if z.range.contains(hash) {
                    stop = stop.max(z.below.raw());
                }
            }
        }
        stop
    }

    fn retired(&self, ind: &Indirection) -> bool {
        self.has_watermarks.load(Ordering::Acquire)
            && self
                .watermarks
                .load()
                .get(&ind.source_log_id)
                .is_some_and(|w| ind.next_address < *w)
    }

    /// Indirection in `value` if it can hold `hash`.
    fn covering(&self, value: &[u8], hash: u64) -> Option<Indirection> {
        let ind = Indirection::decode(value).ok()?;
        (ind.covers(hash) && !self.retired(&ind)).then_some(ind)
    }

    /// Follows the chain from `from` through memory. The first concrete
    /// record for `key` wins; an indirection only matters when no concrete
    /// record exists anywhere in the chain.
    fn walk(&self, key: u64, hash: u64, from: Address, stop: u64) -> Walk {
        let mut addr = from;
        let mut indirection = None;
        while !addr.is_null() && addr.raw() >= stop {
            let Some(rec) = self.log.get(addr) else {
                return Walk {
                    end: End::Disk(addr),
                    indirection,
                };
            };
            let info = rec.info();
            if !info.is_invalid() {
                if info.is_indirection() {
                    if indirection.is_none() {
                        indirection = self.covering(&rec.read_value(), hash);
                    }
                } else if rec.key() == key {
                    return Walk {
                        end: End::Memory(addr),
                        indirection,
                    };
                }
            }
            addr = info.previous_address();
        }
        Walk {
            end: End::Null,
            indirection,
        }
    }

    /// Like `walk` but reads storage synchronously; used off the request path.
    fn walk_sync(
        &self,
        key: u64,
        hash: u64,
        from: Address,
        stop: u64,
        purpose: crate::log::ReadPurpose,
    ) -> Result<(Option<OwnedRecord>, Option<Indirection>), StoreError> {
        let w = self.walk(key, hash, from, stop);
        let mut ind = w.indirection;
        let mut addr = match w.end {
            End::Memory(a) => {
                let r = self.log.get(a).map(|r| r.to_owned_record());
                return Ok((r, ind));
            }
            End::Null => return Ok((None, ind)),
            End::Disk(a) => a,
        };
        while !addr.is_null() && addr.raw() >= stop {
            let rec = self.log.read_sync(addr, purpose)?;
            if !rec.info.is_invalid() {
                if rec.info.is_indirection() {
                    if ind.is_none() {
                        ind = self.covering(&rec.value, hash);
                    }
                } else if rec.key == key {
                    return Ok((Some(rec), ind));
                }
            }
            addr = rec.info.previous_address();
        }
        Ok((None, ind))
    }

    // ---- indirection resolution ----

    /// Shared fetch of `key` through `ind`; concurrent lookups of the same
    /// key share one fetch.
    fn fetch_slot(&self, key: u64, hash: u64, ind: &Indirection) -> Arc<FetchSlot> {
        let fk = (key, ind.source_log_id, ind.next_address.raw());
        let mut map = self.fetches.lock();
        if let Some(s) = map.get(&fk) {
            return s.clone();
        }
        let slot = Arc::new(FetchSlot {
            result: OnceLock::new(),
        });
        map.insert(fk, slot.clone());
        drop(map);
        self.counters
            .indirection_fetches
            .fetch_add(1, Ordering::Relaxed);
        let shared = self.shared.clone();
        let counters = self.counters.clone();
        let max = self.cfg.log.max_record_bytes;
        let ind = *ind;
        let s = slot.clone();
        let _ = self.fetch_pool.submit(move || {
            let r = fetch_chain(&*shared, &counters, ind, key, hash, max);
            if r.is_err() {
                counters.indirection_errors.fetch_add(1, Ordering::Relaxed);
            }
            let _ = s.result.set(r);
        });
        slot
    }

    fn forget_fetch(&self, key: u64, ind: &Indirection) {
        self.fetches
            .lock()
            .remove(&(key, ind.source_log_id, ind.next_address.raw()));
    }

    // ---- sampling and receive bookkeeping ----

    fn sampling_for(&self, hash: u64) -> Option<Arc<SamplingHook>> {
        if !self.sampling_on.load(Ordering::Acquire) {
            return None;
        }
        self.sampling
            .load_full()
            .filter(|h| h.ranges.contains(hash))
    }

    fn note_write(&self, key: u64, hash: u64) {
        if self.receiving_on.load(Ordering::Acquire) {
            if let Some(h) = &*self.receiving.load() {
                if h.ranges.contains(hash) {
                    h.written.lock().insert(key);
                }
            }
        }
        if let Some(h) = self.sampling_for(hash) {
            h.note(key);
        }
    }
}

/// Reads the chain starting at `ind.next_address` from the shared tier until
/// a record for `key` turns up.
fn fetch_chain(
    shared: &dyn SharedTier,
    counters: &Counters,
    ind: Indirection,
    key: u64,
    hash: u64,
    max_record_bytes: u64,
) -> Result<Option<OwnedRecord>, String> {
    let mut log_id = ind.source_log_id;
    let mut addr = ind.next_address;
    let mut hops = 0u32;
    while !addr.is_null() {
        let rec = read_shared_record(shared, log_id, addr, max_record_bytes)
            .map_err(|e| format!("log {log_id} at {addr}: {e}"))?;
        counters.indirection_reads.fetch_add(1, Ordering::Relaxed);
        if !rec.info.is_invalid() {
            if rec.info.is_indirection() {
                if let Ok(next) = Indirection::decode(&rec.value) {
                    if next.covers(hash) {
                        hops += 1;
                        if hops > 64 {
                            return Err("indirection cycle".into());
                        }
                        log_id = next.source_log_id;
                        addr = next.next_address;
                        continue;
                    }
                }
            } else if rec.key == key {
                return Ok((!rec.info.is_tombstone()).then_some(rec));
            }
        }
        addr = rec.info.previous_address();
    }
    Ok(None)
}

/// Value of a memory-resident record, taking the record lock for values
/// wider than one word that may still change in place.
fn read_value(rec: &RecordRef<'_>, may_change: bool) -> Vec<u8> {
    if may_change && rec.value_len() > 8 {
        rec.lock();
        let v = rec.read_value();
        rec.unlock();
        v
    } else {
        rec.read_value()
    }
}

fn seal(rec: &RecordRef<'_>) {
    rec.set_flag(FLAG_INVALID);
}


#[cfg(test)]
mod tests;
