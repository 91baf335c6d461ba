use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::{seal, End, FetchSlot, Store, StoreError};
use crate::address::Address;
use crate::epoch::EpochThread;
use crate::hash::key_hash;
use crate::index::{BucketEntry, EntryHandle};
use crate::io::Ticket;
use crate::log::{LogError, OwnedRecord, ReadPurpose, RecordInfo, RecordRef, Region};

pub type PendingId = u64;

pub type Modifier = Arc<dyn Fn(Option<&[u8]>) -> Vec<u8> + Send + Sync>;

/// Read-modify-write operation, applied to the current value or to `None`
/// when the key is absent.
#[derive(Clone)]
pub enum RmwOp {
    /// Adds to the first eight bytes read as a little-endian `u64`. An absent
    /// key starts from zero, so the result is the 8-byte delta.
    AddU64(u64),
    Custom(Modifier),
}

impl std::fmt::Debug for RmwOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RmwOp::AddU64(d) => write!(f, "AddU64({d})"),
            RmwOp::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl RmwOp {
    pub fn apply(&self, old: Option<&[u8]>) -> Vec<u8> {
        match self {
            RmwOp::AddU64(d) => match old {
                Some(v) if v.len() >= 8 => {
                    let mut out = v.to_vec();
                    let x = u64::from_le_bytes(v[..8].try_into().unwrap()).wrapping_add(*d);
                    out[..8].copy_from_slice(&x.to_le_bytes());
                    out
                }
                Some(v) => {
                    let mut b = [0u8; 8];
                    b[..v.len()].copy_from_slice(v);
                    u64::from_le_bytes(b).wrapping_add(*d).to_le_bytes().to_vec()
                }
                None => d.to_le_bytes().to_vec(),
            },
            RmwOp::Custom(f) => f(old),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Read,
    Upsert(Vec<u8>),
    Rmw(RmwOp),
    /// Like `Rmw` but reports `NotFound` instead of creating the key.
    RmwExisting(RmwOp),
}

impl Op {
    pub fn is_write(&self) -> bool {
        !matches!(self, Op::Read)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    /// Value read, or the new value after a read-modify-write.
    Found(Vec<u8>),
    Written,
    NotFound,
    Pending(PendingId),
}

#[derive(Debug)]
pub struct Completion {
    pub id: PendingId,
    pub key: u64,
    /// Never `Pending`.
    pub result: Result<Status, StoreError>,
}

pub(super) enum Wait {
    /// Behind an earlier pending operation on the same key.
    Queued,
    /// Hit the fuzzy region; re-run after a refresh.
    Retry,
    Disk {
        ticket: Ticket<Result<OwnedRecord, LogError>>,
        snapshot: BucketEntry,
        indirection: Option<super::Indirection>,
        stop: u64,
    },
    Fetch(Arc<FetchSlot>),
}

pub(super) enum Step {
    Done(Result<Status, StoreError>),
    Pend(Wait),
    /// Lost a race; run again from the index.
    Again,
    /// Start over without counting a conflict.
    Restart,
    Backpressure,
}

pub(super) enum Install {
    Ok,
    Conflict,
    Backpressure,
    Failed(StoreError),
}

/// Per-thread state the operations need.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Ctx {
    pub thread: EpochThread,
    pub cached_ro: Address,
}

struct PendingOp {
    id: PendingId,
    key: u64,
    hash: u64,
    op: Op,
    wait: Wait,
}

/// A thread's handle on the store. Not shareable; pending operations complete
/// only through the session that issued them.
pub struct StoreSession {
    store: Arc<Store>,
    ctx: Ctx,
    protected: bool,
    next_id: PendingId,
    pending: VecDeque<PendingOp>,
    pending_keys: HashMap<u64, u32>,
}

impl std::fmt::Debug for StoreSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StoreSession")
            .field("thread", &self.ctx.thread)
            .field("pending", &self.pending.len())
            .finish()
    }
}

impl StoreSession {
    pub(super) fn new(store: Arc<Store>) -> Result<Self, StoreError> {
        let thread = store.epoch.register()?;
        Ok(StoreSession {
            store,
            ctx: Ctx {
                thread,
                cached_ro: Address::NULL,
            },
            protected: false,
            next_id: 1,
            pending: VecDeque::new(),
            pending_keys: HashMap::new(),
        })
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn thread(&self) -> EpochThread {
        self.ctx.thread
    }

    pub(super) fn ctx(&self) -> Ctx {
        self.ctx
    }

    /// Enters the epoch. Operations protect themselves when the session is
    /// not protected; loops that issue many operations protect once and
    /// refresh periodically.
    pub fn protect(&mut self) -> Result<(), StoreError> {
        self.store.epoch.protect(self.ctx.thread)?;
        self.protected = true;
        self.ctx.cached_ro = self.store.log.read_only();
        Ok(())
    }

    pub fn refresh(&mut self) -> Result<(), StoreError> {
        self.protect()
    }

    pub fn unprotect(&mut self) {
        if self.protected {
            let _ = self.store.epoch.unprotect(self.ctx.thread);
            self.protected = false;
        }
    }

    pub fn is_protected(&self) -> bool {
        self.protected
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn has_pending_key(&self, key: u64) -> bool {
        self.pending_keys.contains_key(&key)
    }

    /// Keys with at least one pending operation.
    pub fn pending_keys(&self) -> impl Iterator<Item = u64> + '_ {
        self.pending_keys.keys().copied()
    }

    fn enter(&mut self) -> Result<bool, StoreError> {
        if self.protected {
            Ok(false)
        } else {
            self.protect()?;
            Ok(true)
        }
    }

    fn leave(&mut self, entered: bool) {
        if entered {
            self.unprotect();
        }
    }

    pub fn read(&mut self, key: u64) -> Result<Status, StoreError> {
        self.execute(key, Op::Read)
    }

    pub fn upsert(&mut self, key: u64, value: &[u8]) -> Result<Status, StoreError> {
        self.execute(key, Op::Upsert(value.to_vec()))
    }

    pub fn rmw(&mut self, key: u64, op: RmwOp) -> Result<Status, StoreError> {
        self.execute(key, Op::Rmw(op))
    }

    pub fn execute(&mut self, key: u64, op: Op) -> Result<Status, StoreError> {
        if let Op::Upsert(v) = &op {
            if v.len() > self.store.cfg.max_value_bytes {
                return Err(StoreError::ValueTooLarge(v.len()));
            }
        }
        let entered = self.enter()?;
        let hash = key_hash(key);
        let out = if self.pending_keys.contains_key(&key) {
            Ok(self.enqueue(key, hash, op, Wait::Queued))
        } else {
            match self.run(key, hash, &op) {
                Step::Done(r) => r,
                Step::Pend(w) => Ok(self.enqueue(key, hash, op, w)),
                _ => unreachable!(),
            }
        };
        self.leave(entered);
        out
    }

    /// Executes and, if the operation goes pending, waits for it. Only valid
    /// when nothing else is pending on this session.
    pub fn execute_blocking(&mut self, key: u64, op: Op) -> Result<Status, StoreError> {
        if !self.pending.is_empty() {
            return Err(StoreError::Usage("session has pending operations"));
        }
        match self.execute(key, op)? {
            Status::Pending(id) => self
                .complete_pending(true)
                .into_iter()
                .find(|c| c.id == id)
                .map(|c| c.result)
                .unwrap_or(Err(StoreError::Log(LogError::Timeout("pending operation")))),
            s => Ok(s),
        }
    }

    fn enqueue(&mut self, key: u64, hash: u64, op: Op, wait: Wait) -> Status {
        let id = self.next_id;
        self.next_id += 1;
        self.pending.push_back(PendingOp {
            id,
            key,
            hash,
            op,
            wait,
        });
        *self.pending_keys.entry(key).or_default() += 1;
        let c = &self.store.counters;
        c.pending_started.fetch_add(1, Ordering::Relaxed);
        let n = self.pending.len() as u64;
        if c.pending_peak.fetch_max(n, Ordering::Relaxed) < n && n == self.store.cfg.pending_warn as u64
        {
            tracing::warn!(pending = n, "pending operations above high-water mark");
        }
        Status::Pending(id)
    }

    /// Runs until the operation completes or has to wait.
    fn run(&mut self, key: u64, hash: u64, op: &Op) -> Step {
        let store = &*self.store;
        let mut conflicts = 0;
        let start = Instant::now();
        loop {
            match store.attempt(&mut self.ctx, key, hash, op) {
                Step::Again => {
                    conflicts += 1;
                    store.counters.cas_retries.fetch_add(1, Ordering::Relaxed);
                    if conflicts >= store.cfg.max_retries {
                        return Step::Done(Err(StoreError::Conflict(conflicts)));
                    }
                }
                Step::Restart => {}
                Step::Backpressure => {
                    if let Err(e) = store.refresh_ctx(&mut self.ctx) {
                        return Step::Done(Err(e));
                    }
                    if start.elapsed() > Duration::from_secs(60) {
                        return Step::Done(Err(LogError::Timeout("free page frame").into()));
                    }
                    std::thread::yield_now();
                }
                s => return s,
            }
        }
    }

    fn advance(&mut self, p: &mut PendingOp) -> Option<Result<Status, StoreError>> {
        let step = match &mut p.wait {
            Wait::Queued | Wait::Retry => self.run(p.key, p.hash, &p.op),
            Wait::Disk {
                ticket,
                snapshot,
                indirection,
                stop,
            } => match ticket.try_take()? {
                Err(e) => Step::Done(Err(e.into())),
                Ok(rec) => {
                    let (snapshot, ind, stop) = (*snapshot, *indirection, *stop);
                    match self.store.on_disk_record(
                        &mut self.ctx,
                        p.key,
                        p.hash,
                        &p.op,
                        snapshot,
                        stop,
                        ind,
                        rec,
                    ) {
                        Step::Again | Step::Restart | Step::Backpressure => {
                            self.run(p.key, p.hash, &p.op)
                        }
                        s => s,
                    }
                }
            },
            Wait::Fetch(slot) => {
                slot.result.get()?;
                self.run(p.key, p.hash, &p.op)
            }
        };
        match step {
            Step::Done(r) => Some(r),
            Step::Pend(w) => {
                p.wait = w;
                None
            }
            _ => unreachable!(),
        }
    }

    /// Advances pending operations and returns those that finished, in issue
    /// order. With `wait`, blocks until nothing is pending (or a minute
    /// passes).
    pub fn complete_pending(&mut self, wait: bool) -> Vec<Completion> {
        let mut out = Vec::new();
        if self.pending.is_empty() {
            return out;
        }
        let Ok(entered) = self.enter() else {
            return out;
        };
        let deadline = Instant::now() + Duration::from_secs(60);
        loop {
            let _ = self.refresh();
            let mut blocked = HashSet::new();
            for _ in 0..self.pending.len() {
                let mut p = self.pending.pop_front().unwrap();
                if blocked.contains(&p.key) {
                    self.pending.push_back(p);
                    continue;
                }
                match self.advance(&mut p) {
                    Some(result) => {
                        if let Some(n) = self.pending_keys.get_mut(&p.key) {
                            *n -= 1;
                            if *n == 0 {
                                self.pending_keys.remove(&p.key);
                            }
                        }
                        out.push(Completion {
                            id: p.id,
                            key: p.key,
                            result,
                        });
                    }
                    None => {
                        blocked.insert(p.key);
                        self.pending.push_back(p);
                    }
                }
            }
            if !wait || self.pending.is_empty() || Instant::now() > deadline {
                break;
            }
            std::thread::sleep(Duration::from_micros(50));
        }
        self.leave(entered);
        out.sort_by_key(|c| c.id);
        out
    }
}

impl Drop for StoreSession {
    fn drop(&mut self) {
        self.store.epoch.release(self.ctx.thread);
    }
}

impl Store {
    pub(crate) fn refresh_ctx(&self, ctx: &mut Ctx) -> Result<(), StoreError> {
        self.epoch.refresh(ctx.thread)?;
        ctx.cached_ro = self.log.read_only();
        Ok(())
    }

    /// Appends `value` as the new head of the chain and installs it with a
    /// compare-exchange against `snapshot`.
    pub(super) fn install(
        &self,
        ctx: &Ctx,
        entry: &EntryHandle<'_>,
        snapshot: BucketEntry,
        key: u64,
        value: &[u8],
        info: RecordInfo,
    ) -> Install {
        let info = RecordInfo::from_raw(info.raw() | snapshot.address().raw());
        match self.log.append(ctx.thread, info, entry.tag(), key, value) {
            Ok(addr) => {
                if self
                    .index
                    .try_update_entry(entry, snapshot, snapshot.with_address(addr))
                {
                    self.counters.rcu.fetch_add(1, Ordering::Relaxed);
                    Install::Ok
                } else {
                    if let Some(r) = self.log.get(addr) {
                        seal(&r);
                    }
                    Install::Conflict
                }
            }
            Err(LogError::Backpressure) => Install::Backpressure,
            Err(e) => Install::Failed(e.into()),
        }
    }

    fn install_step(
        &self,
        ctx: &Ctx,
        entry: &EntryHandle<'_>,
        snapshot: BucketEntry,
        key: u64,
        hash: u64,
        value: Vec<u8>,
        written: bool,
    ) -> Step {
        match self.install(ctx, entry, snapshot, key, &value, RecordInfo::default()) {
            Install::Ok => {
                self.note_write(key, hash);
                Step::Done(Ok(if written {
                    Status::Written
                } else {
                    Status::Found(value)
                }))
            }
            Install::Conflict => Step::Again,
            Install::Backpressure => Step::Backpressure,
            Install::Failed(e) => Step::Done(Err(e)),
        }
    }

    pub(super) fn attempt(&self, ctx: &mut Ctx, key: u64, hash: u64, op: &Op) -> Step {
        let entry = match op {
            Op::Read | Op::RmwExisting(_) => match self.index.find_entry(hash) {
                Some(e) => e,
                None => return Step::Done(Ok(Status::NotFound)),
            },
            _ => match self.index.find_or_create_entry(hash) {
                Ok(e) => e,
                Err(e) => return Step::Done(Err(e.into())),
            },
        };
        let snapshot = entry.load();
        let stop = self.stop_below(hash);
        let walk = self.walk(key, hash, snapshot.address(), stop);
        match walk.end {
            End::Memory(addr) => self.on_memory(ctx, &entry, snapshot, key, hash, op, addr),
            End::Disk(addr) => match op {
                Op::Upsert(v) => self.install_step(ctx, &entry, snapshot, key, hash, v.clone(), true),
                _ => Step::Pend(Wait::Disk {
                    ticket: self.log.read_async(addr, ReadPurpose::Request),
                    snapshot,
                    indirection: walk.indirection,
                    stop,
                }),
            },
            End::Null => self.on_absent(ctx, &entry, snapshot, key, hash, op, walk.indirection),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_memory(
        &self,
        ctx: &mut Ctx,
        entry: &EntryHandle<'_>,
        snapshot: BucketEntry,
        key: u64,
        hash: u64,
        op: &Op,
        addr: Address,
    ) -> Step {
        let Some(rec) = self.log.get(addr) else {
            return Step::Restart;
        };
        let region = self.log.region(addr, ctx.cached_ro);
        match op {
            Op::Read => {
                let may_change = matches!(region, Region::Mutable | Region::Fuzzy);
                let value = if may_change && rec.value_len() > 8 {
                    rec.lock();
                    if rec.info().is_invalid() {
                        rec.unlock();
                        return Step::Restart;
                    }
                    let v = rec.read_value();
                    rec.unlock();
                    v
                } else {
                    rec.read_value()
                };
                if let Some(h) = self.sampling_for(hash) {
                    if region == Region::ReadOnly && addr < h.tail_at_start {
                        if let Install::Ok =
                            self.install(ctx, entry, snapshot, key, &value, RecordInfo::default())
                        {
                            self.counters.sample_copies.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    h.note(key);
                }
                Step::Done(Ok(Status::Found(value)))
            }
            Op::Upsert(v) => match region {
                Region::Mutable if v.len() == rec.value_len() => {
                    if rec.value_len() <= 8 {
                        rec.write_value(v);
                    } else {
                        rec.lock();
                        if rec.info().is_invalid() {
                            rec.unlock();
                            return Step::Restart;
                        }
                        rec.write_value(v);
                        rec.unlock();
                    }
                    self.counters.in_place.fetch_add(1, Ordering::Relaxed);
                    self.note_write(key, hash);
                    Step::Done(Ok(Status::Written))
                }
                Region::Mutable if rec.value_len() > 8 => {
                    self.replace_locked(ctx, entry, snapshot, key, hash, &rec, v.clone(), true)
                }
                Region::Fuzzy => {
                    self.counters.fuzzy_retries.fetch_add(1, Ordering::Relaxed);
                    Step::Pend(Wait::Retry)
                }
                _ => self.install_step(ctx, entry, snapshot, key, hash, v.clone(), true),
            },
            Op::Rmw(m) | Op::RmwExisting(m) => match region {
                Region::Mutable => self.rmw_in_place(ctx, entry, snapshot, key, hash, &rec, m),
                Region::Fuzzy => {
                    self.counters.fuzzy_retries.fetch_add(1, Ordering::Relaxed);
                    Step::Pend(Wait::Retry)
                }
                _ => {
                    let new = m.apply(Some(&rec.read_value()));
                    self.install_step(ctx, entry, snapshot, key, hash, new, false)
                }
            },
        }
    }

    /// Copy-to-tail of a mutable record wider than a word, under its lock.
    /// The old record is sealed so in-place writers waiting on the lock
    /// start over.
    #[allow(clippy::too_many_arguments)]
    fn replace_locked(
        &self,
        ctx: &Ctx,
        entry: &EntryHandle<'_>,
        snapshot: BucketEntry,
        key: u64,
        hash: u64,
        rec: &RecordRef<'_>,
        new: Vec<u8>,
        written: bool,
    ) -> Step {
        rec.lock();
        if rec.info().is_invalid() {
            rec.unlock();
            return Step::Restart;
        }
        let step = match self.install(ctx, entry, snapshot, key, &new, RecordInfo::default()) {
            Install::Ok => {
                seal(rec);
                self.note_write(key, hash);
                Step::Done(Ok(if written {
                    Status::Written
                } else {
                    Status::Found(new)
                }))
            }
            Install::Conflict => Step::Again,
            Install::Backpressure => Step::Backpressure,
            Install::Failed(e) => Step::Done(Err(e)),
        };
        rec.unlock();
        step
    }

    #[allow(clippy::too_many_arguments)]
    fn rmw_in_place(
        &self,
        ctx: &Ctx,
        entry: &EntryHandle<'_>,
        snapshot: BucketEntry,
        key: u64,
        hash: u64,
        rec: &RecordRef<'_>,
        m: &RmwOp,
    ) -> Step {
        let len = rec.value_len();
        if len > 8 {
            rec.lock();
            if rec.info().is_invalid() {
                rec.unlock();
                return Step::Restart;
            }
            let new = m.apply(Some(&rec.read_value()));
            if new.len() == len {
                rec.write_value(&new);
                rec.unlock();
                self.counters.in_place.fetch_add(1, Ordering::Relaxed);
                self.note_write(key, hash);
                return Step::Done(Ok(Status::Found(new)));
            }
            rec.unlock();
            return self.replace_locked(ctx, entry, snapshot, key, hash, rec, new, false);
        }
        let word = rec.value_word();
        if let (RmwOp::AddU64(d), 8) = (m, len) {
            let new = word.fetch_add(*d, Ordering::AcqRel).wrapping_add(*d);
            self.counters.in_place.fetch_add(1, Ordering::Relaxed);
            self.note_write(key, hash);
            return Step::Done(Ok(Status::Found(new.to_le_bytes().to_vec())));
        }
        loop {
            let cur = word.load(Ordering::Acquire);
            let new = m.apply(Some(&cur.to_le_bytes()[..len]));
            if new.len() != len {
                // One-word values change in place without a lock, so a
                // length change has to wait until the record is immutable.
                self.counters.fuzzy_retries.fetch_add(1, Ordering::Relaxed);
                self.log.seal_tail_page();
                self.log.shift_read_only(self.log.tail(), Some(ctx.thread));
                return Step::Pend(Wait::Retry);
            }
            let mut b = [0u8; 8];
            b[..len].copy_from_slice(&new);
            if word
                .compare_exchange(cur, u64::from_le_bytes(b), Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                self.counters.in_place.fetch_add(1, Ordering::Relaxed);
                self.note_write(key, hash);
                return Step::Done(Ok(Status::Found(new)));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_absent(
        &self,
        ctx: &Ctx,
        entry: &EntryHandle<'_>,
        snapshot: BucketEntry,
        key: u64,
        hash: u64,
        op: &Op,
        indirection: Option<super::Indirection>,
    ) -> Step {
        if let (Some(ind), false) = (indirection, matches!(op, Op::Upsert(_))) {
            let slot = self.fetch_slot(key, hash, &ind);
            match slot.result.get() {
                None => return Step::Pend(Wait::Fetch(slot)),
                Some(Err(e)) => {
                    self.forget_fetch(key, &ind);
                    return Step::Done(Err(StoreError::Indirection(e.clone())));
                }
                Some(Ok(Some(rec))) => {
                    return match self.install(ctx, entry, snapshot, key, &rec.value, RecordInfo::default())
                    {
                        Install::Ok => {
                            self.forget_fetch(key, &ind);
                            Step::Restart
                        }
                        Install::Conflict => Step::Again,
                        Install::Backpressure => Step::Backpressure,
                        Install::Failed(e) => Step::Done(Err(e)),
                    };
                }
                Some(Ok(None)) => {}
            }
        }
        match op {
            Op::Read | Op::RmwExisting(_) => Step::Done(Ok(Status::NotFound)),
            Op::Upsert(v) => self.install_step(ctx, entry, snapshot, key, hash, v.clone(), true),
            Op::Rmw(m) => self.install_step(ctx, entry, snapshot, key, hash, m.apply(None), false),
        }
    }

    /// Continues a lookup with a record read from storage.
    #[allow(clippy::too_many_arguments)]
    pub(super) fn on_disk_record(
        &self,
        ctx: &mut Ctx,
        key: u64,
        hash: u64,
        op: &Op,
        snapshot: BucketEntry,
        stop: u64,
        indirection: Option<super::Indirection>,
        rec: OwnedRecord,
    ) -> Step {
        let mut ind = indirection;
        if !rec.info.is_invalid() {
            if rec.info.is_indirection() {
                if ind.is_none() {
                    ind = self.covering(&rec.value, hash);
                }
            } else if rec.key == key {
                return self.on_disk_found(ctx, key, hash, op, snapshot, rec);
            }
        }
        let prev = rec.info.previous_address();
        if prev.is_null() || prev.raw() < stop {
            let entry = match self.index.find_or_create_entry(hash) {
                Ok(e) => e,
                Err(e) => return Step::Done(Err(e.into())),
            };
            return self.on_absent(ctx, &entry, snapshot, key, hash, op, ind);
        }
        Step::Pend(Wait::Disk {
            ticket: self.log.read_async(prev, ReadPurpose::Request),
            snapshot,
            indirection: ind,
            stop,
        })
    }

    fn on_disk_found(
        &self,
        ctx: &mut Ctx,
        key: u64,
        hash: u64,
        op: &Op,
        snapshot: BucketEntry,
        rec: OwnedRecord,
    ) -> Step {
        let entry = match self.index.find_or_create_entry(hash) {
            Ok(e) => e,
            Err(e) => return Step::Done(Err(e.into())),
        };
        match op {
            Op::Read => {
                if let Some(h) = self.sampling_for(hash) {
                    if rec.address < h.tail_at_start {
                        if let Install::Ok =
                            self.install(ctx, &entry, snapshot, key, &rec.value, RecordInfo::default())
                        {
                            self.counters.sample_copies.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    h.note(key);
                }
                Step::Done(Ok(Status::Found(rec.value)))
            }
            Op::Upsert(v) => self.install_step(ctx, &entry, snapshot, key, hash, v.clone(), true),
            Op::Rmw(m) | Op::RmwExisting(m) => {
                let new = m.apply(Some(&rec.value));
                self.install_step(ctx, &entry, snapshot, key, hash, new, false)
            }
        }
    }
}
