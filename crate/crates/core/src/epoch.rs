//! Epoch protection with deferred trigger actions.
//!
//! Threads register explicitly and receive a slot in a fixed-size table. A
//! protected thread publishes the epoch it last observed; the safe epoch is one
//! less than the minimum observed epoch over all protected slots (or
//! `current - 1` when nobody is protected). An action registered with
//! [`EpochManager::bump_with_action`] is tagged with the epoch that was current
//! before the bump and runs exactly once, after that epoch becomes safe.
//!
//! Actions run on whichever thread happens to drain: `protect`, `refresh` and
//! the full-list path of `bump_with_action` all attempt a drain. Only one
//! thread drains at a time, so actions execute in registration-epoch order.
//!
//! Actions may themselves register actions. Nested drains are allowed up to
//! [`MAX_DRAIN_DEPTH`] levels; below that depth a nested drain is skipped and
//! the outer drain loop picks up the new entries. A registration made from
//! inside an action never spins on a full list: it is admitted over capacity.

use std::cell::Cell;
use std::collections::BinaryHeap;
use std::cmp::{Ordering as CmpOrdering, Reverse};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};

use parking_lot::{Mutex, ReentrantMutex};
use thiserror::Error;

/// Slot value for a thread that is registered but not protected.
const UNPROTECTED: u64 = 0;

/// Maximum nesting of drains started from inside running actions.
pub const MAX_DRAIN_DEPTH: usize = 4;

pub const DEFAULT_TABLE_SIZE: usize = 128;
pub const DEFAULT_DRAIN_CAPACITY: usize = 256;

thread_local! {
    static DRAIN_DEPTH: Cell<usize> = const { Cell::new(0) };
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EpochError {
    #[error("epoch thread table is full ({0} slots)")]
    TableFull(usize),
    #[error("thread slot {0} is not registered")]
    Unregistered(usize),
}

/// Index of a registered slot in the thread table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EpochThread(usize);

impl EpochThread {
    pub fn index(self) -> usize {
        self.0
    }
}

type Action = Box<dyn FnOnce() + Send + 'static>;

struct PendingAction {
    epoch: u64,
    seq: u64,
    action: Action,
}

impl PartialEq for PendingAction {
    fn eq(&self, other: &Self) -> bool {
        (self.epoch, self.seq) == (other.epoch, other.seq)
    }
}
impl Eq for PendingAction {}
impl PartialOrd for PendingAction {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}
impl Ord for PendingAction {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        (self.epoch, self.seq).cmp(&(other.epoch, other.seq))
    }
}

#[derive(Default)]
struct DrainList {
    heap: BinaryHeap<Reverse<PendingAction>>,
    next_seq: u64,
}

#[repr(align(64))]
struct Slot {
    epoch: AtomicU64,
    registered: AtomicBool,
}

pub struct EpochManager {
    current: AtomicU64,
    slots: Box<[Slot]>,
    list: Mutex<DrainList>,
    pending: AtomicUsize,
    capacity: usize,
    drain_lock: ReentrantMutex<()>,
}

impl std::fmt::Debug for EpochManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EpochManager")
            .field("current", &self.current_epoch())
            .field("pending", &self.pending_actions())
            .finish()
    }
}

impl Default for EpochManager {
    fn default() -> Self {
        Self::new(DEFAULT_TABLE_SIZE, DEFAULT_DRAIN_CAPACITY)
    }
}

impl EpochManager {
    pub fn new(table_size: usize, drain_capacity: usize) -> Self {
        assert!(table_size > 0 && drain_capacity > 0);
        let slots = (0..table_size)
            .map(|_| Slot {
                epoch: AtomicU64::new(UNPROTECTED),
                registered: AtomicBool::new(false),
            })
            .collect();
        Self {
            current: AtomicU64::new(1),
            slots,
            list: Mutex::new(DrainList::default()),
            pending: AtomicUsize::new(0),
            capacity: drain_capacity,
            drain_lock: ReentrantMutex::new(()),
        }
    }

    pub fn register(&self) -> Result<EpochThread, EpochError> {
        for (i, slot) in self.slots.iter().enumerate() {
            if slot
                .registered
                .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
            {
                slot.epoch.store(UNPROTECTED, Ordering::SeqCst);
                return Ok(EpochThread(i));
            }
        }
        Err(EpochError::TableFull(self.slots.len()))
    }

    /// Unprotects and frees the slot.
    pub fn release(&self, thread: EpochThread) {
        if let Some(slot) = self.slots.get(thread.0) {
            slot.epoch.store(UNPROTECTED, Ordering::SeqCst);
            slot.registered.store(false, Ordering::SeqCst);
        }
        self.try_drain();
    }

    fn slot(&self, thread: EpochThread) -> Result<&Slot, EpochError> {
        match self.slots.get(thread.0) {
            Some(s) if s.registered.load(Ordering::Relaxed) => Ok(s),
            _ => Err(EpochError::Unregistered(thread.0)),
        }
    }

    pub fn current_epoch(&self) -> u64 {
        self.current.load(Ordering::SeqCst)
    }

    /// Publishes the current epoch in the caller's slot, then drains.
    pub fn protect(&self, thread: EpochThread) -> Result<u64, EpochError> {
        let slot = self.slot(thread)?;
        let observed = loop {
            let e = self.current.load(Ordering::SeqCst);
            slot.epoch.store(e, Ordering::SeqCst);
            // A bump between the load and the store could let a drainer miss us.
            if self.current.load(Ordering::SeqCst) == e {
                break e;
            }
        };
        self.try_drain();
        Ok(observed)
    }

    /// Same as `protect`; kept separate because callers use it at loop
    /// boundaries where the thread is already protected.
    pub fn refresh(&self, thread: EpochThread) -> Result<u64, EpochError> {
        self.protect(thread)
    }

    pub fn unprotect(&self, thread: EpochThread) -> Result<(), EpochError> {
        let slot = self.slot(thread)?;
        slot.epoch.store(UNPROTECTED, Ordering::SeqCst);
        Ok(())
    }

    pub fn is_protected(&self, thread: EpochThread) -> bool {
        self.slot(thread)
            .map(|s| s.epoch.load(Ordering::SeqCst) != UNPROTECTED)
            .unwrap_or(false)
    }

    /// Largest epoch `e` such that every protected thread has observed an epoch
    /// greater than `e`.
    pub fn safe_epoch(&self) -> u64 {
        let current = self.current.load(Ordering::SeqCst);
        let mut oldest = current;
        for slot in self.slots.iter() {
            let e = slot.epoch.load(Ordering::SeqCst);
            if e != UNPROTECTED && e < oldest {
                oldest = e;
            }
        }
        oldest - 1
    }

    pub fn pending_actions(&self) -> usize {
        self.pending.load(Ordering::SeqCst)
    }

    /// Increments the epoch and schedules `action` for when the prior epoch
    /// becomes safe. Returns the prior epoch. On a full drain list the caller
    /// spins draining; use [`Self::bump_with_action_from`] from a protected
    /// thread so that its own slot does not block the spin.
    pub fn bump_with_action<F>(&self, action: F) -> u64
    where
        F: FnOnce() + Send + 'static,
    {
        self.bump_inner(None, Box::new(action))
    }

    pub fn bump_with_action_from<F>(&self, thread: EpochThread, action: F) -> u64
    where
        F: FnOnce() + Send + 'static,
    {
        self.bump_inner(Some(thread), Box::new(action))
    }

    /// Increments the epoch without scheduling anything.
    pub fn bump(&self) -> u64 {
        self.current.fetch_add(1, Ordering::SeqCst)
    }

    fn bump_inner(&self, caller: Option<EpochThread>, action: Action) -> u64 {
        let nested = DRAIN_DEPTH.with(|d| d.get()) > 0;
        let mut action = Some(action);
        loop {
            {
                let mut list = self.list.lock();
                if list.heap.len() < self.capacity || nested {
                    // Taking the epoch under the list lock keeps heap order
                    // consistent with epoch order across racing bumpers.
                    let prior = self.current.fetch_add(1, Ordering::SeqCst);
                    let seq = list.next_seq;
                    list.next_seq += 1;
                    list.heap.push(Reverse(PendingAction {
                        epoch: prior,
                        seq,
                        action: action.take().expect("action consumed once"),
                    }));
                    self.pending.fetch_add(1, Ordering::SeqCst);
                    return prior;
                }
            }
            if let Some(t) = caller {
                let _ = self.protect(t);
            } else {
                self.try_drain();
            }
            std::thread::yield_now();
        }
    }

    /// Runs every action whose epoch is safe. Returns how many ran.
    pub fn try_drain(&self) -> usize {
        if self.pending.load(Ordering::SeqCst) == 0 {
            return 0;
        }
        let depth = DRAIN_DEPTH.with(|d| d.get());
        if depth >= MAX_DRAIN_DEPTH {
            return 0;
        }
        let Some(_guard) = self.drain_lock.try_lock() else {
            return 0;
        };
        DRAIN_DEPTH.with(|d| d.set(depth + 1));
        let mut ran = 0;
        loop {
            let safe = self.safe_epoch();
            let next = {
                let mut list = self.list.lock();
                match list.heap.peek() {
                    Some(Reverse(top)) if top.epoch <= safe => list.heap.pop(),
                    _ => None,
                }
            };
            let Some(Reverse(entry)) = next else { break };
            self.pending.fetch_sub(1, Ordering::SeqCst);
            (entry.action)();
            ran += 1;
        }
        DRAIN_DEPTH.with(|d| d.set(depth));
        ran
    }
}
