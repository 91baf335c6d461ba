//! Server: worker threads that own client connections end to end, plus a
//! coordinator thread for control traffic and one driver thread per
//! outgoing migration.
//!
//! Workers never hand requests to each other. Each accepted connection is
//! pinned to worker `id % threads`; the worker decodes batches, checks the
//! batch view against its own adopted view with a single comparison and runs
//! the requests on its store session. Only while this server is receiving a
//! migration are keys checked against ranges.
//!
//! Phase changes that must be observed by every worker (view adoption,
//! quiescing pending work on a range) go through a barrier the workers
//! acknowledge at their loop boundary.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use arc_swap::ArcSwapOption;
use crossbeam_channel::{Receiver, Sender};
use parking_lot::{Mutex, RwLock};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::address::Address;
use crate::codec::DecodeError;
use crate::log::ReadPurpose;
use crate::metadata::{Flag, MetaError, Metadata, MigrationId};
use crate::ownership::{validate_view, HashRange, RangeSet, ServerId, ServerView, ViewCell, ViewNumber};
use crate::store::{MigratedItem, Op, PendingId, RmwOp, Status, Store, StoreError, StoreSession, WalkMode};
use crate::transport::{Acceptor, Connection, LoopbackListener, TcpConnection};
use crate::wire::{
    frame_magic, op, BatchStatus, Control, Opcode, RequestBatch, ResponseBatch, ResultStatus, WireCompletion,
    WireResult, CONTROL_MAGIC, REQUEST_MAGIC,
};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("peer refused: {0}")]
    Remote(String),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("migration cancelled")]
    Cancelled,
    #[error("{0}")]
    Busy(String),
}

/// Microseconds since a shared origin. Servers and the benchmark harness of
/// one run share a clock so their timelines line up.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    origin: Instant,
}

impl Default for Clock {
    fn default() -> Self {
        Clock { origin: Instant::now() }
    }
}

impl Clock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now_us(&self) -> u64 {
        self.origin.elapsed().as_micros() as u64
    }
}

/// Opens connections to other servers by id.
pub trait Dialer: Send + Sync {
    fn dial(&self, server: ServerId) -> io::Result<Box<dyn Connection>>;
}

/// In-process dialer over loopback listeners.
#[derive(Debug, Default)]
pub struct LoopbackDialer {
    listeners: RwLock<HashMap<ServerId, LoopbackListener>>,
}

impl LoopbackDialer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, server: ServerId, listener: LoopbackListener) {
        self.listeners.write().insert(server, listener);
    }
}

impl Dialer for LoopbackDialer {
    fn dial(&self, server: ServerId) -> io::Result<Box<dyn Connection>> {
        let l = self.listeners.read();
        let l = l
            .get(&server)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("no server {server}")))?;
        Ok(Box::new(l.connect()))
    }
}

#[derive(Debug, Default, Clone)]
pub struct TcpDialer {
    pub addrs: HashMap<ServerId, SocketAddr>,
}

impl Dialer for TcpDialer {
    fn dial(&self, server: ServerId) -> io::Result<Box<dyn Connection>> {
        let addr = self
            .addrs
            .get(&server)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("no address for server {server}")))?;
        Ok(Box::new(TcpConnection::connect(addr)?))
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub id: ServerId,
    pub threads: usize,
    /// Distinct sampled keys kept at the source.
    pub sampling_capacity: usize,
    pub sampling_duration: Duration,
    /// Upper bound on one PUSH_RECORDS frame.
    pub push_frame_bytes: usize,
    /// Buckets walked per unit of migration work.
    pub migrate_chunk_buckets: u64,
    /// Unacknowledged pushes per worker.
    pub push_window: u32,
    /// Minimum spacing between units of migration work on one worker.
    pub migrate_throttle: Option<Duration>,
    /// Minimum spacing of view refreshes triggered by rejected batches.
    pub view_refresh_interval: Duration,
    pub rpc_timeout: Duration,
    /// Records per-key arrival and first-service times at a target.
    pub trace_migration: bool,
}

impl ServerConfig {
    pub fn new(id: ServerId, threads: usize) -> Self {
        ServerConfig {
            id,
            threads,
            sampling_capacity: 4096,
            sampling_duration: Duration::from_millis(10),
            push_frame_bytes: 64 << 10,
            migrate_chunk_buckets: 256,
            push_window: 4,
            migrate_throttle: None,
            view_refresh_interval: Duration::from_millis(1),
            rpc_timeout: Duration::from_secs(30),
            trace_migration: false,
        }
    }
}

/// Migration phase as seen from one server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Phase {
    Normal = 0,
    Sampling = 1,
    Prepare = 2,
    Transfer = 3,
    Migrate = 4,
    Complete = 5,
    Cancelling = 6,
    TargetPrepare = 7,
    TargetReceive = 8,
}

impl Phase {
    fn from_u8(v: u8) -> Phase {
        match v {
            1 => Phase::Sampling,
            2 => Phase::Prepare,
            3 => Phase::Transfer,
            4 => Phase::Migrate,
            5 => Phase::Complete,
            6 => Phase::Cancelling,
            7 => Phase::TargetPrepare,
            8 => Phase::TargetReceive,
            _ => Phase::Normal,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Normal => "normal",
            Phase::Sampling => "sampling",
            Phase::Prepare => "prepare",
            Phase::Transfer => "transfer",
            Phase::Migrate => "migrate",
            Phase::Complete => "complete",
            Phase::Cancelling => "cancelling",
            Phase::TargetPrepare => "target-prepare",
            Phase::TargetReceive => "target-receive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub at_us: u64,
    pub server: ServerId,
    pub what: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServerMetrics {
    pub batches: u64,
    pub rejected_batches: u64,
    pub ops: u64,
    /// View comparisons made while validating batches.
    pub view_checks: u64,
    /// Per-key range lookups; only made while receiving a migration.
    pub range_lookups: u64,
    pub held_peak: u64,
    /// Requests waiting on storage or on migrated data right now.
    pub pending_now: u64,
    /// Encoded bytes of ownership-transfer and record-push frames sent.
    pub migration_bytes: u64,
    pub migration_items: u64,
}

#[derive(Default)]
struct Counters {
    batches: AtomicU64,
    rejected: AtomicU64,
    ops: AtomicU64,
    view_checks: AtomicU64,
    range_lookups: AtomicU64,
    held_peak: AtomicU64,
    migration_bytes: AtomicU64,
    migration_items: AtomicU64,
}

/// Per-key timings of the last migration received, when tracing.
#[derive(Debug, Clone, Default)]
pub struct MigrationTrace {
    /// Keys handed over with ownership.
    pub sampled: Vec<u64>,
    /// First time a bulk push carrying the key arrived.
    pub pushed_at: HashMap<u64, u64>,
    /// First time a request on the key completed at this server.
    pub served_at: HashMap<u64, u64>,
    /// First time a request on a migrating key arrived here.
    pub arrived_at: HashMap<u64, u64>,
}

struct SourceMigration {
    id: MigrationId,
    target: ServerId,
    ranges: RangeSet,
    mode: WalkMode,
    phase: AtomicU8,
    cancel: AtomicBool,
    cancel_reply: Mutex<Option<(usize, u64)>>,
    done: Vec<AtomicBool>,
    sent: Mutex<HashSet<u64>>,
    failure: Mutex<Option<String>>,
}

impl SourceMigration {
    fn phase(&self) -> Phase {
        Phase::from_u8(self.phase.load(Ordering::Acquire))
    }
}

struct TargetMigration {
    id: MigrationId,
    ranges: RangeSet,
    phase: AtomicU8,
    /// Bumped whenever migrated data lands, so held requests retry.
    generation: AtomicU64,
}

impl TargetMigration {
    fn phase(&self) -> Phase {
        Phase::from_u8(self.phase.load(Ordering::Acquire))
    }
}

enum BarrierCond {
    Observe,
    /// Adopted at least `view` and nothing pending or held on `ranges`.
    Quiesce { view: ViewNumber, ranges: RangeSet },
}

struct Barrier {
    cond: BarrierCond,
    acks: Vec<AtomicBool>,
}

enum Cmd {
    Control { worker: usize, conn: u64, msg: Control },
    RefreshView,
}

struct Shared {
    cfg: ServerConfig,
    store: Arc<Store>,
    metadata: Arc<dyn Metadata>,
    dialer: Arc<dyn Dialer>,
    acceptor: Arc<dyn Acceptor>,
    view: ViewCell,
    clock: Clock,
    stop: AtomicBool,
    inboxes: Vec<Sender<Box<dyn Connection>>>,
    outboxes: Vec<Sender<(u64, Vec<u8>)>>,
    commands: Sender<Cmd>,
    source: ArcSwapOption<SourceMigration>,
    target: ArcSwapOption<TargetMigration>,
    barrier: ArcSwapOption<Barrier>,
    barrier_lock: Mutex<()>,
    refresh_requested: AtomicBool,
    last_refresh_us: AtomicU64,
    pending: Vec<AtomicU64>,
    counters: Counters,
    events: Mutex<Vec<Event>>,
    trace: Mutex<MigrationTrace>,
    push_seq: AtomicU32,
}

impl Shared {
    fn mark(&self, what: impl Into<String>) {
        let what = what.into();
        info!(server = self.cfg.id, "{what}");
        self.events.lock().push(Event {
            at_us: self.clock.now_us(),
            server: self.cfg.id,
            what,
        });
    }

    fn reply(&self, worker: usize, conn: u64, msg: &Control) {
        let _ = self.outboxes[worker].send((conn, msg.encode()));
    }

    /// Publishes a barrier and waits until every worker has acknowledged it.
    fn cut(&self, cond: BarrierCond, abort: &dyn Fn() -> bool) -> Result<(), ServerError> {
        let _g = self.barrier_lock.lock();
        let b = Arc::new(Barrier {
            cond,
            acks: (0..self.cfg.threads).map(|_| AtomicBool::new(false)).collect(),
        });
        self.barrier.store(Some(b.clone()));
        let deadline = Instant::now() + self.cfg.rpc_timeout;
        let out = loop {
            if b.acks.iter().all(|a| a.load(Ordering::Acquire)) {
                break Ok(());
            }
            if self.stop.load(Ordering::Relaxed) || abort() {
                break Err(ServerError::Cancelled);
            }
            if Instant::now() > deadline {
                break Err(ServerError::Timeout("worker barrier"));
            }
            self.store.epoch().try_drain();
            std::thread::sleep(Duration::from_micros(100));
        };
        self.barrier.store(None);
        out
    }

    /// Installs this server's view from the metadata map; returns the view
    /// now current.
    fn install_from_metadata(&self) -> Result<ViewNumber, ServerError> {
        let map = self.metadata.get_ownership()?;
        if let Some(sv) = map.server_view(self.cfg.id) {
            self.view.install(sv, || {});
        }
        self.last_refresh_us.store(self.clock.now_us(), Ordering::Relaxed);
        Ok(self.view.view_number())
    }

    fn migration_phase(&self) -> Phase {
        if let Some(s) = self.source.load().as_ref() {
            return s.phase();
        }
        if let Some(t) = self.target.load().as_ref() {
            return t.phase();
        }
        Phase::Normal
    }
}

/// Sends `msg` and waits for its acknowledgement.
fn rpc(conn: &mut dyn Connection, msg: &Control, timeout: Duration) -> Result<(String, Vec<MigratedItem>), ServerError> {
    conn.send(&msg.encode())?;
    let deadline = Instant::now() + timeout;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        let Some(frame) = conn.recv_timeout(left)? else {
            return Err(ServerError::Timeout("acknowledgement"));
        };
        if let Control::Ack {
            to,
            ok,
            message,
            items,
            ..
        } = Control::decode(&frame)?
        {
            if to == msg.opcode() {
                return if ok {
                    Ok((message, items))
                } else {
                    Err(ServerError::Remote(message))
                };
            }
        }
    }
}

/// Splits items into frames of at most `limit` encoded bytes.
fn chunk_items(items: Vec<MigratedItem>, limit: usize) -> Vec<Vec<MigratedItem>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut bytes = 0;
    for i in items {
        let n = i.encoded_len();
        if !cur.is_empty() && bytes + n > limit {
            out.push(std::mem::take(&mut cur));
            bytes = 0;
        }
        bytes += n;
        cur.push(i);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub struct Server {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for Server {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Server({})", self.shared.cfg.id)
    }
}

impl Server {
    /// Starts the workers and the coordinator. The store's log id must equal
    /// the server id; targets locate a source's log by it.
    pub fn start(
        cfg: ServerConfig,
        store: Arc<Store>,
        metadata: Arc<dyn Metadata>,
        acceptor: Arc<dyn Acceptor>,
        dialer: Arc<dyn Dialer>,
        clock: Clock,
    ) -> Result<Server, ServerError> {
        if cfg.threads == 0 {
            return Err(ServerError::Busy("threads must be positive".into()));
        }
        if store.log_id() != cfg.id as u64 {
            return Err(ServerError::Busy(format!(
                "log id {} differs from server id {}",
                store.log_id(),
                cfg.id
            )));
        }
        let map = metadata.get_ownership()?;
        let initial = map.server_view(cfg.id).unwrap_or(ServerView {
            server: cfg.id,
            view: 0,
            ranges: RangeSet::new(),
        });
        let mut inboxes = Vec::new();
        let mut inbox_rx = Vec::new();
        let mut outboxes = Vec::new();
        let mut outbox_rx = Vec::new();
        for _ in 0..cfg.threads {
            let (tx, rx) = crossbeam_channel::unbounded();
            inboxes.push(tx);
            inbox_rx.push(rx);
            let (tx, rx) = crossbeam_channel::unbounded();
            outboxes.push(tx);
            outbox_rx.push(rx);
        }
        let (cmd_tx, cmd_rx) = crossbeam_channel::unbounded();
        let threads = cfg.threads;
        let shared = Arc::new(Shared {
            view: ViewCell::new(initial, store.epoch().clone()),
            cfg,
            store,
            metadata,
            dialer,
            acceptor,
            clock,
            stop: AtomicBool::new(false),
            inboxes,
            outboxes,
            commands: cmd_tx,
            source: ArcSwapOption::empty(),
            target: ArcSwapOption::empty(),
            barrier: ArcSwapOption::empty(),
            barrier_lock: Mutex::new(()),
            refresh_requested: AtomicBool::new(false),
            last_refresh_us: AtomicU64::new(0),
            pending: (0..threads).map(|_| AtomicU64::new(0)).collect(),
            counters: Counters::default(),
            events: Mutex::new(Vec::new()),
            trace: Mutex::new(MigrationTrace::default()),
            push_seq: AtomicU32::new(0),
        });
        let mut handles = Vec::new();
        for (t, (inbox, outbox)) in inbox_rx.into_iter().zip(outbox_rx).enumerate() {
            let session = shared.store.session()?;
            let sh = shared.clone();
            handles.push(
                std::thread::Builder::new()
                    .name(format!("server{}-w{t}", sh.cfg.id))
                    .spawn(move || Worker::new(t, sh, session, inbox, outbox).run())?,
            );
        }
        let session = shared.store.session()?;
        let sh = shared.clone();
        handles.push(
            std::thread::Builder::new()
                .name(format!("server{}-coord", sh.cfg.id))
                .spawn(move || Coordinator::new(sh, session).run(cmd_rx))?,
        );
        Ok(Server {
            shared,
            threads: handles,
        })
    }

    pub fn id(&self) -> ServerId {
        self.shared.cfg.id
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.shared.store
    }

    pub fn view(&self) -> Arc<ServerView> {
        self.shared.view.load()
    }

    pub fn phase(&self) -> Phase {
        self.shared.migration_phase()
    }

    pub fn metrics(&self) -> ServerMetrics {
        let c = &self.shared.counters;
        ServerMetrics {
            batches: c.batches.load(Ordering::Relaxed),
            rejected_batches: c.rejected.load(Ordering::Relaxed),
            ops: c.ops.load(Ordering::Relaxed),
            view_checks: c.view_checks.load(Ordering::Relaxed),
            range_lookups: c.range_lookups.load(Ordering::Relaxed),
            held_peak: c.held_peak.load(Ordering::Relaxed),
            pending_now: self.shared.pending.iter().map(|p| p.load(Ordering::Relaxed)).sum(),
            migration_bytes: c.migration_bytes.load(Ordering::Relaxed),
            migration_items: c.migration_items.load(Ordering::Relaxed),
        }
    }

    pub fn events(&self) -> Vec<Event> {
        self.shared.events.lock().clone()
    }

    pub fn trace(&self) -> MigrationTrace {
        self.shared.trace.lock().clone()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    /// Stops the threads without waiting for them; connections drop as the
    /// workers exit.
    pub fn halt(&self) {
        self.shared.stop.store(true, Ordering::Release);
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::Release);
        for h in self.threads.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop();
    }
}

// ---------------------------------------------------------------------------
// workers

#[derive(Clone, Copy, Debug)]
struct Origin {
    conn: u64,
    seq: u32,
    idx: u32,
}

struct Held {
    origin: Origin,
    key: u64,
    opcode: Opcode,
    value: Vec<u8>,
}

struct PendingReq {
    origin: Origin,
    opcode: Opcode,
    value: Vec<u8>,
    receiving: bool,
}

enum Outcome {
    Done(WireResult),
    Pending,
    Hold,
}

struct ConnState {
    conn: Box<dyn Connection>,
    /// A batch was rejected; everything is rejected until RESYNC.
    rejecting: bool,
    completions: Vec<WireCompletion>,
    dead: bool,
}

struct Cursor {
    id: MigrationId,
    next: u64,
    end: u64,
    conn: Box<dyn Connection>,
    outstanding: u32,
    last_unit: Option<Instant>,
}

struct Worker {
    t: usize,
    sh: Arc<Shared>,
    session: StoreSession,
    view: Arc<ServerView>,
    inbox: Receiver<Box<dyn Connection>>,
    outbox: Receiver<(u64, Vec<u8>)>,
    conns: BTreeMap<u64, ConnState>,
    pending: HashMap<PendingId, PendingReq>,
    held: VecDeque<Held>,
    held_keys: HashMap<u64, u32>,
    held_generation: u64,
    held_phase: Phase,
    cursor: Option<Cursor>,
    ops: u64,
}

fn make_op(opcode: Opcode, value: &[u8], receiving: bool) -> Op {
    match opcode {
        Opcode::Read => Op::Read,
        Opcode::Upsert => Op::Upsert(value.to_vec()),
        Opcode::RmwAdd => {
            let d = RmwOp::AddU64(u64::from_le_bytes(value[..8].try_into().unwrap()));
            if receiving {
                Op::RmwExisting(d)
            } else {
                Op::Rmw(d)
            }
        }
    }
}

fn ok(value: Vec<u8>) -> WireResult {
    WireResult {
        status: ResultStatus::Ok,
        value,
    }
}

fn status_only(status: ResultStatus) -> WireResult {
    WireResult { status, value: Vec::new() }
}

impl Worker {
    fn new(
        t: usize,
        sh: Arc<Shared>,
        session: StoreSession,
        inbox: Receiver<Box<dyn Connection>>,
        outbox: Receiver<(u64, Vec<u8>)>,
    ) -> Self {
        Worker {
            t,
            view: sh.view.load(),
            sh,
            session,
            inbox,
            outbox,
            conns: BTreeMap::new(),
            pending: HashMap::new(),
            held: VecDeque::new(),
            held_keys: HashMap::new(),
            held_generation: 0,
            held_phase: Phase::Normal,
            cursor: None,
            ops: 0,
        }
    }

    fn run(mut self) {
        let mut idle = 0u32;
        while !self.sh.stop.load(Ordering::Acquire) {
            if let Err(e) = self.session.refresh() {
                warn!("worker {} cannot refresh: {e}", self.t);
                std::thread::sleep(Duration::from_millis(1));
                continue;
            }
            self.sh.view.adopt(&mut self.view);
            let mut work = self.accept();
            work |= self.poll_connections();
            work |= self.complete_pending();
            work |= self.run_held();
            work |= self.migration_unit();
            self.acknowledge_barrier();
            self.flush_completions();
            self.conns.retain(|_, c| !c.dead);
            self.sh.pending[self.t].store((self.pending.len() + self.held.len()) as u64, Ordering::Relaxed);
            if self.ops > 0 {
                self.sh.counters.ops.fetch_add(self.ops, Ordering::Relaxed);
                self.ops = 0;
            }
            if work {
                idle = 0;
            } else {
                idle = (idle + 1).min(50);
                if idle > 3 {
                    std::thread::sleep(Duration::from_micros(10 * idle as u64));
                } else {
                    std::thread::yield_now();
                }
            }
        }
        self.session.unprotect();
    }

    fn accept(&mut self) -> bool {
        let mut work = false;
        while let Ok(Some(c)) = self.sh.acceptor.try_accept() {
            let w = (c.id() % self.sh.cfg.threads as u64) as usize;
            let _ = self.sh.inboxes[w].send(c);
        }
        while let Ok(c) = self.inbox.try_recv() {
            debug!("worker {} adopts connection {}", self.t, c.id());
            self.conns.insert(
                c.id(),
                ConnState {
                    conn: c,
                    rejecting: false,
                    completions: Vec::new(),
                    dead: false,
                },
            );
            work = true;
        }
        while let Ok((id, bytes)) = self.outbox.try_recv() {
            if let Some(c) = self.conns.get_mut(&id) {
                if c.conn.send(&bytes).is_err() {
                    c.dead = true;
                }
            }
            work = true;
        }
        work
    }

    fn poll_connections(&mut self) -> bool {
        let ids: Vec<u64> = self.conns.keys().copied().collect();
        let mut work = false;
        for id in ids {
            for _ in 0..16 {
                let frame = match self.conns.get_mut(&id).map(|c| c.conn.try_recv()) {
                    Some(Ok(Some(f))) => f,
                    Some(Ok(None)) | None => break,
                    Some(Err(_)) => {
                        self.conns.get_mut(&id).unwrap().dead = true;
                        break;
                    }
                };
                work = true;
                match frame_magic(&frame) {
                    Some(REQUEST_MAGIC) => self.process_batch(id, &frame),
                    Some(CONTROL_MAGIC) => self.process_control(id, &frame),
                    m => {
                        warn!("connection {id}: unknown frame magic {m:?}");
                        self.conns.get_mut(&id).unwrap().dead = true;
                        break;
                    }
                }
            }
        }
        work
    }

    fn send(&mut self, conn: u64, bytes: &[u8]) {
        if let Some(c) = self.conns.get_mut(&conn) {
            if c.conn.send(bytes).is_err() {
                c.dead = true;
            }
        }
    }

    fn process_batch(&mut self, conn: u64, frame: &[u8]) {
        let batch = match RequestBatch::decode(frame) {
            Ok(b) => b,
            Err(e) => {
                warn!("connection {conn}: bad batch: {e}");
                self.conns.get_mut(&conn).unwrap().dead = true;
                return;
            }
        };
        let sh = self.sh.clone();
        let counters = &sh.counters;
        counters.batches.fetch_add(1, Ordering::Relaxed);
        counters.view_checks.fetch_add(1, Ordering::Relaxed);
        let server_view = self.view.view;
        let state = self.conns.get_mut(&conn).unwrap();
        if state.rejecting || !validate_view(batch.view, server_view) {
            state.rejecting = true;
            let completions = std::mem::take(&mut state.completions);
            counters.rejected.fetch_add(1, Ordering::Relaxed);
            if batch.view > server_view {
                self.request_refresh();
            }
            let resp = ResponseBatch {
                batch_seq: batch.batch_seq,
                status: BatchStatus::ViewRejected,
                server_view,
                results: Vec::new(),
                completions,
            };
            let mut out = Vec::new();
            resp.encode(&mut out);
            self.send(conn, &out);
            return;
        }
        let target = self.sh.target.load_full();
        let mut results = Vec::with_capacity(batch.requests.len());
        let mut lookups = 0u64;
        for (idx, req) in batch.requests.into_iter().enumerate() {
            let origin = Origin {
                conn,
                seq: batch.batch_seq,
                idx: idx as u32,
            };
            let mut receiving = false;
            if let Some(tm) = &target {
                lookups += 1;
                if tm.ranges.contains_key(req.key) {
                    self.note_arrived(req.key);
                    match tm.phase() {
                        Phase::TargetPrepare => {
                            self.hold_back(origin, req.key, req.opcode, req.value);
                            results.push(status_only(ResultStatus::Pending));
                            continue;
                        }
                        Phase::Cancelling => {
                            results.push(status_only(ResultStatus::Retry));
                            continue;
                        }
                        Phase::TargetReceive => {
                            if self.held_keys.contains_key(&req.key) || self.session.has_pending_key(req.key) {
                                self.hold_back(origin, req.key, req.opcode, req.value);
                                results.push(status_only(ResultStatus::Pending));
                                continue;
                            }
                            receiving = true;
                        }
                        _ => {}
                    }
                }
            }
            let r = match self.execute(origin, req.key, req.opcode, &req.value, receiving) {
                Outcome::Done(r) => {
                    if receiving {
                        self.note_served(req.key);
                    }
                    r
                }
                Outcome::Pending => status_only(ResultStatus::Pending),
                Outcome::Hold => {
                    self.hold_back(origin, req.key, req.opcode, req.value);
                    status_only(ResultStatus::Pending)
                }
            };
            results.push(r);
        }
        if lookups > 0 {
            counters.range_lookups.fetch_add(lookups, Ordering::Relaxed);
        }
        let state = self.conns.get_mut(&conn).unwrap();
        let resp = ResponseBatch {
            batch_seq: batch.batch_seq,
            status: BatchStatus::Ok,
            server_view,
            results,
            completions: std::mem::take(&mut state.completions),
        };
        let mut out = Vec::new();
        resp.encode(&mut out);
        self.send(conn, &out);
    }

    fn execute(&mut self, origin: Origin, key: u64, opcode: Opcode, value: &[u8], receiving: bool) -> Outcome {
        self.ops += 1;
        match self.session.execute(key, make_op(opcode, value, receiving)) {
            Ok(Status::Pending(id)) => {
                self.pending.insert(
                    id,
                    PendingReq {
                        origin,
                        opcode,
                        value: value.to_vec(),
                        receiving,
                    },
                );
                Outcome::Pending
            }
            r => self.finish(r, opcode, receiving),
        }
    }

    fn finish(&self, r: Result<Status, StoreError>, opcode: Opcode, receiving: bool) -> Outcome {
        match r {
            Ok(Status::Found(v)) => Outcome::Done(ok(v)),
            Ok(Status::Written) => Outcome::Done(ok(Vec::new())),
            Ok(Status::NotFound) if receiving && opcode != Opcode::Upsert => Outcome::Hold,
            Ok(Status::NotFound) => Outcome::Done(status_only(ResultStatus::NotFound)),
            Ok(Status::Pending(_)) => unreachable!("pending handled by caller"),
            Err(e) => Outcome::Done(WireResult {
                status: ResultStatus::Error,
                value: e.to_string().into_bytes(),
            }),
        }
    }

    fn note_arrived(&self, key: u64) {
        if self.sh.cfg.trace_migration {
            let now = self.sh.clock.now_us();
            self.sh.trace.lock().arrived_at.entry(key).or_insert(now);
        }
    }

    fn note_served(&self, key: u64) {
        if self.sh.cfg.trace_migration {
            let now = self.sh.clock.now_us();
            self.sh.trace.lock().served_at.entry(key).or_insert(now);
        }
    }

    fn hold_back(&mut self, origin: Origin, key: u64, opcode: Opcode, value: Vec<u8>) {
        self.held.push_back(Held {
            origin,
            key,
            opcode,
            value,
        });
        *self.held_keys.entry(key).or_default() += 1;
        self.sh
            .counters
            .held_peak
            .fetch_max(self.held.len() as u64, Ordering::Relaxed);
    }

    /// Re-holds a request that was issued before any held request on its key.
    fn hold_front(&mut self, h: Held) {
        let pos = self.held.iter().position(|x| x.key == h.key).unwrap_or(self.held.len());
        *self.held_keys.entry(h.key).or_default() += 1;
        self.held.insert(pos, h);
    }

    fn complete(&mut self, origin: Origin, result: WireResult) {
        if let Some(c) = self.conns.get_mut(&origin.conn) {
            c.completions.push(WireCompletion {
                orig_seq: origin.seq,
                orig_idx: origin.idx,
                result,
            });
        }
    }

    fn complete_pending(&mut self) -> bool {
        if self.session.pending_count() == 0 {
            return false;
        }
        let done = self.session.complete_pending(false);
        let work = !done.is_empty();
        for c in done {
            let Some(p) = self.pending.remove(&c.id) else { continue };
            match self.finish(c.result, p.opcode, p.receiving) {
                Outcome::Done(r) => {
                    if p.receiving {
                        self.note_served(c.key);
                    }
                    self.complete(p.origin, r)
                }
                Outcome::Hold => self.hold_front(Held {
                    origin: p.origin,
                    key: c.key,
                    opcode: p.opcode,
                    value: p.value,
                }),
                Outcome::Pending => unreachable!(),
            }
        }
        work
    }

    fn run_held(&mut self) -> bool {
        if self.held.is_empty() {
            return false;
        }
        let target = self.sh.target.load_full();
        let (phase, generation) = match &target {
            Some(t) => (t.phase(), t.generation.load(Ordering::Acquire)),
            None => (Phase::Normal, 0),
        };
        match phase {
            Phase::TargetPrepare => return false,
            Phase::Cancelling => {
                for h in std::mem::take(&mut self.held) {
                    self.complete(h.origin, status_only(ResultStatus::Retry));
                }
                self.held_keys.clear();
                return true;
            }
            Phase::TargetReceive if generation == self.held_generation && self.held_phase == phase => {
                return false;
            }
            _ => {}
        }
        self.held_generation = generation;
        self.held_phase = phase;
        let mut blocked = HashSet::new();
        let before = self.held.len();
        let mut keep = VecDeque::new();
        for h in std::mem::take(&mut self.held) {
            if blocked.contains(&h.key) || self.session.has_pending_key(h.key) {
                blocked.insert(h.key);
                keep.push_back(h);
                continue;
            }
            let receiving = phase == Phase::TargetReceive
                && target.as_ref().is_some_and(|t| t.ranges.contains_key(h.key));
            match self.execute(h.origin, h.key, h.opcode, &h.value, receiving) {
                Outcome::Done(r) => {
                    if receiving {
                        self.note_served(h.key);
                    }
                    self.complete(h.origin, r);
                }
                Outcome::Pending => {
                    blocked.insert(h.key);
                }
                Outcome::Hold => {
                    blocked.insert(h.key);
                    keep.push_back(h);
                }
            }
        }
        self.held = keep;
        self.held_keys.clear();
        for h in &self.held {
            *self.held_keys.entry(h.key).or_default() += 1;
        }
        self.held.len() != before
    }

    fn request_refresh(&self) {
        let now = self.sh.clock.now_us();
        let last = self.sh.last_refresh_us.load(Ordering::Relaxed);
        if now.saturating_sub(last) < self.sh.cfg.view_refresh_interval.as_micros() as u64 {
            return;
        }
        if !self.sh.refresh_requested.swap(true, Ordering::AcqRel) {
            let _ = self.sh.commands.send(Cmd::RefreshView);
        }
    }

    fn process_control(&mut self, conn: u64, frame: &[u8]) {
        let msg = match Control::decode(frame) {
            Ok(m) => m,
            Err(e) => {
                warn!("connection {conn}: bad control frame: {e}");
                self.conns.get_mut(&conn).unwrap().dead = true;
                return;
            }
        };
        match msg {
            Control::Resync { .. } => {
                self.conns.get_mut(&conn).unwrap().rejecting = false;
            }
            Control::PushRecords { id, seq, items } => {
                let r = self.receive_push(id, &items);
                let ack = Control::ack(op::PUSH_RECORDS, id, seq, r.map(|n| n.to_string()));
                self.send(conn, &ack.encode());
            }
            Control::ForwardRecords {
                source_log_id,
                seq,
                items,
            } => {
                let r = self
                    .sh
                    .store
                    .insert_forwarded(&mut self.session, source_log_id, &items)
                    .map(|(i, d)| format!("{i} inserted, {d} discarded"))
                    .map_err(|e| e.to_string());
                let ack = Control::ack(op::FORWARD_RECORDS, source_log_id, seq, r);
                self.send(conn, &ack.encode());
            }
            Control::ForwardDone { source_log_id, until } => {
                self.sh.store.set_watermark(source_log_id, until);
                let ack = Control::ack(op::FORWARD_DONE, source_log_id, 0, Ok(String::new()));
                self.send(conn, &ack.encode());
            }
            Control::Ack { .. } => {}
            msg => {
                let _ = self.sh.commands.send(Cmd::Control {
                    worker: self.t,
                    conn,
                    msg,
                });
            }
        }
    }

    fn receive_push(&mut self, id: MigrationId, items: &[MigratedItem]) -> Result<u64, String> {
        let Some(tm) = self.sh.target.load_full().filter(|t| t.id == id) else {
            return Err(format!("not receiving migration {id}"));
        };
        let (inserted, _) = self
            .sh
            .store
            .insert_migrated(&mut self.session, items)
            .map_err(|e| e.to_string())?;
        tm.generation.fetch_add(1, Ordering::AcqRel);
        if self.sh.cfg.trace_migration {
            let now = self.sh.clock.now_us();
            let mut tr = self.sh.trace.lock();
            for i in items {
                if let MigratedItem::Record { key, .. } = i {
                    tr.pushed_at.entry(*key).or_insert(now);
                }
            }
        }
        Ok(inserted)
    }

    /// One unit of the bulk transfer of this worker's share of the index.
    fn migration_unit(&mut self) -> bool {
        let src = self.sh.source.load_full();
        let Some(src) = src.filter(|s| s.phase() == Phase::Migrate) else {
            self.cursor = None;
            return false;
        };
        if src.done[self.t].load(Ordering::Acquire) {
            return false;
        }
        if self.cursor.as_ref().is_some_and(|c| c.id != src.id) {
            self.cursor = None;
        }
        if self.cursor.is_none() {
            let n = self.sh.store.index().bucket_count();
            let threads = self.sh.cfg.threads as u64;
            let t = self.t as u64;
            let conn = match self.sh.dialer.dial(src.target) {
                Ok(c) => c,
                Err(e) => {
                    *src.failure.lock() = Some(format!("dial target: {e}"));
                    return false;
                }
            };
            self.cursor = Some(Cursor {
                id: src.id,
                next: n * t / threads,
                end: n * (t + 1) / threads,
                conn,
                outstanding: 0,
                last_unit: None,
            });
        }
        let cur = self.cursor.as_mut().unwrap();
        let mut work = false;
        loop {
            match cur.conn.try_recv() {
                Ok(Some(f)) => {
                    work = true;
                    if let Ok(Control::Ack { ok, message, .. }) = Control::decode(&f) {
                        cur.outstanding = cur.outstanding.saturating_sub(1);
                        if !ok {
                            *src.failure.lock() = Some(message);
                        }
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    *src.failure.lock() = Some(format!("push connection: {e}"));
                    self.cursor = None;
                    return true;
                }
            }
        }
        if cur.next >= cur.end {
            if cur.outstanding == 0 {
                src.done[self.t].store(true, Ordering::Release);
                self.cursor = None;
            }
            return work;
        }
        if cur.outstanding >= self.sh.cfg.push_window {
            return work;
        }
        if let (Some(gap), Some(last)) = (self.sh.cfg.migrate_throttle, cur.last_unit) {
            if last.elapsed() < gap {
                return work;
            }
        }
        cur.last_unit = Some(Instant::now());
        let to = (cur.next + self.sh.cfg.migrate_chunk_buckets).min(cur.end);
        let mut items = Vec::new();
        let r = self
            .sh
            .store
            .walk_region(&mut self.session, &src.ranges, cur.next..to, src.mode, &mut |i| items.push(i));
        if let Err(e) = r {
            *src.failure.lock() = Some(format!("walk: {e}"));
            return true;
        }
        let cur = self.cursor.as_mut().unwrap();
        cur.next = to;
        if src.mode == WalkMode::ScanLog {
            let mut sent = src.sent.lock();
            for i in &items {
                if let MigratedItem::Record { key, .. } = i {
                    sent.insert(*key);
                }
            }
        }
        for chunk in chunk_items(items, self.sh.cfg.push_frame_bytes) {
            let n = chunk.len() as u64;
            let msg = Control::PushRecords {
                id: src.id,
                seq: self.sh.push_seq.fetch_add(1, Ordering::Relaxed),
                items: chunk,
            }
            .encode();
            self.sh.counters.migration_bytes.fetch_add(msg.len() as u64, Ordering::Relaxed);
            self.sh.counters.migration_items.fetch_add(n, Ordering::Relaxed);
            if let Err(e) = cur.conn.send(&msg) {
                *src.failure.lock() = Some(format!("push: {e}"));
                return true;
            }
            cur.outstanding += 1;
        }
        true
    }

    fn acknowledge_barrier(&mut self) {
        let Some(b) = self.sh.barrier.load_full() else { return };
        if b.acks[self.t].load(Ordering::Relaxed) {
            return;
        }
        let ready = match &b.cond {
            BarrierCond::Observe => true,
            BarrierCond::Quiesce { view, ranges } => {
                self.view.view >= *view
                    && !self.session.pending_keys().any(|k| ranges.contains_key(k))
                    && !self.held.iter().any(|h| ranges.contains_key(h.key))
            }
        };
        if ready {
            b.acks[self.t].store(true, Ordering::Release);
        }
    }

    fn flush_completions(&mut self) {
        let view = self.view.view;
        for c in self.conns.values_mut() {
            if c.completions.is_empty() || c.dead {
                continue;
            }
            let resp = ResponseBatch {
                batch_seq: 0,
                status: BatchStatus::CompletionsOnly,
                server_view: view,
                results: Vec::new(),
                completions: std::mem::take(&mut c.completions),
            };
            let mut out = Vec::new();
            resp.encode(&mut out);
            if c.conn.send(&out).is_err() {
                c.dead = true;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// coordinator

struct Coordinator {
    sh: Arc<Shared>,
    session: StoreSession,
    peers: HashMap<ServerId, Box<dyn Connection>>,
}

impl Coordinator {
    fn new(sh: Arc<Shared>, session: StoreSession) -> Self {
        Coordinator {
            sh,
            session,
            peers: HashMap::new(),
        }
    }

    fn run(mut self, rx: Receiver<Cmd>) {
        while !self.sh.stop.load(Ordering::Acquire) {
            match rx.recv_timeout(Duration::from_millis(10)) {
                Ok(Cmd::RefreshView) => {
                    self.sh.refresh_requested.store(false, Ordering::Release);
                    if let Err(e) = self.refresh_view() {
                        warn!("view refresh failed: {e}");
                    }
                }
                Ok(Cmd::Control { worker, conn, msg }) => {
                    let to = msg.opcode();
                    if let Some(reply) = self.handle(worker, conn, msg) {
                        let ack = match reply {
                            Ok((id, message, items)) => Control::Ack {
                                to,
                                id,
                                seq: 0,
                                ok: true,
                                message,
                                items,
                            },
                            Err(e) => Control::ack(to, 0, 0, Err(e.to_string())),
                        };
                        self.sh.reply(worker, conn, &ack);
                    }
                }
                Err(_) => {}
            }
        }
        // Stop an outgoing migration with the server.
        if let Some(s) = self.sh.source.load_full() {
            s.cancel.store(true, Ordering::Release);
        }
    }

    fn refresh_view(&mut self) -> Result<(), ServerError> {
        if self.sh.source.load().is_some() {
            // The migration driver installs this server's views itself.
            return Ok(());
        }
        let map = self.sh.metadata.get_ownership()?;
        self.sh.last_refresh_us.store(self.sh.clock.now_us(), Ordering::Relaxed);
        let Some(sv) = map.server_view(self.sh.cfg.id) else {
            return Ok(());
        };
        if sv.view <= self.sh.view.view_number() {
            return Ok(());
        }
        let cur = self.sh.view.load();
        let mut gained = sv.ranges.clone();
        for r in cur.ranges.ranges() {
            gained.remove(*r);
        }
        if !gained.is_empty() && self.sh.target.load().is_none() {
            // Ranges arriving through a migration this server has not heard
            // about yet: hold their requests until the data shows up.
            for d in self.sh.metadata.dependencies()? {
                if d.target == self.sh.cfg.id
                    && !d.cancelled
                    && !d.reverted
                    && !d.committed()
                    && d.ranges.iter().any(|r| gained.overlaps(r))
                {
                    self.begin_target(d.id, d.source as u64, RangeSet::from_ranges(d.ranges.iter().copied()))?;
                    break;
                }
            }
        }
        self.sh.view.install(sv, || {});
        Ok(())
    }

    fn begin_target(&self, id: MigrationId, source_log_id: u64, ranges: RangeSet) -> Result<(), ServerError> {
        if let Some(t) = self.sh.target.load().as_ref() {
            return if t.id == id {
                Ok(())
            } else {
                Err(ServerError::Busy(format!("already receiving migration {}", t.id)))
            };
        }
        if let Some(s) = self.sh.source.load().as_ref() {
            return Err(ServerError::Busy(format!("migration {} in progress", s.id)));
        }
        self.sh.store.begin_receiving(ranges.clone(), source_log_id);
        if self.sh.cfg.trace_migration {
            *self.sh.trace.lock() = MigrationTrace::default();
        }
        self.sh.target.store(Some(Arc::new(TargetMigration {
            id,
            ranges,
            phase: AtomicU8::new(Phase::TargetPrepare as u8),
            generation: AtomicU64::new(0),
        })));
        self.sh.mark(format!("target-prepare {id}"));
        Ok(())
    }

    fn active_target(&self, id: MigrationId) -> Result<Arc<TargetMigration>, ServerError> {
        self.sh
            .target
            .load_full()
            .filter(|t| t.id == id)
            .ok_or_else(|| ServerError::Busy(format!("not receiving migration {id}")))
    }

    #[allow(clippy::type_complexity)]
    fn handle(
        &mut self,
        worker: usize,
        conn: u64,
        msg: Control,
    ) -> Option<Result<(u64, String, Vec<MigratedItem>), ServerError>> {
        let sh = self.sh.clone();
        let r = match msg {
            Control::Migrate { target, ranges, mode } => self.start_migration(target, ranges, mode),
            Control::PrepForTransfer {
                id,
                source_log_id,
                ranges,
                ..
            } => self
                .begin_target(id, source_log_id, RangeSet::from_ranges(ranges))
                .and_then(|_| sh.install_from_metadata())
                .map(|v| (id, format!("view {v}"), Vec::new())),
            Control::TransferOwnership { id, items } => self.receive_ownership(id, &items),
            Control::CompleteMigration { id } => self.complete_target(id),
            Control::Cancel { id } => {
                if let Some(s) = sh.source.load_full().filter(|s| s.id == id) {
                    *s.cancel_reply.lock() = Some((worker, conn));
                    s.cancel.store(true, Ordering::Release);
                    return None;
                }
                self.cancel_target(id)
            }
            Control::Compact { until } => self.compact(until),
            Control::Status => Ok((0, self.status(), Vec::new())),
            other => Err(ServerError::Busy(format!("unexpected control opcode {}", other.opcode()))),
        };
        Some(r)
    }

    fn status(&self) -> String {
        let v = self.sh.view.load();
        let m = {
            let c = &self.sh.counters;
            (c.batches.load(Ordering::Relaxed), c.ops.load(Ordering::Relaxed))
        };
        let pending: u64 = self.sh.pending.iter().map(|p| p.load(Ordering::Relaxed)).sum();
        let ranges: Vec<String> = v.ranges.ranges().iter().map(|r| r.to_string()).collect();
        let o = self.sh.store.log().offsets();
        format!(
            "server {} view {} phase {} ranges [{}] batches {} ops {} pending {} log begin {} head {} tail {}",
            self.sh.cfg.id,
            v.view,
            self.sh.migration_phase().name(),
            ranges.join(","),
            m.0,
            m.1,
            pending,
            o.begin,
            o.head,
            o.tail
        )
    }

    fn start_migration(
        &mut self,
        target: ServerId,
        ranges: Vec<HashRange>,
        mode: WalkMode,
    ) -> Result<(u64, String, Vec<MigratedItem>), ServerError> {
        let sh = &self.sh;
        if let Some(s) = sh.source.load().as_ref() {
            return Err(ServerError::Busy(format!("migration {} in progress", s.id)));
        }
        if let Some(t) = sh.target.load().as_ref() {
            return Err(ServerError::Busy(format!("receiving migration {}", t.id)));
        }
        if target == sh.cfg.id || ranges.is_empty() {
            return Err(ServerError::Busy("bad migration request".into()));
        }
        let owned = &sh.view.load().ranges;
        if !ranges.iter().all(|r| owned.covers(r)) {
            return Err(ServerError::Busy("ranges are not owned by this server".into()));
        }
        let id = sh.metadata.transfer_ranges(sh.cfg.id, target, &ranges)?;
        let mig = Arc::new(SourceMigration {
            id,
            target,
            ranges: RangeSet::from_ranges(ranges),
            mode,
            phase: AtomicU8::new(Phase::Normal as u8),
            cancel: AtomicBool::new(false),
            cancel_reply: Mutex::new(None),
            done: (0..sh.cfg.threads).map(|_| AtomicBool::new(false)).collect(),
            sent: Mutex::new(HashSet::new()),
            failure: Mutex::new(None),
        });
        sh.source.store(Some(mig.clone()));
        sh.mark(format!("migrate {id} to {target}"));
        let driver_sh = sh.clone();
        std::thread::Builder::new()
            .name(format!("server{}-migrate{id}", sh.cfg.id))
            .spawn(move || drive_source(driver_sh, mig))?;
        Ok((id, format!("migration {id}"), Vec::new()))
    }

    fn receive_ownership(
        &mut self,
        id: MigrationId,
        items: &[MigratedItem],
    ) -> Result<(u64, String, Vec<MigratedItem>), ServerError> {
        let tm = self.active_target(id)?;
        let (inserted, skipped) = self.sh.store.insert_migrated(&mut self.session, items)?;
        self.session.unprotect();
        if self.sh.cfg.trace_migration {
            self.sh.trace.lock().sampled = items
                .iter()
                .filter_map(|i| match i {
                    MigratedItem::Record { key, .. } => Some(*key),
                    _ => None,
                })
                .collect();
        }
        tm.phase.store(Phase::TargetReceive as u8, Ordering::Release);
        tm.generation.fetch_add(1, Ordering::AcqRel);
        self.sh.mark(format!("target-receive {id}"));
        Ok((id, format!("{inserted} inserted, {skipped} skipped"), Vec::new()))
    }

    fn complete_target(&mut self, id: MigrationId) -> Result<(u64, String, Vec<MigratedItem>), ServerError> {
        let tm = self.active_target(id)?;
        tm.phase.store(Phase::Complete as u8, Ordering::Release);
        self.sh.store.end_receiving();
        self.sh.target.store(None);
        self.sh.metadata.set_flag(id, Flag::TargetDone)?;
        self.sh.mark(format!("target-complete {id}"));
        Ok((id, String::new(), Vec::new()))
    }

    /// Gives the ranges back: requests on them are answered with retry,
    /// writes made here are returned to the source and what is left of the
    /// migrated data is hidden behind a dead zone.
    fn cancel_target(&mut self, id: MigrationId) -> Result<(u64, String, Vec<MigratedItem>), ServerError> {
        let Some(tm) = self.sh.target.load_full().filter(|t| t.id == id) else {
            match self.sh.metadata.dependency(id)? {
                None => return Err(MetaError::UnknownMigration(id).into()),
                Some(d) if d.committed() => return Err(MetaError::AlreadyCommitted(id).into()),
                Some(_) => {}
            }
            // Nothing received; only the view moves back.
            self.sh.install_from_metadata()?;
            return Ok((id, "nothing to return".into(), Vec::new()));
        };
        tm.phase.store(Phase::Cancelling as u8, Ordering::Release);
        let view = self.sh.install_from_metadata()?;
        self.sh.cut(
            BarrierCond::Quiesce {
                view,
                ranges: tm.ranges.clone(),
            },
            &|| false,
        )?;
        let items = match self.sh.store.receive_hook() {
            Some(h) => self.sh.store.snapshot_keys(&mut self.session, &h.written_keys())?,
            None => Vec::new(),
        };
        self.session.unprotect();
        self.sh.store.end_receiving();
        let tail = self.sh.store.log().tail();
        for r in tm.ranges.ranges() {
            self.sh.store.add_dead_zone(*r, tail);
        }
        self.sh.target.store(None);
        self.sh.mark(format!("target-cancelled {id}"));
        Ok((id, format!("{} keys returned", items.len()), items))
    }

    fn peer(&mut self, server: ServerId) -> Result<&mut Box<dyn Connection>, ServerError> {
        if !self.peers.contains_key(&server) {
            let c = self.sh.dialer.dial(server)?;
            self.peers.insert(server, c);
        }
        Ok(self.peers.get_mut(&server).unwrap())
    }

    fn compact(&mut self, until: Address) -> Result<(u64, String, Vec<MigratedItem>), ServerError> {
        let sh = self.sh.clone();
        let until = if until == Address::NULL { sh.store.log().head() } else { until };
        let owned = sh.view.load().ranges.clone();
        let map = sh.metadata.get_ownership()?;
        let me = sh.cfg.id;
        let timeout = sh.cfg.rpc_timeout;
        let log_id = sh.store.log_id();
        let mut seq = 0u32;
        let mut failure: Option<ServerError> = None;
        let mut session = sh.store.session()?;
        let report = {
            let mut forward = |items: Vec<MigratedItem>| -> Result<(), StoreError> {
                let mut by_owner: BTreeMap<ServerId, Vec<MigratedItem>> = BTreeMap::new();
                for i in items {
                    if let MigratedItem::Record { key, .. } = &i {
                        let (owner, _) = map.owner_of_key(*key);
                        if owner != me {
                            by_owner.entry(owner).or_default().push(i);
                        }
                    }
                }
                for (owner, items) in by_owner {
                    for chunk in chunk_items(items, sh.cfg.push_frame_bytes) {
                        seq += 1;
                        let msg = Control::ForwardRecords {
                            source_log_id: log_id,
                            seq,
                            items: chunk,
                        };
                        let r = self.peer(owner).and_then(|c| rpc(c.as_mut(), &msg, timeout));
                        if let Err(e) = r {
                            self.peers.remove(&owner);
                            let s = e.to_string();
                            failure = Some(e);
                            return Err(StoreError::Indirection(s));
                        }
                    }
                }
                Ok(())
            };
            sh.store.compact(&mut session, until, &owned, &mut forward)
        };
        if let Some(e) = failure {
            return Err(e);
        }
        let report = report?;
        for &server in map.views().keys() {
            if server == me {
                continue;
            }
            let msg = Control::ForwardDone {
                source_log_id: log_id,
                until: report.truncated_to,
            };
            let r = self.peer(server).and_then(|c| rpc(c.as_mut(), &msg, timeout));
            if let Err(e) = r {
                self.peers.remove(&server);
                warn!("forward-done to {server}: {e}");
            }
        }
        Ok((
            0,
            format!(
                "scanned {} copied {} forwarded {} dropped {} truncated to {}",
                report.scanned, report.live_copied, report.forwarded, report.dropped, report.truncated_to
            ),
            Vec::new(),
        ))
    }
}

// ---------------------------------------------------------------------------
// source-side migration driver

struct Driver {
    sh: Arc<Shared>,
    mig: Arc<SourceMigration>,
    session: StoreSession,
    conn: Option<Box<dyn Connection>>,
}

fn drive_source(sh: Arc<Shared>, mig: Arc<SourceMigration>) {
    let session = match sh.store.session() {
        Ok(s) => s,
        Err(e) => {
            warn!("migration {}: no session: {e}", mig.id);
            sh.source.store(None);
            return;
        }
    };
    let mut d = Driver {
        sh: sh.clone(),
        mig: mig.clone(),
        session,
        conn: None,
    };
    let outcome = d.run();
    let reply = mig.cancel_reply.lock().take();
    let result = match outcome {
        Ok(()) => Ok(format!("migration {} complete", mig.id)),
        Err(e) => {
            if !matches!(e, ServerError::Cancelled) {
                warn!("migration {} failed: {e}; rolling back", mig.id);
            }
            d.cancel().map(|n| format!("migration {} cancelled, {n} keys returned", mig.id))
        }
    };
    if let Err(e) = &result {
        warn!("migration {}: {e}", mig.id);
    }
    sh.store.end_sampling();
    sh.source.store(None);
    if let Some((worker, conn)) = reply {
        let ack = Control::ack(op::CANCEL, mig.id, 0, result.map_err(|e| e.to_string()));
        sh.reply(worker, conn, &ack);
    }
}

impl Driver {
    fn check(&self) -> Result<(), ServerError> {
        if self.mig.cancel.load(Ordering::Acquire) || self.sh.stop.load(Ordering::Acquire) {
            return Err(ServerError::Cancelled);
        }
        if let Some(f) = self.mig.failure.lock().clone() {
            return Err(ServerError::Remote(f));
        }
        Ok(())
    }

    fn set_phase(&self, p: Phase) {
        self.mig.phase.store(p as u8, Ordering::Release);
        self.sh.mark(format!("{} {}", p.name(), self.mig.id));
    }

    fn call(&mut self, msg: &Control) -> Result<(String, Vec<MigratedItem>), ServerError> {
        if self.conn.is_none() {
            self.conn = Some(self.sh.dialer.dial(self.mig.target)?);
        }
        let r = rpc(self.conn.as_mut().unwrap().as_mut(), msg, self.sh.cfg.rpc_timeout);
        if matches!(r, Err(ServerError::Io(_)) | Err(ServerError::Timeout(_))) {
            self.conn = None;
        }
        r
    }

    fn run(&mut self) -> Result<(), ServerError> {
        let (sh, mig) = (self.sh.clone(), self.mig.clone());
        let abort = || mig.cancel.load(Ordering::Acquire);

        sh.store.begin_sampling(mig.ranges.clone(), sh.cfg.sampling_capacity);
        self.set_phase(Phase::Sampling);
        sh.cut(BarrierCond::Observe, &abort)?;
        let until = Instant::now() + sh.cfg.sampling_duration;
        while Instant::now() < until {
            self.check()?;
            std::thread::sleep(Duration::from_micros(200));
        }

        self.set_phase(Phase::Prepare);
        sh.cut(BarrierCond::Observe, &abort)?;
        self.call(&Control::PrepForTransfer {
            id: mig.id,
            source: sh.cfg.id,
            source_log_id: sh.store.log_id(),
            ranges: mig.ranges.ranges().to_vec(),
        })?;
        self.check()?;

        self.set_phase(Phase::Transfer);
        let view = sh.install_from_metadata()?;
        sh.cut(
            BarrierCond::Quiesce {
                view,
                ranges: mig.ranges.clone(),
            },
            &abort,
        )?;
        let keys = sh.store.end_sampling().map(|h| h.sampled_keys()).unwrap_or_default();
        let items = sh.store.snapshot_keys(&mut self.session, &keys)?;
        self.session.unprotect();
        let msg = Control::TransferOwnership { id: mig.id, items };
        let n = match &msg {
            Control::TransferOwnership { items, .. } => items.len() as u64,
            _ => 0,
        };
        sh.counters
            .migration_bytes
            .fetch_add(msg.encode().len() as u64, Ordering::Relaxed);
        sh.counters.migration_items.fetch_add(n, Ordering::Relaxed);
        self.call(&msg)?;
        self.check()?;

        self.set_phase(Phase::Migrate);
        loop {
            self.check()?;
            if mig.done.iter().all(|d| d.load(Ordering::Acquire)) {
                break;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
        if mig.mode == WalkMode::ScanLog {
            let mut items = Vec::new();
            let sent = mig.sent.lock().clone();
            sh.store
                .scan_storage_for_migration(&mig.ranges, &sent, &mut |i| items.push(i))?;
            for chunk in chunk_items(items, sh.cfg.push_frame_bytes) {
                self.check()?;
                let n = chunk.len() as u64;
                let msg = Control::PushRecords {
                    id: mig.id,
                    seq: sh.push_seq.fetch_add(1, Ordering::Relaxed),
                    items: chunk,
                };
                sh.counters
                    .migration_bytes
                    .fetch_add(msg.encode().len() as u64, Ordering::Relaxed);
                sh.counters.migration_items.fetch_add(n, Ordering::Relaxed);
                self.call(&msg)?;
            }
        }

        self.set_phase(Phase::Complete);
        self.call(&Control::CompleteMigration { id: mig.id })?;
        sh.metadata.set_flag(mig.id, Flag::SourceDone)?;
        sh.mark(format!("source-complete {}", mig.id));
        Ok(())
    }

    /// Rolls ownership back to this server. Fails once both sides have
    /// finished.
    fn cancel(&mut self) -> Result<usize, ServerError> {
        let (sh, mig) = (self.sh.clone(), self.mig.clone());
        let prior = mig.phase();
        self.set_phase(Phase::Cancelling);
        match sh.metadata.set_flag(mig.id, Flag::Cancelled) {
            Ok(()) => {}
            Err(e @ MetaError::AlreadyCommitted(_)) => {
                mig.phase.store(prior as u8, Ordering::Release);
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        }
        sh.metadata.revert_ranges(mig.id)?;
        let (_, items) = self.call(&Control::Cancel { id: mig.id })?;
        for i in &items {
            if let MigratedItem::Record { key, value, .. } = i {
                self.session.execute_blocking(*key, Op::Upsert(value.clone()))?;
            }
        }
        self.session.unprotect();
        sh.install_from_metadata()?;
        sh.mark(format!("source-cancelled {}", mig.id));
        Ok(items.len())
    }
}

/// Reads counted against a store's local storage and the shared tier while
/// serving requests and migrating.
pub fn storage_reads(store: &Store) -> (u64, u64) {
    let s = store.log().stats();
    let local = s.local(ReadPurpose::Request) + s.local(ReadPurpose::Migration) + s.local(ReadPurpose::Background);
    let shared = s.shared(ReadPurpose::Request) + s.shared(ReadPurpose::Migration) + s.shared(ReadPurpose::Background);
    (local, shared)
}
