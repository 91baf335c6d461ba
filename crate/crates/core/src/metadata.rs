//! Coordination service holding the ownership map, per-server views and
//! migration dependencies.
//!
//! Every mutation is validated against a copy of the state, appended to the
//! write-ahead log and only then made visible. WAL records are
//! `{len: u32, crc32: u32, payload}` with the payload's first byte an opcode:
//!
//! | op | payload after the opcode |
//! |----|--------------------------|
//! | 1 init | encoded ownership map |
//! | 2 add server | `id: u32` |
//! | 3 transfer | `migration: u64, source: u32, target: u32, n: u32, n × {lo: u64, hi: u64}` |
//! | 4 set flag | `migration: u64, flag: u8` (1 source done, 2 target done, 3 cancelled) |
//! | 5 revert | `migration: u64` |
//! | 6 delete | `migration: u64` |
//!
//! A torn or corrupt tail is cut off on open.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;

use crate::codec::{DecodeError, Put, Reader};
use crate::ownership::{HashRange, OwnershipMap, RangeSet, ServerId, ViewNumber};
use crate::transport::{read_frame, write_frame};

pub type MigrationId = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetaError {
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("unknown migration {0}")]
    UnknownMigration(MigrationId),
    #[error("migration {0} already committed")]
    AlreadyCommitted(MigrationId),
    #[error("migration {0} was cancelled")]
    Cancelled(MigrationId),
    #[error("migration {0} is not cancelled")]
    NotCancelled(MigrationId),
    #[error("storage: {0}")]
    Storage(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
}

impl From<io::Error> for MetaError {
    fn from(e: io::Error) -> Self {
        MetaError::Storage(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flag {
    SourceDone = 1,
    TargetDone = 2,
    Cancelled = 3,
}

impl Flag {
    fn from_u8(v: u8) -> Result<Flag, DecodeError> {
        match v {
            1 => Ok(Flag::SourceDone),
            2 => Ok(Flag::TargetDone),
            3 => Ok(Flag::Cancelled),
            _ => Err(DecodeError::Invalid {
                field: "flag",
                value: v as u64,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationDependency {
    pub id: MigrationId,
    pub source: ServerId,
    pub target: ServerId,
    pub ranges: Vec<HashRange>,
    pub source_done: bool,
    pub target_done: bool,
    pub cancelled: bool,
    /// Ownership went back to the source.
    pub reverted: bool,
    pub source_view_before: ViewNumber,
    pub target_view_before: ViewNumber,
}

impl MigrationDependency {
    pub fn committed(&self) -> bool {
        self.source_done && self.target_done
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.put_u64(self.id);
        out.put_u32(self.source);
        out.put_u32(self.target);
        encode_ranges(&self.ranges, out);
        let flags = self.source_done as u8
            | (self.target_done as u8) << 1
            | (self.cancelled as u8) << 2
            | (self.reverted as u8) << 3;
        out.put_u8(flags);
        out.put_u64(self.source_view_before);
        out.put_u64(self.target_view_before);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let id = r.u64()?;
        let source = r.u32()?;
        let target = r.u32()?;
        let ranges = decode_ranges(r)?;
        let f = r.u8()?;
        Ok(MigrationDependency {
            id,
            source,
            target,
            ranges,
            source_done: f & 1 != 0,
            target_done: f & 2 != 0,
            cancelled: f & 4 != 0,
            reverted: f & 8 != 0,
            source_view_before: r.u64()?,
            target_view_before: r.u64()?,
        })
    }
}

fn encode_ranges(ranges: &[HashRange], out: &mut Vec<u8>) {
    out.put_u32(ranges.len() as u32);
    for r in ranges {
        out.put_u64(r.lo);
        out.put_u64(r.hi);
    }
}

fn decode_ranges(r: &mut Reader<'_>) -> Result<Vec<HashRange>, DecodeError> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let (lo, hi) = (r.u64()?, r.u64()?);
        let range = HashRange { lo, hi };
        if range.is_empty() {
            return Err(DecodeError::Invalid {
                field: "range",
                value: lo,
            });
        }
        out.push(range);
    }
    Ok(out)
}

/// Client-side view of the coordination service.
pub trait Metadata: Send + Sync {
    fn get_ownership(&self) -> Result<OwnershipMap, MetaError>;
    /// The current map if its version is newer than `since`.
    fn poll_changes(&self, since: u64) -> Result<Option<OwnershipMap>, MetaError>;
    fn add_server(&self, server: ServerId) -> Result<(), MetaError>;
    fn transfer_ranges(
        &self,
        source: ServerId,
        target: ServerId,
        ranges: &[HashRange],
    ) -> Result<MigrationId, MetaError>;
    fn set_flag(&self, id: MigrationId, flag: Flag) -> Result<(), MetaError>;
    fn revert_ranges(&self, id: MigrationId) -> Result<(), MetaError>;
    /// Dependencies that have not been swept yet.
    fn dependencies(&self) -> Result<Vec<MigrationDependency>, MetaError>;

    fn dependency(&self, id: MigrationId) -> Result<Option<MigrationDependency>, MetaError> {
        Ok(self.dependencies()?.into_iter().find(|d| d.id == id))
    }
}

#[derive(Debug, Clone)]
enum WalOp {
    Init(OwnershipMap),
    AddServer(ServerId),
    Transfer {
        id: MigrationId,
        source: ServerId,
        target: ServerId,
        ranges: Vec<HashRange>,
    },
    SetFlag(MigrationId, Flag),
    Revert(MigrationId),
    Delete(MigrationId),
}

impl WalOp {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            WalOp::Init(m) => {
                out.put_u8(1);
                m.encode(&mut out);
            }
            WalOp::AddServer(s) => {
                out.put_u8(2);
                out.put_u32(*s);
            }
            WalOp::Transfer {
                id,
                source,
                target,
                ranges,
            } => {
                out.put_u8(3);
                out.put_u64(*id);
                out.put_u32(*source);
                out.put_u32(*target);
                encode_ranges(ranges, &mut out);
            }
            WalOp::SetFlag(id, f) => {
                out.put_u8(4);
                out.put_u64(*id);
                out.put_u8(*f as u8);
            }
            WalOp::Revert(id) => {
                out.put_u8(5);
                out.put_u64(*id);
            }
            WalOp::Delete(id) => {
                out.put_u8(6);
                out.put_u64(*id);
            }
        }
        out
    }

    fn decode(buf: &[u8]) -> Result<WalOp, DecodeError> {
        let mut r = Reader::new(buf);
        let op = match r.u8()? {
            1 => WalOp::Init(OwnershipMap::decode(&mut r)?),
            2 => WalOp::AddServer(r.u32()?),
            3 => WalOp::Transfer {
                id: r.u64()?,
                source: r.u32()?,
                target: r.u32()?,
                ranges: decode_ranges(&mut r)?,
            },
            4 => WalOp::SetFlag(r.u64()?, Flag::from_u8(r.u8()?)?),
            5 => WalOp::Revert(r.u64()?),
            6 => WalOp::Delete(r.u64()?),
            op => return Err(DecodeError::BadOpcode(op)),
        };
        r.finish()?;
        Ok(op)
    }
}

#[derive(Debug, Clone)]
struct State {
    map: OwnershipMap,
    deps: BTreeMap<MigrationId, MigrationDependency>,
    next_id: MigrationId,
}

impl State {
    fn apply(&mut self, op: &WalOp) -> Result<MigrationId, MetaError> {
        match op {
            WalOp::Init(m) => {
                self.map = m.clone();
                Ok(0)
            }
            WalOp::AddServer(s) => {
                self.map.add_server(*s);
                Ok(0)
            }
            WalOp::Transfer {
                id,
                source,
                target,
                ranges,
            } => {
                for d in self.deps.values() {
                    let active = !d.committed() && !d.reverted;
                    if active && d.ranges.iter().any(|a| ranges.iter().any(|b| a.overlaps(b))) {
                        return Err(MetaError::Rejected(format!(
                            "range overlaps in-flight migration {}",
                            d.id
                        )));
                    }
                }
                let before_s = self.map.view_of(*source).unwrap_or(0);
                let before_t = self.map.view_of(*target).unwrap_or(0);
                self.map
                    .transfer(*source, *target, ranges)
                    .map_err(|e| MetaError::Rejected(e.to_string()))?;
                self.deps.insert(
                    *id,
                    MigrationDependency {
                        id: *id,
                        source: *source,
                        target: *target,
                        ranges: ranges.clone(),
                        source_done: false,
                        target_done: false,
                        cancelled: false,
                        reverted: false,
                        source_view_before: before_s,
                        target_view_before: before_t,
                    },
                );
                self.next_id = self.next_id.max(id + 1);
                Ok(*id)
            }
            WalOp::SetFlag(id, flag) => {
                let d = self
                    .deps
                    .get_mut(id)
                    .ok_or(MetaError::UnknownMigration(*id))?;
                match flag {
                    Flag::Cancelled if d.committed() => return Err(MetaError::AlreadyCommitted(*id)),
                    Flag::Cancelled => d.cancelled = true,
                    _ if d.cancelled => return Err(MetaError::Cancelled(*id)),
                    Flag::SourceDone => d.source_done = true,
                    Flag::TargetDone => d.target_done = true,
                }
                Ok(*id)
            }
            WalOp::Revert(id) => {
                let d = self
                    .deps
                    .get_mut(id)
                    .ok_or(MetaError::UnknownMigration(*id))?;
                if !d.cancelled {
                    return Err(MetaError::NotCancelled(*id));
                }
                if d.reverted {
                    return Ok(*id);
                }
                self.map
                    .transfer(d.target, d.source, &d.ranges)
                    .map_err(|e| MetaError::Rejected(e.to_string()))?;
                d.reverted = true;
                Ok(*id)
            }
            WalOp::Delete(id) => {
                self.deps.remove(id);
                Ok(*id)
            }
        }
    }
}

#[derive(Debug)]
struct Wal {
    file: File,
    path: PathBuf,
    sync: bool,
}

impl Wal {
    /// Opens or creates the log and returns the records that survived.
    fn open(path: &Path, sync: bool) -> io::Result<(Wal, Vec<WalOp>)> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let mut ops = Vec::new();
        let mut good = 0usize;
        let mut pos = 0usize;
        while pos + 8 <= bytes.len() {
            let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
            let Some(payload) = bytes.get(pos + 8..pos + 8 + len) else {
                break;
            };
            if crc32fast::hash(payload) != crc {
                break;
            }
            match WalOp::decode(payload) {
                Ok(op) => ops.push(op),
                Err(_) => break,
            }
            pos += 8 + len;
            good = pos;
        }
        if good < bytes.len() {
            tracing::warn!(path = %path.display(), kept = good, dropped = bytes.len() - good, "truncating torn metadata log tail");
            file.set_len(good as u64)?;
        }
        file.seek(SeekFrom::Start(good as u64))?;
        Ok((
            Wal {
                file,
                path: path.to_path_buf(),
                sync,
            },
            ops,
        ))
    }

    fn append(&mut self, op: &WalOp) -> io::Result<()> {
        let payload = op.encode();
        let mut rec = Vec::with_capacity(8 + payload.len());
        rec.put_u32(payload.len() as u32);
        rec.put_u32(crc32fast::hash(&payload));
        rec.extend_from_slice(&payload);
        self.file.write_all(&rec)?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}

/// The authoritative, internally serialized metadata store.
#[derive(Debug)]
pub struct MetadataStore {
    state: Mutex<State>,
    wal: Option<Mutex<Wal>>,
}

impl MetadataStore {
    /// Volatile store, for tests and in-process clusters.
    pub fn in_memory(initial: OwnershipMap) -> Self {
        MetadataStore {
            state: Mutex::new(State {
                map: initial,
                deps: BTreeMap::new(),
                next_id: 1,
            }),
            wal: None,
        }
    }

    /// Durable store backed by a write-ahead log at `path`. An existing log is
    /// replayed and `initial` ignored.
    pub fn open(path: &Path, initial: OwnershipMap, sync: bool) -> Result<Self, MetaError> {
        let (mut wal, ops) = Wal::open(path, sync)?;
        let mut state = State {
            map: initial.clone(),
            deps: BTreeMap::new(),
            next_id: 1,
        };
        if ops.is_empty() {
            wal.append(&WalOp::Init(initial))?;
        }
        for op in &ops {
            if let Err(e) = state.apply(op) {
                return Err(MetaError::Storage(format!(
                    "replay of {} failed at {op:?}: {e}",
                    wal.path.display()
                )));
            }
        }
        Ok(MetadataStore {
            state: Mutex::new(state),
            wal: Some(Mutex::new(wal)),
        })
    }

    fn commit(&self, op: WalOp) -> Result<MigrationId, MetaError> {
        let mut state = self.state.lock();
        let mut next = state.clone();
        let out = next.apply(&op)?;
        if let Some(w) = &self.wal {
            w.lock().append(&op)?;
        }
        *state = next;
        Ok(out)
    }

    /// Deletes dependencies that are committed or reverted.
    pub fn sweep(&self) -> Result<usize, MetaError> {
        let done: Vec<MigrationId> = self
            .state
            .lock()
            .deps
            .values()
            .filter(|d| d.committed() || d.reverted)
            .map(|d| d.id)
            .collect();
        for id in &done {
            self.commit(WalOp::Delete(*id))?;
        }
        Ok(done.len())
    }

    /// Runs `sweep` every `interval` until the handle is dropped.
    pub fn spawn_sweeper(self: &Arc<Self>, interval: Duration) -> BackgroundHandle {
        let store = self.clone();
        BackgroundHandle::spawn("meta-sweep", move |stop| {
            while !stop.load(Ordering::Acquire) {
                if let Err(e) = store.sweep() {
                    tracing::warn!(error = %e, "metadata sweep failed");
                }
                std::thread::sleep(interval);
            }
        })
    }
}

impl Metadata for MetadataStore {
    fn get_ownership(&self) -> Result<OwnershipMap, MetaError> {
        Ok(self.state.lock().map.clone())
    }

    fn poll_changes(&self, since: u64) -> Result<Option<OwnershipMap>, MetaError> {
        let s = self.state.lock();
        Ok((s.map.version() > since).then(|| s.map.clone()))
    }

    fn add_server(&self, server: ServerId) -> Result<(), MetaError> {
        if self.state.lock().map.view_of(server).is_some() {
            return Ok(());
        }
        self.commit(WalOp::AddServer(server)).map(|_| ())
    }

    fn transfer_ranges(
        &self,
        source: ServerId,
        target: ServerId,
        ranges: &[HashRange],
    ) -> Result<MigrationId, MetaError> {
        if ranges.is_empty() {
            return Err(MetaError::Rejected("no ranges".into()));
        }
        let mut state = self.state.lock();
        let id = state.next_id;
        let op = WalOp::Transfer {
            id,
            source,
            target,
            ranges: RangeSet::from_ranges(ranges.iter().copied()).ranges().to_vec(),
        };
        let mut next = state.clone();
        next.apply(&op)?;
        if let Some(w) = &self.wal {
            w.lock().append(&op)?;
        }
        *state = next;
        Ok(id)
    }

    fn set_flag(&self, id: MigrationId, flag: Flag) -> Result<(), MetaError> {
        self.commit(WalOp::SetFlag(id, flag)).map(|_| ())
    }

    fn revert_ranges(&self, id: MigrationId) -> Result<(), MetaError> {
        self.commit(WalOp::Revert(id)).map(|_| ())
    }

    fn dependencies(&self) -> Result<Vec<MigrationDependency>, MetaError> {
        Ok(self.state.lock().deps.values().cloned().collect())
    }
}

/// Stoppable background thread.
pub struct BackgroundHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for BackgroundHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BackgroundHandle")
    }
}

impl BackgroundHandle {
    pub fn spawn(name: &str, f: impl FnOnce(Arc<AtomicBool>) + Send + 'static) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let s = stop.clone();
        let thread = std::thread::Builder::new()
            .name(name.to_string())
            .spawn(move || f(s))
            .expect("spawn background thread");
        BackgroundHandle {
            stop,
            thread: Some(thread),
        }
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for BackgroundHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

// ---- network service ----

mod op {
    pub const GET_OWNERSHIP: u8 = 1;
    pub const POLL: u8 = 2;
    pub const ADD_SERVER: u8 = 3;
    pub const TRANSFER: u8 = 4;
    pub const SET_FLAG: u8 = 5;
    pub const REVERT: u8 = 6;
    pub const DEPENDENCIES: u8 = 7;
}

fn encode_error(e: &MetaError, out: &mut Vec<u8>) {
    let (code, id, msg) = match e {
        MetaError::Rejected(m) => (1, 0, m.clone()),
        MetaError::UnknownMigration(id) => (2, *id, String::new()),
        MetaError::AlreadyCommitted(id) => (3, *id, String::new()),
        MetaError::Cancelled(id) => (4, *id, String::new()),
        MetaError::NotCancelled(id) => (5, *id, String::new()),
        MetaError::Storage(m) => (6, 0, m.clone()),
        MetaError::Unavailable(m) => (7, 0, m.clone()),
    };
    out.put_u8(code);
    out.put_u64(id);
    out.put_blob(msg.as_bytes());
}

fn decode_error(r: &mut Reader<'_>) -> Result<MetaError, DecodeError> {
    let code = r.u8()?;
    let id = r.u64()?;
    let msg = String::from_utf8_lossy(r.blob()?).into_owned();
    Ok(match code {
        1 => MetaError::Rejected(msg),
        2 => MetaError::UnknownMigration(id),
        3 => MetaError::AlreadyCommitted(id),
        4 => MetaError::Cancelled(id),
        5 => MetaError::NotCancelled(id),
        6 => MetaError::Storage(msg),
        _ => MetaError::Unavailable(msg),
    })
}

fn handle_request(store: &MetadataStore, req: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let result: Result<Vec<u8>, MetaError> = (|| {
        let mut r = Reader::new(req);
        let bad = |e: DecodeError| MetaError::Rejected(format!("malformed request: {e}"));
        let mut body = Vec::new();
        match r.u8().map_err(bad)? {
            op::GET_OWNERSHIP => store.get_ownership()?.encode(&mut body),
            op::POLL => match store.poll_changes(r.u64().map_err(bad)?)? {
                Some(m) => {
                    body.put_u8(1);
                    m.encode(&mut body);
                }
                None => body.put_u8(0),
            },
            op::ADD_SERVER => store.add_server(r.u32().map_err(bad)?)?,
            op::TRANSFER => {
                let s = r.u32().map_err(bad)?;
                let t = r.u32().map_err(bad)?;
                let ranges = decode_ranges(&mut r).map_err(bad)?;
                body.put_u64(store.transfer_ranges(s, t, &ranges)?);
            }
            op::SET_FLAG => {
                let id = r.u64().map_err(bad)?;
                let f = Flag::from_u8(r.u8().map_err(bad)?).map_err(bad)?;
                store.set_flag(id, f)?;
            }
            op::REVERT => store.revert_ranges(r.u64().map_err(bad)?)?,
            op::DEPENDENCIES => {
                let deps = store.dependencies()?;
                body.put_u32(deps.len() as u32);
                for d in &deps {
                    d.encode(&mut body);
                }
            }
            other => return Err(bad(DecodeError::BadOpcode(other))),
        }
        Ok(body)
    })();
    match result {
        Ok(body) => {
            out.put_u8(0);
            out.extend_from_slice(&body);
        }
        Err(e) => {
            out.put_u8(1);
            encode_error(&e, &mut out);
        }
    }
    out
}

/// Serves a [`MetadataStore`] over framed TCP, one thread per connection,
/// and sweeps finished dependencies in the background.
pub struct MetadataServer {
    addr: SocketAddr,
    _accept: BackgroundHandle,
    _sweep: BackgroundHandle,
}

impl std::fmt::Debug for MetadataServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MetadataServer({})", self.addr)
    }
}

impl MetadataServer {
    pub fn spawn(store: Arc<MetadataStore>, addr: impl ToSocketAddrs) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let sweep = store.spawn_sweeper(Duration::from_millis(100));
        let accept = BackgroundHandle::spawn("meta-accept", move |stop| {
            while !stop.load(Ordering::Acquire) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let store = store.clone();
                        let _ = std::thread::Builder::new()
                            .name("meta-conn".into())
                            .spawn(move || serve_connection(store, stream));
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(5))
                    }
                    Err(e) => {
                        tracing::warn!(error = %e, "metadata accept failed");
                        std::thread::sleep(Duration::from_millis(50));
                    }
                }
            }
        });
        Ok(MetadataServer {
            addr: local,
            _accept: accept,
            _sweep: sweep,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

fn serve_connection(store: Arc<MetadataStore>, stream: TcpStream) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let mut reader = match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    };
    let mut writer = stream;
    while let Ok(req) = read_frame(&mut reader) {
        let resp = handle_request(&store, &req);
        if write_frame(&mut writer, &resp).is_err() {
            break;
        }
    }
}

/// TCP client for a [`MetadataServer`]; reconnects with backoff.
#[derive(Debug)]
pub struct RemoteMetadata {
    addr: SocketAddr,
    conn: Mutex<Option<TcpStream>>,
    retries: u32,
}

impl RemoteMetadata {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, MetaError> {
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| MetaError::Unavailable(e.to_string()))?
            .next()
            .ok_or_else(|| MetaError::Unavailable("no address".into()))?;
        let client = RemoteMetadata {
            addr,
            conn: Mutex::new(None),
            retries: 5,
        };
        client.get_ownership()?;
        Ok(client)
    }

    fn call(&self, req: &[u8]) -> Result<Vec<u8>, MetaError> {
        let mut delay = Duration::from_millis(10);
        let mut last = String::new();
        for _ in 0..=self.retries {
            let mut guard = self.conn.lock();
            if guard.is_none() {
                match TcpStream::connect(self.addr) {
                    Ok(s) => {
                        let _ = s.set_nodelay(true);
                        *guard = Some(s);
                    }
                    Err(e) => {
                        last = e.to_string();
                        drop(guard);
                        std::thread::sleep(delay);
                        delay *= 2;
                        continue;
                    }
                }
            }
            let s = guard.as_mut().unwrap();
            match write_frame(s, req).and_then(|_| read_frame(s)) {
                Ok(resp) => return Ok(resp),
                Err(e) => {
                    last = e.to_string();
                    *guard = None;
                    drop(guard);
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
        Err(MetaError::Unavailable(last))
    }

    fn request(&self, req: Vec<u8>) -> Result<Vec<u8>, MetaError> {
        let resp = self.call(&req)?;
        let mut r = Reader::new(&resp);
        let proto = |e: DecodeError| MetaError::Unavailable(format!("bad response: {e}"));
        match r.u8().map_err(proto)? {
            0 => Ok(resp[1..].to_vec()),
            _ => Err(decode_error(&mut r).map_err(proto)?),
        }
    }
}

fn proto_err(e: DecodeError) -> MetaError {
    MetaError::Unavailable(format!("bad response: {e}"))
}

impl Metadata for RemoteMetadata {
    fn get_ownership(&self) -> Result<OwnershipMap, MetaError> {
        let body = self.request(vec![op::GET_OWNERSHIP])?;
        OwnershipMap::decode(&mut Reader::new(&body)).map_err(proto_err)
    }

    fn poll_changes(&self, since: u64) -> Result<Option<OwnershipMap>, MetaError> {
        let mut req = vec![op::POLL];
        req.put_u64(since);
        let body = self.request(req)?;
        let mut r = Reader::new(&body);
        match r.u8().map_err(proto_err)? {
            0 => Ok(None),
            _ => Ok(Some(OwnershipMap::decode(&mut r).map_err(proto_err)?)),
        }
    }

    fn add_server(&self, server: ServerId) -> Result<(), MetaError> {
        let mut req = vec![op::ADD_SERVER];
        req.put_u32(server);
        self.request(req).map(|_| ())
    }

    fn transfer_ranges(
        &self,
        source: ServerId,
        target: ServerId,
        ranges: &[HashRange],
    ) -> Result<MigrationId, MetaError> {
        let mut req = vec![op::TRANSFER];
        req.put_u32(source);
        req.put_u32(target);
        encode_ranges(ranges, &mut req);
        let body = self.request(req)?;
        Reader::new(&body).u64().map_err(proto_err)
    }

    fn set_flag(&self, id: MigrationId, flag: Flag) -> Result<(), MetaError> {
        let mut req = vec![op::SET_FLAG];
        req.put_u64(id);
        req.put_u8(flag as u8);
        self.request(req).map(|_| ())
    }

    fn revert_ranges(&self, id: MigrationId) -> Result<(), MetaError> {
        let mut req = vec![op::REVERT];
        req.put_u64(id);
        self.request(req).map(|_| ())
    }

    fn dependencies(&self) -> Result<Vec<MigrationDependency>, MetaError> {
        let body = self.request(vec![op::DEPENDENCIES])?;
        let mut r = Reader::new(&body);
        let n = r.u32().map_err(proto_err)?;
        (0..n)
            .map(|_| MigrationDependency::decode(&mut r).map_err(proto_err))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_servers() -> OwnershipMap {
        let mut m = OwnershipMap::single(1);
        m.add_server(2);
        m
    }

    #[test]
    fn transfer_flags_and_sweep() {
        let s = MetadataStore::in_memory(two_servers());
        let r = HashRange::FULL.prefix(0.1);
        let id = s.transfer_ranges(1, 2, &[r]).unwrap();
        let m = s.get_ownership().unwrap();
        assert_eq!(m.owner_of(r.lo).0, 2);
        assert_eq!((m.view_of(1), m.view_of(2)), (Some(2), Some(2)));
        let d = s.dependency(id).unwrap().unwrap();
        assert_eq!((d.source_view_before, d.target_view_before), (1, 1));
        // a second transfer of the same range is rejected, map unchanged
        assert!(matches!(s.transfer_ranges(1, 2, &[r]), Err(MetaError::Rejected(_))));
        assert_eq!(s.get_ownership().unwrap(), m);

        s.set_flag(id, Flag::SourceDone).unwrap();
        assert_eq!(s.sweep().unwrap(), 0);
        s.set_flag(id, Flag::TargetDone).unwrap();
        assert_eq!(s.set_flag(id, Flag::Cancelled), Err(MetaError::AlreadyCommitted(id)));
        assert_eq!(s.sweep().unwrap(), 1);
        assert!(s.dependency(id).unwrap().is_none());
    }

    #[test]
    fn cancel_and_revert() {
        let s = MetadataStore::in_memory(two_servers());
        let r = HashRange::FULL.prefix(0.25);
        let id = s.transfer_ranges(1, 2, &[r]).unwrap();
        assert_eq!(s.revert_ranges(id), Err(MetaError::NotCancelled(id)));
        s.set_flag(id, Flag::SourceDone).unwrap();
        s.set_flag(id, Flag::Cancelled).unwrap();
        assert_eq!(s.set_flag(id, Flag::TargetDone), Err(MetaError::Cancelled(id)));
        s.revert_ranges(id).unwrap();
        let m = s.get_ownership().unwrap();
        assert_eq!(m.entries(), &[(HashRange::FULL, 1)]);
        assert_eq!((m.view_of(1), m.view_of(2)), (Some(3), Some(3)));
        assert_eq!(s.sweep().unwrap(), 1);
    }

    #[test]
    fn disjoint_concurrent_transfers_both_succeed() {
        let mut m = OwnershipMap::even(&[1, 2]);
        m.add_server(3);
        m.add_server(4);
        let s = Arc::new(MetadataStore::in_memory(m));
        let a = HashRange::FULL.prefix(0.1);
        let b = HashRange::new(1 << 63, (1 << 63) + (1 << 60));
        let h1 = {
            let s = s.clone();
            std::thread::spawn(move || s.transfer_ranges(1, 3, &[a]))
        };
        let h2 = {
            let s = s.clone();
            std::thread::spawn(move || s.transfer_ranges(2, 4, &[b]))
        };
        h1.join().unwrap().unwrap();
        h2.join().unwrap().unwrap();
        let m = s.get_ownership().unwrap();
        m.check().unwrap();
        assert_eq!(m.owner_of(a.lo).0, 3);
        assert_eq!(m.owner_of(b.lo).0, 4);
        assert_eq!(m.views().values().copied().collect::<Vec<_>>(), vec![2, 2, 2, 2]);
    }

    #[test]
    fn concurrent_conflicting_transfers_one_wins() {
        let mut m = OwnershipMap::single(1);
        m.add_server(2);
        m.add_server(3);
        let s = Arc::new(MetadataStore::in_memory(m));
        let r = HashRange::FULL.prefix(0.5);
        let hs: Vec<_> = [2, 3]
            .into_iter()
            .map(|t| {
                let s = s.clone();
                std::thread::spawn(move || s.transfer_ranges(1, t, &[r]))
            })
            .collect();
        let oks = hs
            .into_iter()
            .map(|h| h.join().unwrap())
            .filter(Result::is_ok)
            .count();
        assert_eq!(oks, 1);
        s.get_ownership().unwrap().check().unwrap();
    }

    /// Replays every prefix of a scripted history: the store reopened after a
    /// crash between any two operations shows exactly the state committed so far.
    #[test]
    fn crash_between_operations_recovers_last_commit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.wal");
        let mut snapshots = Vec::new();
        {
            let s = MetadataStore::open(&path, two_servers(), true).unwrap();
            s.add_server(3).unwrap();
            snapshots.push((std::fs::metadata(&path).unwrap().len(), s.get_ownership().unwrap(), s.dependencies().unwrap()));
            let id = s.transfer_ranges(1, 2, &[HashRange::FULL.prefix(0.1)]).unwrap();
            snapshots.push((std::fs::metadata(&path).unwrap().len(), s.get_ownership().unwrap(), s.dependencies().unwrap()));
            s.set_flag(id, Flag::Cancelled).unwrap();
            snapshots.push((std::fs::metadata(&path).unwrap().len(), s.get_ownership().unwrap(), s.dependencies().unwrap()));
            s.revert_ranges(id).unwrap();
            snapshots.push((std::fs::metadata(&path).unwrap().len(), s.get_ownership().unwrap(), s.dependencies().unwrap()));
            let id2 = s.transfer_ranges(1, 3, &[HashRange::new(5, 1 << 40)]).unwrap();
            s.set_flag(id2, Flag::SourceDone).unwrap();
            s.set_flag(id2, Flag::TargetDone).unwrap();
            s.sweep().unwrap();
            snapshots.push((std::fs::metadata(&path).unwrap().len(), s.get_ownership().unwrap(), s.dependencies().unwrap()));
        }
        let full = std::fs::read(&path).unwrap();
        for (len, map, deps) in &snapshots {
            let len = *len as usize;
            // a crash right after the commit, and one partway into the next record
            for cut in [len, len + 3, len + 9] {
                if cut > full.len() || (cut > len && cut == full.len()) {
                    continue;
                }
                let p = dir.path().join(format!("cut-{cut}.wal"));
                std::fs::write(&p, &full[..cut]).unwrap();
                let s = MetadataStore::open(&p, OwnershipMap::single(99), true).unwrap();
                assert_eq!(&s.get_ownership().unwrap(), map, "cut at {cut}");
                assert_eq!(&s.dependencies().unwrap(), deps, "cut at {cut}");
                assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, len);
            }
        }
        // corrupt a byte in the last record: everything before it survives
        let mut bad = full.clone();
        let last = bad.len() - 2;
        bad[last] ^= 0xff;
        let p = dir.path().join("corrupt.wal");
        std::fs::write(&p, &bad).unwrap();
        let s = MetadataStore::open(&p, OwnershipMap::single(99), true).unwrap();
        s.get_ownership().unwrap().check().unwrap();
        assert!(s.dependencies().unwrap().len() <= 1);
    }

    #[test]
    fn tcp_service_roundtrip() {
        let store = Arc::new(MetadataStore::in_memory(two_servers()));
        let server = MetadataServer::spawn(store.clone(), "127.0.0.1:0").unwrap();
        let client = RemoteMetadata::connect(server.local_addr()).unwrap();
        let m = client.get_ownership().unwrap();
        assert_eq!(m, store.get_ownership().unwrap());
        assert!(client.poll_changes(m.version()).unwrap().is_none());
        let r = HashRange::FULL.prefix(0.5);
        let id = client.transfer_ranges(1, 2, &[r]).unwrap();
        let newer = client.poll_changes(m.version()).unwrap().unwrap();
        assert_eq!(newer.owner_of(r.lo).0, 2);
        assert_eq!(client.dependency(id).unwrap().unwrap().ranges, vec![r]);
        assert_eq!(client.revert_ranges(id), Err(MetaError::NotCancelled(id)));
        client.set_flag(id, Flag::SourceDone).unwrap();
        client.set_flag(id, Flag::TargetDone).unwrap();
        // background sweeper removes the finished dependency
        let deadline = std::time::Instant::now() + Duration::from_secs(5);
        while client.dependency(id).unwrap().is_some() && std::time::Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(10));
        }
        assert!(client.dependency(id).unwrap().is_none());
        client.add_server(7).unwrap();
        assert_eq!(client.get_ownership().unwrap().view_of(7), Some(1));
    }
}
