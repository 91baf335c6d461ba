//! Client library: routes requests by a cached ownership map, batches them
//! per server session and reissues whatever a server rejects.
//!
//! One `Client` belongs to one thread. It keeps a session per server;
//! requests are buffered and shipped as batches tagged with the view the
//! client believes that server is in. A rejected batch (and every batch
//! behind it on that session) is reissued after the map is refreshed, in
//! the order the requests were first issued.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::codec::DecodeError;
use crate::hash::key_hash;
use crate::metadata::{MetaError, Metadata};
use crate::ownership::{OwnershipMap, RangeSet, ServerId, ViewNumber};
use crate::server::Dialer;
use crate::transport::Connection;
use crate::wire::{
    BatchStatus, Control, Opcode, RequestBatch, ResponseBatch, ResultStatus, WireRequest, WireResult,
    BATCH_HEADER_BYTES,
};

#[derive(Debug, Error)]
pub enum ClientError {
    /// Window and buffer are full; poll and try again.
    #[error("backpressure: too many requests in flight")]
    Backpressure,
    #[error("key {0:#x} is outside the session's ranges")]
    Routing(u64),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("no owner for key {0:#x}")]
    NoOwner(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Read(u64),
    Upsert(u64, Vec<u8>),
    RmwAdd(u64, u64),
}

impl Request {
    pub fn key(&self) -> u64 {
        match self {
            Request::Read(k) | Request::Upsert(k, _) | Request::RmwAdd(k, _) => *k,
        }
    }

    fn to_wire(&self) -> WireRequest {
        match self {
            Request::Read(k) => WireRequest {
                opcode: Opcode::Read,
                key: *k,
                value: Vec::new(),
            },
            Request::Upsert(k, v) => WireRequest {
                opcode: Opcode::Upsert,
                key: *k,
                value: v.clone(),
            },
            Request::RmwAdd(k, d) => WireRequest {
                opcode: Opcode::RmwAdd,
                key: *k,
                value: d.to_le_bytes().to_vec(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Value(Vec<u8>),
    Written,
    NotFound,
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completed {
    /// Issue number returned by [`Client::issue`].
    pub id: u64,
    pub request: Request,
    pub outcome: Outcome,
    pub server: ServerId,
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// Batches in flight per session.
    pub window: usize,
    /// Encoded bytes at which a buffered batch is sent.
    pub batch_bytes: usize,
    /// Minimum spacing of map refreshes.
    pub refresh_interval: Duration,
    /// Longest wait between refreshes while a server keeps rejecting.
    pub max_backoff: Duration,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            window: 16,
            batch_bytes: 32 << 10,
            refresh_interval: Duration::from_millis(1),
            max_backoff: Duration::from_millis(20),
        }
    }
}

#[derive(Debug, Clone)]
struct Pending {
    id: u64,
    request: Request,
}

struct InFlight {
    seq: u32,
    requests: Vec<Pending>,
    /// Requests already moved to the reissue queue.
    dropped: bool,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct SessionStats {
    pub batches_sent: u64,
    pub rejected: u64,
    pub bytes_sent: u64,
}

/// Connection from one client thread to one server.
pub struct Session {
    server: ServerId,
    session_id: u64,
    conn: Box<dyn Connection>,
    view: ViewNumber,
    ranges: RangeSet,
    buffer: Vec<Pending>,
    buffer_bytes: usize,
    in_flight: VecDeque<InFlight>,
    next_seq: u32,
    waiting: HashMap<(u32, u32), Pending>,
    needs_resync: bool,
    window: usize,
    batch_bytes: usize,
    pub stats: SessionStats,
}

/// What a session learned from one response frame.
#[derive(Default)]
struct Delivery {
    done: Vec<(Pending, Outcome)>,
    reissue: Vec<Pending>,
    rejected: bool,
}

impl Session {
    pub fn new(server: ServerId, session_id: u64, conn: Box<dyn Connection>, view: ViewNumber, ranges: RangeSet) -> Self {
        let cfg = ClientConfig::default();
        Session {
            server,
            session_id,
            conn,
            view,
            ranges,
            buffer: Vec::new(),
            buffer_bytes: BATCH_HEADER_BYTES,
            in_flight: VecDeque::new(),
            next_seq: 1,
            waiting: HashMap::new(),
            needs_resync: false,
            window: cfg.window,
            batch_bytes: cfg.batch_bytes,
            stats: SessionStats::default(),
        }
    }

    pub fn server(&self) -> ServerId {
        self.server
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    /// Requests sent and not answered, plus those the server reported
    /// pending.
    pub fn outstanding(&self) -> usize {
        self.in_flight.iter().map(|b| b.requests.len()).sum::<usize>() + self.waiting.len() + self.buffer.len()
    }

    /// Re-targets the session; unsent requests routed under the old view
    /// are handed back for rerouting.
    fn set_route(&mut self, view: ViewNumber, ranges: RangeSet) -> Vec<Pending> {
        let moved = if view != self.view {
            self.buffer_bytes = BATCH_HEADER_BYTES;
            std::mem::take(&mut self.buffer)
        } else {
            Vec::new()
        };
        self.view = view;
        self.ranges = ranges;
        moved
    }

    fn push(&mut self, p: Pending) -> Result<(), ClientError> {
        if !self.ranges.contains_key(p.request.key()) {
            return Err(ClientError::Routing(p.request.key()));
        }
        let n = p.request.to_wire().encoded_len();
        if self.in_flight.len() >= self.window && self.buffer_bytes + n > self.batch_bytes {
            return Err(ClientError::Backpressure);
        }
        self.buffer_bytes += n;
        self.buffer.push(p);
        if self.buffer_bytes >= self.batch_bytes {
            self.flush()?;
        }
        Ok(())
    }

    /// Sends the buffered batch if the window allows.
    fn flush(&mut self) -> Result<bool, ClientError> {
        if self.buffer.is_empty() || self.in_flight.len() >= self.window {
            return Ok(false);
        }
        if self.needs_resync {
            self.conn.send(
                &Control::Resync {
                    session_id: self.session_id,
                }
                .encode(),
            )?;
            self.needs_resync = false;
        }
        let requests = std::mem::take(&mut self.buffer);
        self.buffer_bytes = BATCH_HEADER_BYTES;
        let seq = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1).max(1);
        let batch = RequestBatch {
            session_id: self.session_id,
            view: self.view,
            batch_seq: seq,
            requests: requests.iter().map(|p| p.request.to_wire()).collect(),
        };
        let mut out = Vec::new();
        batch.encode(&mut out);
        self.conn.send(&out)?;
        self.stats.batches_sent += 1;
        self.stats.bytes_sent += out.len() as u64;
        self.in_flight.push_back(InFlight {
            seq,
            requests,
            dropped: false,
        });
        Ok(true)
    }

    fn outcome(p: &Pending, r: WireResult) -> Outcome {
        match r.status {
            ResultStatus::Ok if matches!(p.request, Request::Upsert(..)) => Outcome::Written,
            ResultStatus::Ok => Outcome::Value(r.value),
            ResultStatus::NotFound => Outcome::NotFound,
            _ => Outcome::Error(String::from_utf8_lossy(&r.value).into_owned()),
        }
    }

    fn receive(&mut self) -> Result<Option<Delivery>, ClientError> {
        let Some(frame) = self.conn.try_recv()? else {
            return Ok(None);
        };
        let resp = ResponseBatch::decode(&frame)?;
        let mut d = Delivery::default();
        match resp.status {
            BatchStatus::CompletionsOnly => {}
            BatchStatus::Ok | BatchStatus::ViewRejected => {
                let b = self
                    .in_flight
                    .pop_front()
                    .ok_or_else(|| ClientError::Protocol("response without a batch".into()))?;
                if b.seq != resp.batch_seq {
                    return Err(ClientError::Protocol(format!(
                        "response for batch {} while {} is oldest",
                        resp.batch_seq, b.seq
                    )));
                }
                if resp.status == BatchStatus::ViewRejected {
                    self.stats.rejected += 1;
                    d.rejected = true;
                    if !b.dropped {
                        // The server rejects everything after this batch until
                        // it sees a resync, so all of it comes back.
                        d.reissue.extend(b.requests);
                        for later in self.in_flight.iter_mut() {
                            d.reissue.append(&mut later.requests);
                            later.dropped = true;
                        }
                        d.reissue.append(&mut self.buffer);
                        self.buffer_bytes = BATCH_HEADER_BYTES;
                        self.needs_resync = true;
                    }
                } else {
                    if b.requests.len() != resp.results.len() {
                        return Err(ClientError::Protocol("result count differs from batch".into()));
                    }
                    for (i, (p, r)) in b.requests.into_iter().zip(resp.results).enumerate() {
                        match r.status {
                            ResultStatus::Pending => {
                                self.waiting.insert((b.seq, i as u32), p);
                            }
                            ResultStatus::Retry => d.reissue.push(p),
                            _ => {
                                let o = Self::outcome(&p, r);
                                d.done.push((p, o));
                            }
                        }
                    }
                }
            }
        }
        for c in resp.completions {
            let Some(p) = self.waiting.remove(&(c.orig_seq, c.orig_idx)) else {
                return Err(ClientError::Protocol(format!(
                    "completion for unknown request {}/{}",
                    c.orig_seq, c.orig_idx
                )));
            };
            match c.result.status {
                ResultStatus::Retry => d.reissue.push(p),
                ResultStatus::Pending => {
                    return Err(ClientError::Protocol("completion still pending".into()));
                }
                _ => {
                    let o = Self::outcome(&p, c.result);
                    d.done.push((p, o));
                }
            }
        }
        Ok(Some(d))
    }
}

/// Per-thread client over all servers.
pub struct Client {
    cfg: ClientConfig,
    metadata: Arc<dyn Metadata>,
    dialer: Arc<dyn Dialer>,
    map: OwnershipMap,
    sessions: BTreeMap<ServerId, Session>,
    next_id: u64,
    next_session: u64,
    /// Requests waiting for a fresh route, ordered by issue number.
    reissue: Vec<Pending>,
    last_refresh: Option<Instant>,
    backoff: Duration,
    completed: VecDeque<Completed>,
    pub refreshes: u64,
}

impl Client {
    pub fn connect(metadata: Arc<dyn Metadata>, dialer: Arc<dyn Dialer>, cfg: ClientConfig) -> Result<Self, ClientError> {
        let map = metadata.get_ownership()?;
        let next_session = rand::random::<u64>() >> 16 << 16;
        Ok(Client {
            backoff: cfg.refresh_interval,
            cfg,
            metadata,
            dialer,
            map,
            sessions: BTreeMap::new(),
            next_id: 1,
            next_session,
            reissue: Vec::new(),
            last_refresh: None,
            completed: VecDeque::new(),
            refreshes: 0,
        })
    }

    pub fn map(&self) -> &OwnershipMap {
        &self.map
    }

    /// Requests issued and not yet completed.
    pub fn outstanding(&self) -> usize {
        self.sessions.values().map(|s| s.outstanding()).sum::<usize>() + self.reissue.len()
    }

    pub fn session_stats(&self) -> SessionStats {
        let mut t = SessionStats::default();
        for s in self.sessions.values() {
            t.batches_sent += s.stats.batches_sent;
            t.rejected += s.stats.rejected;
            t.bytes_sent += s.stats.bytes_sent;
        }
        t
    }

    /// Queues a request; returns its issue number. Completion is reported by
    /// [`Client::poll`].
    pub fn issue(&mut self, request: Request) -> Result<u64, ClientError> {
        let p = Pending {
            id: self.next_id,
            request,
        };
        if !self.reissue.is_empty() {
            // Stay behind requests waiting for a route so per-key order holds.
            if self.reissue.len() >= self.cfg.window * 1024 {
                return Err(ClientError::Backpressure);
            }
            self.next_id += 1;
            self.reissue.push(p);
            return Ok(self.next_id - 1);
        }
        self.route(p.clone())?;
        self.next_id += 1;
        Ok(p.id)
    }

    fn session(&mut self, server: ServerId) -> Result<&mut Session, ClientError> {
        if !self.sessions.contains_key(&server) {
            let conn = self.dialer.dial(server)?;
            let view = self.map.view_of(server).unwrap_or(0);
            self.next_session += 1;
            let mut s = Session::new(server, self.next_session, conn, view, self.map.ranges_of(server));
            s.window = self.cfg.window;
            s.batch_bytes = self.cfg.batch_bytes;
            self.sessions.insert(server, s);
        }
        Ok(self.sessions.get_mut(&server).unwrap())
    }

    fn route(&mut self, p: Pending) -> Result<(), ClientError> {
        let (server, _) = self.map.owner_of_key(p.request.key());
        if !self.map.ranges_of(server).contains(key_hash(p.request.key())) {
            return Err(ClientError::NoOwner(p.request.key()));
        }
        self.session(server)?.push(p)
    }

    /// Sends buffered batches, collects responses, reissues rejected work and
    /// returns everything that completed, in issue order per poll.
    pub fn poll(&mut self) -> Result<Vec<Completed>, ClientError> {
        let mut rejected = false;
        let servers: Vec<ServerId> = self.sessions.keys().copied().collect();
        for server in servers {
            loop {
                let s = self.sessions.get_mut(&server).unwrap();
                let Some(d) = s.receive()? else { break };
                rejected |= d.rejected;
                for (p, outcome) in d.done {
                    self.completed.push_back(Completed {
                        id: p.id,
                        request: p.request,
                        outcome,
                        server,
                    });
                }
                self.reissue.extend(d.reissue);
            }
        }
        if rejected {
            self.backoff = (self.backoff * 2).min(self.cfg.max_backoff);
        }
        if !self.reissue.is_empty() {
            self.try_reissue()?;
        }
        for s in self.sessions.values_mut() {
            s.flush()?;
        }
        let mut out: Vec<Completed> = self.completed.drain(..).collect();
        out.sort_by_key(|c| c.id);
        Ok(out)
    }

    fn try_reissue(&mut self) -> Result<(), ClientError> {
        // Sessions still carrying dropped batches answer those with
        // rejections first; wait them out so nothing is sent twice.
        if self
            .sessions
            .values()
            .any(|s| s.in_flight.iter().any(|b| b.dropped))
        {
            return Ok(());
        }
        let now = Instant::now();
        if let Some(last) = self.last_refresh {
            if now.duration_since(last) < self.backoff {
                return Ok(());
            }
        }
        self.last_refresh = Some(now);
        self.refresh_map()?;
        let mut queue = std::mem::take(&mut self.reissue);
        queue.sort_by_key(|p| p.id);
        let mut rest = queue.into_iter();
        while let Some(p) = rest.next() {
            match self.route(p.clone()) {
                Ok(()) => {}
                Err(ClientError::Backpressure) => {
                    self.reissue.push(p);
                    self.reissue.extend(rest);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if self.reissue.is_empty() {
            self.backoff = self.cfg.refresh_interval;
        }
        Ok(())
    }

    /// Reloads the ownership map and re-targets every session.
    pub fn refresh_map(&mut self) -> Result<(), ClientError> {
        self.refreshes += 1;
        if let Some(m) = self.metadata.poll_changes(self.map.version())? {
            self.map = m;
        }
        for (server, s) in self.sessions.iter_mut() {
            let view = self.map.view_of(*server).unwrap_or(0);
            self.reissue.extend(s.set_route(view, self.map.ranges_of(*server)));
        }
        Ok(())
    }

    /// Polls until nothing is outstanding or `timeout` passes.
    pub fn drain(&mut self, timeout: Duration) -> Result<Vec<Completed>, ClientError> {
        let deadline = Instant::now() + timeout;
        let mut out = Vec::new();
        loop {
            out.extend(self.poll()?);
            if self.outstanding() == 0 || Instant::now() > deadline {
                return Ok(out);
            }
            std::thread::sleep(Duration::from_micros(50));
        }
    }

    /// Issues one request and waits for its completion.
    pub fn call(&mut self, request: Request, timeout: Duration) -> Result<Outcome, ClientError> {
        let id = loop {
            match self.issue(request.clone()) {
                Ok(id) => break id,
                Err(ClientError::Backpressure) => {
                    self.poll()?;
                }
                Err(e) => return Err(e),
            }
        };
        let deadline = Instant::now() + timeout;
        loop {
            for c in self.poll()? {
                if c.id == id {
                    return Ok(c.outcome);
                }
                self.completed.push_back(c);
            }
            if Instant::now() > deadline {
                return Err(ClientError::Protocol(format!("request {id} timed out")));
            }
            std::thread::sleep(Duration::from_micros(50));
        }
    }
}

/// Sends one control message to a server and waits for the acknowledgement.
pub fn control_call(
    conn: &mut dyn Connection,
    msg: &Control,
    timeout: Duration,
) -> Result<(bool, String, Vec<crate::store::MigratedItem>), ClientError> {
    conn.send(&msg.encode())?;
    let deadline = Instant::now() + timeout;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        let Some(frame) = conn.recv_timeout(left)? else {
            return Err(ClientError::Protocol("no acknowledgement".into()));
        };
        if let Ok(Control::Ack {
            to, ok, message, items, ..
        }) = Control::decode(&frame)
        {
            if to == msg.opcode() {
                return Ok((ok, message, items));
            }
        }
    }
}
