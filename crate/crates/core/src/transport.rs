//! Framed, reliable, ordered message transport.
//!
//! Every message is `{len: u32 LE, payload}`. Two implementations: an
//! in-process loopback built on channels (payloads are still fully encoded
//! bytes) and non-blocking TCP. Connections are polled, never block the
//! caller on receive.

use std::io::{self, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender, TryRecvError};

/// Frames above this size are treated as corruption.
pub const MAX_FRAME: usize = 64 << 20;

pub trait Connection: Send {
    fn send(&mut self, payload: &[u8]) -> io::Result<()>;

    /// Next complete frame, if one has arrived.
    fn try_recv(&mut self) -> io::Result<Option<Vec<u8>>>;

    /// Stable identifier, used to shard connections across threads.
    fn id(&self) -> u64;

    /// Blocks until a frame arrives or `timeout` passes.
    fn recv_timeout(&mut self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(f) = self.try_recv()? {
                return Ok(Some(f));
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
            std::thread::sleep(Duration::from_micros(50));
        }
    }
}

pub trait Acceptor: Send + Sync {
    fn try_accept(&self) -> io::Result<Option<Box<dyn Connection>>>;
}

static NEXT_CONN_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_CONN_ID.fetch_add(1, Ordering::Relaxed)
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(io::Error::new(ErrorKind::InvalidInput, "frame too large"));
    }
    let mut buf = Vec::with_capacity(4 + payload.len());
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(payload);
    w.write_all(&buf)
}

/// Blocking read of one frame.
pub fn read_frame(r: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(ErrorKind::InvalidData, "frame too large"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

// ---- loopback ----

pub struct LoopbackConnection {
    id: u64,
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    bytes_sent: Arc<AtomicU64>,
}

impl std::fmt::Debug for LoopbackConnection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LoopbackConnection({})", self.id)
    }
}

/// Two connected endpoints.
pub fn loopback_pair() -> (LoopbackConnection, LoopbackConnection) {
    let (atx, arx) = crossbeam_channel::unbounded();
    let (btx, brx) = crossbeam_channel::unbounded();
    let id = next_id();
    let counter = Arc::new(AtomicU64::new(0));
    (
        LoopbackConnection {
            id,
            tx: atx,
            rx: brx,
            bytes_sent: counter.clone(),
        },
        LoopbackConnection {
            id,
            tx: btx,
            rx: arx,
            bytes_sent: counter,
        },
    )
}

impl LoopbackConnection {
    /// Framed bytes sent in both directions.
    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent.load(Ordering::Relaxed)
    }
}

impl Connection for LoopbackConnection {
    fn send(&mut self, payload: &[u8]) -> io::Result<()> {
        if payload.len() > MAX_FRAME {
            return Err(io::Error::new(ErrorKind::InvalidInput, "frame too large"));
        }
        self.bytes_sent
            .fetch_add(4 + payload.len() as u64, Ordering::Relaxed);
        self.tx
            .send(payload.to_vec())
            .map_err(|_| io::Error::new(ErrorKind::BrokenPipe, "peer closed"))
    }

    fn try_recv(&mut self) -> io::Result<Option<Vec<u8>>> {
        match self.rx.try_recv() {
            Ok(f) => Ok(Some(f)),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => {
                Err(io::Error::new(ErrorKind::ConnectionReset, "peer closed"))
            }
        }
    }

    fn id(&self) -> u64 {
        self.id
    }

    fn recv_timeout(&mut self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        match self.rx.recv_timeout(timeout) {
            Ok(f) => Ok(Some(f)),
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => Ok(None),
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => {
                Err(io::Error::new(ErrorKind::ConnectionReset, "peer closed"))
            }
        }
    }
}

/// In-process listener: `connect` hands the server end to whoever accepts.
#[derive(Clone)]
pub struct LoopbackListener {
    tx: Sender<LoopbackConnection>,
    rx: Receiver<LoopbackConnection>,
}

impl Default for LoopbackListener {
    fn default() -> Self {
        let (tx, rx) = crossbeam_channel::unbounded();
        LoopbackListener { tx, rx }
    }
}

impl std::fmt::Debug for LoopbackListener {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LoopbackListener({} queued)", self.rx.len())
    }
}

impl LoopbackListener {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn connect(&self) -> LoopbackConnection {
        let (client, server) = loopback_pair();
        let _ = self.tx.send(server);
        client
    }
}

impl Acceptor for LoopbackListener {
    fn try_accept(&self) -> io::Result<Option<Box<dyn Connection>>> {
        Ok(self
            .rx
            .try_recv()
            .ok()
            .map(|c| Box::new(c) as Box<dyn Connection>))
    }
}

// ---- TCP ----

#[derive(Debug)]
pub struct TcpConnection {
    id: u64,
    stream: TcpStream,
    rbuf: Vec<u8>,
}

impl TcpConnection {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        Self::from_stream(TcpStream::connect(addr)?)
    }

    pub fn from_stream(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        stream.set_nonblocking(true)?;
        Ok(TcpConnection {
            id: next_id(),
            stream,
            rbuf: Vec::new(),
        })
    }

    pub fn peer_addr(&self) -> io::Result<SocketAddr> {
        self.stream.peer_addr()
    }

    fn take_frame(&mut self) -> io::Result<Option<Vec<u8>>> {
        if self.rbuf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_le_bytes(self.rbuf[..4].try_into().unwrap()) as usize;
        if len > MAX_FRAME {
            return Err(io::Error::new(ErrorKind::InvalidData, "frame too large"));
        }
        if self.rbuf.len() < 4 + len {
            return Ok(None);
        }
        let frame = self.rbuf[4..4 + len].to_vec();
        self.rbuf.drain(..4 + len);
        Ok(Some(frame))
    }
}

impl Connection for TcpConnection {
    fn send(&mut self, payload: &[u8]) -> io::Result<()> {
        let mut buf = Vec::with_capacity(4 + payload.len());
        buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        buf.extend_from_slice(payload);
        let mut off = 0;
        while off < buf.len() {
            match self.stream.write(&buf[off..]) {
                Ok(0) => return Err(io::Error::new(ErrorKind::WriteZero, "peer closed")),
                Ok(n) => off += n,
                Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::yield_now(),
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    fn try_recv(&mut self) -> io::Result<Option<Vec<u8>>> {
        if let Some(f) = self.take_frame()? {
            return Ok(Some(f));
        }
        let mut chunk = [0u8; 64 * 1024];
        loop {
            match self.stream.read(&mut chunk) {
                Ok(0) => return Err(io::Error::new(ErrorKind::ConnectionReset, "peer closed")),
                Ok(n) => {
                    self.rbuf.extend_from_slice(&chunk[..n]);
                    if n < chunk.len() {
                        break;
                    }
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        self.take_frame()
    }

    fn id(&self) -> u64 {
        self.id
    }
}

#[derive(Debug)]
pub struct TcpAcceptor {
    listener: TcpListener,
}

impl TcpAcceptor {
    pub fn bind(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(TcpAcceptor { listener })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }
}

impl Acceptor for TcpAcceptor {
    fn try_accept(&self) -> io::Result<Option<Box<dyn Connection>>> {
        match self.listener.accept() {
            Ok((s, _)) => Ok(Some(Box::new(TcpConnection::from_stream(s)?))),
            Err(e) if e.kind() == ErrorKind::WouldBlock => Ok(None),
            Err(e) => Err(e),
        }
    }
}
