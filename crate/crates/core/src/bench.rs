//! Workload generation and scripted migration experiments.
//!
//! A run loads records into an in-process [`Cluster`], drives it from a set
//! of client threads, fires the events of an [`ExperimentScript`] at their
//! offsets and samples cluster counters into [`Row`]s, written as CSV.

use std::fmt;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Zipf};
use serde::Deserialize;
use thiserror::Error;

use crate::client::{ClientConfig, ClientError, Outcome, Request};
use crate::cluster::Cluster;
use crate::metadata::{Metadata, MigrationId};
use crate::ownership::{HashRange, OwnershipMap, RangeSet, ServerId};
use crate::server::{storage_reads, Phase, ServerError};
use crate::store::{Op, StoreError, WalkMode};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad workload: {0}")]
    Workload(String),
    #[error("bad script: {0}")]
    Script(String),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

// ---------------------------------------------------------------------------
// workloads

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyDist {
    Zipfian { theta: f64 },
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpMix {
    /// Increment a counter (YCSB-F style read-modify-write).
    Rmw,
    Read,
    Upsert,
    /// Upserts of keys past the loaded records, each key once.
    InsertOnly,
}

impl FromStr for OpMix {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rmw" | "ycsb-f" => Ok(OpMix::Rmw),
            "read" => Ok(OpMix::Read),
            "upsert" => Ok(OpMix::Upsert),
            "insert" | "insert-only" => Ok(OpMix::InsertOnly),
            _ => Err(HarnessError::Workload(format!("unknown op mix {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    pub records: u64,
    pub dist: KeyDist,
    pub mix: OpMix,
    pub value_size: usize,
    pub threads: usize,
    /// Run length; with `ops` set, an upper bound.
    pub duration: Duration,
    /// Total requests across threads; `None` runs for `duration`.
    pub ops: Option<u64>,
    pub seed: u64,
    pub client: ClientConfig,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            records: 1_000_000,
            dist: KeyDist::Zipfian { theta: 0.99 },
            mix: OpMix::Rmw,
            value_size: 256,
            threads: 4,
            duration: Duration::from_secs(10),
            ops: None,
            seed: 1,
            client: ClientConfig::default(),
        }
    }
}

/// Zipfian ranks in `1..=n` with `P(k) ∝ 1/k^θ`, drawn by rejection-inversion.
#[derive(Debug, Clone)]
pub struct Zipfian {
    n: u64,
    dist: Zipf<f64>,
}

impl Zipfian {
    pub fn new(n: u64, theta: f64) -> Result<Self, HarnessError> {
        let dist = Zipf::new(n as f64, theta).map_err(|e| HarnessError::Workload(e.to_string()))?;
        Ok(Zipfian { n, dist })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn next_rank<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        (self.dist.sample(rng) as u64).clamp(1, self.n)
    }

    /// Closed-form `P(rank)`.
    pub fn probability(n: u64, theta: f64, rank: u64) -> f64 {
        let norm: f64 = (1..=n).map(|k| (k as f64).powf(-theta)).sum();
        (rank as f64).powf(-theta) / norm
    }
}

/// Fixed bijection on `0..n`: `x -> (a*x + b) mod n` with `gcd(a, n) = 1`.
/// Spreads popular ranks over the key space (and so over the hash ranges).
#[derive(Debug, Clone, Copy)]
pub struct Permutation {
    n: u64,
    a: u64,
    b: u64,
}

impl Permutation {
    pub fn new(n: u64) -> Self {
        assert!(n > 0);
        let gcd = |mut x: u64, mut y: u64| {
            while y != 0 {
                (x, y) = (y, x % y);
            }
            x
        };
        let mut a = (0x9e37_79b9_7f4a_7c15 % n).max(1);
        while gcd(a, n) != 1 {
            a += 1;
        }
        Permutation {
            n,
            a,
            b: 0x2545_f491_4f6c_dd1d % n,
        }
    }

    #[inline]
    pub fn apply(&self, x: u64) -> u64 {
        ((self.a as u128 * x as u128 + self.b as u128) % self.n as u128) as u64
    }
}

enum Chooser {
    Zipf(Zipfian, Permutation),
    Uniform(u64),
}

/// Deterministic request stream of one client thread.
pub struct OpStream {
    rng: StdRng,
    chooser: Chooser,
    mix: OpMix,
    value: Vec<u8>,
    records: u64,
    thread: u64,
    threads: u64,
    inserted: u64,
}

impl fmt::Debug for OpStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "OpStream(thread {})", self.thread)
    }
}

impl OpStream {
    pub fn new(spec: &WorkloadSpec, thread: usize) -> Result<Self, HarnessError> {
        if spec.records == 0 {
            return Err(HarnessError::Workload("no records".into()));
        }
        let chooser = match spec.dist {
            KeyDist::Zipfian { theta } => Chooser::Zipf(Zipfian::new(spec.records, theta)?, Permutation::new(spec.records)),
            KeyDist::Uniform => Chooser::Uniform(spec.records),
        };
        let seed = spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ thread as u64;
        Ok(OpStream {
            rng: StdRng::seed_from_u64(seed),
            chooser,
            mix: spec.mix,
            value: vec![0; spec.value_size.max(8)],
            records: spec.records,
            thread: thread as u64,
            threads: spec.threads.max(1) as u64,
            inserted: 0,
        })
    }

    pub fn next_key(&mut self) -> u64 {
        match &self.chooser {
            Chooser::Zipf(z, p) => p.apply(z.next_rank(&mut self.rng) - 1),
            Chooser::Uniform(n) => self.rng.random_range(0..*n),
        }
    }

    pub fn next_request(&mut self) -> Request {
        match self.mix {
            OpMix::Rmw => Request::RmwAdd(self.next_key(), 1),
            OpMix::Read => Request::Read(self.next_key()),
            OpMix::Upsert => {
                let k = self.next_key();
                Request::Upsert(k, self.value.clone())
            }
            OpMix::InsertOnly => {
                let k = self.records + self.inserted * self.threads + self.thread;
                self.inserted += 1;
                Request::Upsert(k, self.value.clone())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// scripts

#[derive(Debug, Clone, PartialEq)]
pub enum RangeSpec {
    /// Slice of the source's owned hash space, as fractions of its size.
    Share { fraction: f64, offset: f64 },
    Explicit(Vec<HashRange>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Migrate {
        source: ServerId,
        target: ServerId,
        ranges: RangeSpec,
        mode: WalkMode,
    },
    /// Cancels the most recent migration.
    Cancel,
    /// Stops the target of the most recent migration.
    KillTarget,
    Compact {
        server: ServerId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trigger {
    /// Offset from the start of the run.
    At(Duration),
    /// Share of the run's `ops` acknowledged.
    Progress(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptEvent {
    pub trigger: Trigger,
    /// Additionally wait for the source of the latest migration to reach
    /// this phase.
    pub phase: Option<Phase>,
    pub action: Action,
}

/// Events, read from TOML and fired in file order, each once its trigger
/// holds:
///
/// ```toml
/// [[event]]
/// at = 5.0              # seconds after the run starts; or
/// # progress = 0.5      # share of `ops` acknowledged
/// action = "migrate"
/// source = 1
/// target = 2
/// fraction = 0.1        # share of the source's hash space; or
/// # ranges = ["0x0:0x1000000000000000"]
/// mode = "indirection"  # or "scan"
///
/// [[event]]
/// at = 6.0
/// phase = "migrate"     # optional: also wait for the source's phase
/// action = "cancel"     # also "kill-target", "compact" (with `server`)
/// ```
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentScript {
    pub events: Vec<ScriptEvent>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScript {
    #[serde(default)]
    event: Vec<RawEvent>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    at: Option<f64>,
    progress: Option<f64>,
    phase: Option<String>,
    action: String,
    source: Option<ServerId>,
    target: Option<ServerId>,
    fraction: Option<f64>,
    offset: Option<f64>,
    ranges: Option<Vec<String>>,
    mode: Option<String>,
    server: Option<ServerId>,
}

impl FromStr for ExperimentScript {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let raw: RawScript = toml::from_str(s).map_err(|e| HarnessError::Script(e.to_string()))?;
        let mut events = Vec::with_capacity(raw.event.len());
        for (i, e) in raw.event.into_iter().enumerate() {
            let bad = |m: &str| HarnessError::Script(format!("event {}: {m}", i + 1));
            let trigger = match (e.at, e.progress) {
                (Some(at), None) if at >= 0.0 && at.is_finite() => Trigger::At(Duration::from_secs_f64(at)),
                (None, Some(p)) if (0.0..=1.0).contains(&p) => Trigger::Progress(p),
                (Some(_), None) => return Err(bad("`at` must be a non-negative number of seconds")),
                (None, Some(_)) => return Err(bad("`progress` must be within 0..=1")),
                _ => return Err(bad("need exactly one of `at` or `progress`")),
            };
            let phase = match e.phase.as_deref() {
                None => None,
                Some(name) => Some(
                    [Phase::Sampling, Phase::Prepare, Phase::Transfer, Phase::Migrate, Phase::Complete]
                        .into_iter()
                        .find(|p| p.name() == name)
                        .ok_or_else(|| bad(&format!("unknown phase {name:?}")))?,
                ),
            };
            let action = match e.action.as_str() {
                "migrate" => {
                    let (Some(source), Some(target)) = (e.source, e.target) else {
                        return Err(bad("migrate needs `source` and `target`"));
                    };
                    let ranges = match (e.fraction, e.ranges) {
                        (Some(fraction), None) => {
                            let offset = e.offset.unwrap_or(0.0);
                            if !(fraction > 0.0 && offset >= 0.0 && fraction + offset <= 1.0) {
                                return Err(bad("need 0 < fraction and fraction + offset <= 1"));
                            }
                            RangeSpec::Share { fraction, offset }
                        }
                        (None, Some(rs)) if !rs.is_empty() => RangeSpec::Explicit(
                            rs.iter()
                                .map(|r| r.parse::<HashRange>())
                                .collect::<Result<_, _>>()
                                .map_err(|err| bad(&err.to_string()))?,
                        ),
                        _ => return Err(bad("migrate needs exactly one of `fraction` or `ranges`")),
                    };
                    let mode = match e.mode.as_deref().unwrap_or("indirection") {
                        "indirection" => WalkMode::Indirection,
                        "scan" | "scanlog" => WalkMode::ScanLog,
                        m => return Err(bad(&format!("unknown mode {m:?}"))),
                    };
                    Action::Migrate {
                        source,
                        target,
                        ranges,
                        mode,
                    }
                }
                "cancel" => Action::Cancel,
                "kill-target" => Action::KillTarget,
                "compact" => Action::Compact {
                    server: e.server.ok_or_else(|| bad("compact needs `server`"))?,
                },
                a => return Err(bad(&format!("unknown action {a:?}"))),
            };
            events.push(ScriptEvent { trigger, phase, action });
        }
        Ok(ExperimentScript { events })
    }
}

impl ExperimentScript {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        std::fs::read_to_string(path)?.parse()
    }

    /// Source and target of the first migration, if any.
    pub fn first_migration(&self) -> Option<(ServerId, ServerId)> {
        self.events.iter().find_map(|e| match e.action {
            Action::Migrate { source, target, .. } => Some((source, target)),
            _ => None,
        })
    }
}

/// The sub-ranges of `owned` between `offset` and `offset + fraction` of its
/// total size.
pub fn share_of(owned: &RangeSet, fraction: f64, offset: f64) -> Vec<HashRange> {
    let total: u128 = owned.ranges().iter().map(|r| r.len()).sum();
    let start = (total as f64 * offset) as u128;
    let end = ((total as f64 * (offset + fraction)) as u128).clamp(start + 1, total);
    let mut out = Vec::new();
    let mut base = 0u128;
    for r in owned.ranges() {
        let (lo, hi) = (start.max(base), end.min(base + r.len()));
        if lo < hi {
            let a = r.lo as u128 + (lo - base);
            let b = r.lo as u128 + (hi - base);
            out.push(HashRange {
                lo: a as u64,
                hi: if b == 1 << 64 { 0 } else { b as u64 },
            });
        }
        base += r.len();
    }
    out
}

// ---------------------------------------------------------------------------
// runs

/// One sample interval.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Row {
    /// End of the interval, seconds since the run started.
    pub second: f64,
    /// Requests acknowledged to the harness in the interval.
    pub total_ops: u64,
    pub source_ops: u64,
    pub target_ops: u64,
    /// Requests waiting at servers at the end of the interval.
    pub pending_count: u64,
    /// Server events in the interval, `;`-separated.
    pub phase_marks: String,
    pub bytes_sent: u64,
    pub disk_reads: u64,
    pub shared_tier_reads: u64,
}

pub const CSV_HEADER: &str =
    "second,total_ops,source_ops,target_ops,pending_count,phase_marks,bytes_sent,disk_reads,shared_tier_reads";

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub rows: Vec<Row>,
    /// Completions handed to the harness, all kinds.
    pub acked: u64,
    /// Read-modify-writes acknowledged with a value.
    pub acked_rmw: u64,
    /// Completions carrying an error outcome.
    pub failed: u64,
    pub migrations: Vec<MigrationId>,
    /// One line per executed script event.
    pub actions: Vec<String>,
    /// Client threads that stopped on an error.
    pub errors: Vec<String>,
    pub elapsed: Duration,
}

impl Report {
    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{:.3},{},{},{},{},{},{},{},{}",
                r.second,
                r.total_ops,
                r.source_ops,
                r.target_ops,
                r.pending_count,
                r.phase_marks.replace(',', " "),
                r.bytes_sent,
                r.disk_reads,
                r.shared_tier_reads
            )?;
        }
        Ok(())
    }

    pub fn throughput(&self) -> f64 {
        self.acked as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

/// Writes every record to its owner's store. Afterwards the share
/// `cold_fraction` of keys lives only on storage (local disk and the shared
/// tier); the rest has a fresh in-memory version.
pub fn load(cluster: &Cluster, spec: &WorkloadSpec, cold_fraction: f64) -> Result<(), HarnessError> {
    let map = cluster.metadata.get_ownership().map_err(ServerError::from)?;
    let value = vec![0u8; spec.value_size.max(8)];
    let mut sessions = std::collections::BTreeMap::new();
    let mut put = |k: u64, map: &OwnershipMap| -> Result<(), HarnessError> {
        let (owner, _) = map.owner_of_key(k);
        if let std::collections::btree_map::Entry::Vacant(e) = sessions.entry(owner) {
            e.insert(cluster.session(owner)?);
        }
        sessions.get_mut(&owner).unwrap().execute_blocking(k, Op::Upsert(value.clone()))?;
        Ok(())
    };
    for k in 0..spec.records {
        put(k, &map)?;
    }
    if cold_fraction > 0.0 {
        for s in cluster.servers() {
            let log = s.store().log();
            let tail = log.evict_all().map_err(StoreError::from)?;
            log.flush_to_shared(tail).map_err(StoreError::from)?;
        }
        let hot = ((1.0 - cold_fraction).clamp(0.0, 1.0) * 1000.0) as u64;
        for k in (0..spec.records).filter(|k| k % 1000 < hot) {
            put(k, &map)?;
        }
    }
    Ok(())
}

/// Whether `key` was left on storage only by [`load`].
pub fn is_cold(key: u64, cold_fraction: f64) -> bool {
    key % 1000 >= ((1.0 - cold_fraction).clamp(0.0, 1.0) * 1000.0) as u64
}

struct ThreadResult {
    acked: u64,
    acked_rmw: u64,
    failed: u64,
    error: Option<String>,
}

fn client_thread(cluster: &Cluster, spec: &WorkloadSpec, thread: usize, stop: &AtomicBool, acked: &AtomicU64) -> ThreadResult {
    let mut quota = spec.ops.map(|n| {
        let t = spec.threads as u64;
        n / t + u64::from((thread as u64) < n % t)
    });
    let mut out = ThreadResult {
        acked: 0,
        acked_rmw: 0,
        failed: 0,
        error: None,
    };
    let count = |done: Vec<crate::client::Completed>, out: &mut ThreadResult| {
        for d in &done {
            match (&d.request, &d.outcome) {
                (_, Outcome::Error(_)) => out.failed += 1,
                (Request::RmwAdd(..), Outcome::Value(_)) => out.acked_rmw += 1,
                _ => {}
            }
        }
        out.acked += done.len() as u64;
        acked.fetch_add(done.len() as u64, Ordering::Relaxed);
    };
    let mut run = |out: &mut ThreadResult| -> Result<(), HarnessError> {
        let mut ops = OpStream::new(spec, thread)?;
        let mut client = cluster.client(spec.client.clone())?;
        let mut next = None;
        while !stop.load(Ordering::Relaxed) && quota != Some(0) {
            for _ in 0..64 {
                if quota == Some(0) {
                    break;
                }
                let r = next.take().unwrap_or_else(|| ops.next_request());
                match client.issue(r.clone()) {
                    Ok(_) => {
                        if let Some(q) = quota.as_mut() {
                            *q -= 1;
                        }
                    }
                    Err(ClientError::Backpressure) => {
                        next = Some(r);
                        break;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            count(client.poll()?, out);
        }
        count(client.drain(Duration::from_secs(30))?, out);
        if client.outstanding() > 0 {
            return Err(HarnessError::Workload(format!("{} requests never completed", client.outstanding())));
        }
        Ok(())
    };
    if let Err(e) = run(&mut out) {
        out.error = Some(format!("thread {thread}: {e}"));
    }
    out
}

struct ScriptCtx<'a> {
    cluster: &'a Cluster,
    start: Instant,
    stop: &'a AtomicBool,
    acked: &'a AtomicU64,
    total_ops: Option<u64>,
    report: &'a Mutex<(Vec<MigrationId>, Vec<String>)>,
}

fn run_script(script: &ExperimentScript, cx: ScriptCtx<'_>) {
    let ScriptCtx {
        cluster,
        start,
        stop,
        acked,
        total_ops,
        report,
    } = cx;
    let mut last: Option<(ServerId, ServerId, MigrationId)> = None;
    for e in &script.events {
        let due = || match e.trigger {
            Trigger::At(at) => start.elapsed() >= at,
            Trigger::Progress(p) => total_ops.is_some_and(|n| acked.load(Ordering::Relaxed) as f64 >= p * n as f64),
        };
        let in_phase = || match (e.phase, last) {
            (Some(phase), Some((source, _, _))) => cluster.server(source).phase() == phase,
            _ => true,
        };
        while !(due() && in_phase()) {
            if stop.load(Ordering::Relaxed) {
                return;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
        let t = start.elapsed().as_secs_f64();
        let result: Result<String, HarnessError> = match &e.action {
            Action::Migrate {
                source,
                target,
                ranges,
                mode,
            } => (|| {
                let ranges = match ranges {
                    RangeSpec::Explicit(r) => r.clone(),
                    RangeSpec::Share { fraction, offset } => {
                        let map = cluster.metadata.get_ownership().map_err(ServerError::from)?;
                        share_of(&map.ranges_of(*source), *fraction, *offset)
                    }
                };
                let id = cluster.migrate(*source, *target, ranges.clone(), *mode)?;
                last = Some((*source, *target, id));
                report.lock().0.push(id);
                Ok(format!("migration {id} of {ranges:?}"))
            })(),
            Action::Cancel => match last {
                Some((source, _, id)) => cluster.cancel(source, id).map_err(Into::into),
                None => Err(HarnessError::Script("cancel before any migration".into())),
            },
            Action::KillTarget => match last {
                Some((_, target, _)) => {
                    cluster.kill(target);
                    Ok(format!("server {target} stopped"))
                }
                None => Err(HarnessError::Script("kill-target before any migration".into())),
            },
            Action::Compact { server } => cluster.compact(*server).map_err(Into::into),
        };
        let line = match result {
            Ok(m) => format!("{t:.3} {:?}: {m}", e.action),
            Err(err) => format!("{t:.3} {:?}: failed: {err}", e.action),
        };
        report.lock().1.push(line);
    }
}

#[derive(Default)]
struct Totals {
    source_ops: u64,
    target_ops: u64,
    bytes: u64,
    disk: u64,
    shared: u64,
    acked: u64,
    event_us: u64,
}

fn totals(cluster: &Cluster, pair: Option<(ServerId, ServerId)>, acked: u64) -> (Totals, u64, Vec<(u64, String)>) {
    let mut t = Totals {
        acked,
        ..Totals::default()
    };
    let mut pending = 0;
    let mut events = Vec::new();
    for s in cluster.servers() {
        let m = s.metrics();
        if let Some((src, dst)) = pair {
            if s.id() == src {
                t.source_ops = m.ops;
            }
            if s.id() == dst {
                t.target_ops = m.ops;
            }
        }
        pending += m.pending_now;
        t.bytes += m.migration_bytes;
        let (local, shared) = storage_reads(s.store());
        t.disk += local;
        t.shared += shared;
        events.extend(s.events().into_iter().map(|e| (e.at_us, format!("{}@{}", e.what, e.server))));
    }
    (t, pending, events)
}

/// Runs `spec` against a started cluster while firing `script`, sampling
/// every `interval`.
pub fn run_experiment(
    cluster: &Arc<Cluster>,
    spec: &WorkloadSpec,
    script: &ExperimentScript,
    interval: Duration,
) -> Result<Report, HarnessError> {
    if spec.threads == 0 {
        return Err(HarnessError::Workload("no client threads".into()));
    }
    let pair = script.first_migration();
    let stop = Arc::new(AtomicBool::new(false));
    let finished = Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let acked = Arc::new(AtomicU64::new(0));
    let script_log = Arc::new(Mutex::new((Vec::new(), Vec::new())));
    let start = Instant::now();
    let base_us = cluster.clock.now_us();

    let clients: Vec<_> = (0..spec.threads)
        .map(|t| {
            let (c, spec, stop, acked, finished) =
                (cluster.clone(), spec.clone(), stop.clone(), acked.clone(), finished.clone());
            std::thread::Builder::new()
                .name(format!("bench-client-{t}"))
                .spawn(move || {
                    let r = client_thread(&c, &spec, t, &stop, &acked);
                    finished.fetch_add(1, Ordering::Release);
                    r
                })
                .expect("spawn client thread")
        })
        .collect();
    let scripter = {
        let (c, script, stop, log, acked) =
            (cluster.clone(), script.clone(), stop.clone(), script_log.clone(), acked.clone());
        let total_ops = spec.ops;
        std::thread::Builder::new()
            .name("bench-script".into())
            .spawn(move || {
                run_script(
                    &script,
                    ScriptCtx {
                        cluster: &c,
                        start,
                        stop: &stop,
                        acked: &acked,
                        total_ops,
                        report: &log,
                    },
                )
            })
            .expect("spawn script thread")
    };

    let mut rows = Vec::new();
    let (mut prev, _, _) = totals(cluster, pair, 0);
    prev.event_us = base_us;
    let mut sample = |prev: &mut Totals, second: f64| {
        let (mut now, pending, events) = totals(cluster, pair, acked.load(Ordering::Relaxed));
        now.event_us = cluster.clock.now_us();
        let mut marks: Vec<_> = events
            .into_iter()
            .filter(|(at, _)| *at > prev.event_us && *at <= now.event_us)
            .collect();
        marks.sort();
        rows.push(Row {
            second,
            total_ops: now.acked - prev.acked,
            source_ops: now.source_ops - prev.source_ops,
            target_ops: now.target_ops - prev.target_ops,
            pending_count: pending,
            phase_marks: marks.into_iter().map(|(_, m)| m).collect::<Vec<_>>().join(";"),
            bytes_sent: now.bytes - prev.bytes,
            disk_reads: now.disk - prev.disk,
            shared_tier_reads: now.shared - prev.shared,
        });
        *prev = now;
    };
    let mut tick = 1u32;
    let all_done = || finished.load(Ordering::Acquire) == spec.threads;
    while start.elapsed() < spec.duration && !all_done() {
        let due = interval * tick;
        let wait = due.min(spec.duration).saturating_sub(start.elapsed());
        std::thread::sleep(wait.min(Duration::from_millis(5)));
        if start.elapsed() >= due {
            sample(&mut prev, start.elapsed().as_secs_f64());
            tick += 1;
        }
    }
    stop.store(true, Ordering::Relaxed);
    let results: Vec<ThreadResult> = clients.into_iter().map(|h| h.join().expect("client thread panicked")).collect();
    let _ = scripter.join();
    let elapsed = start.elapsed();
    sample(&mut prev, elapsed.as_secs_f64());

    let (migrations, actions) = std::mem::take(&mut *script_log.lock());
    Ok(Report {
        rows,
        acked: results.iter().map(|r| r.acked).sum(),
        acked_rmw: results.iter().map(|r| r.acked_rmw).sum(),
        failed: results.iter().map(|r| r.failed).sum(),
        migrations,
        actions,
        errors: results.into_iter().filter_map(|r| r.error).collect(),
        elapsed,
    })
}
