//! End-to-end acceptance checks. Each test writes one `[PASS]`/`[FAIL]` line
//! to stderr (outside the test harness's capture) before asserting.

use std::collections::{HashMap, HashSet};
use std::hint::black_box;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicPtr, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use shadowkv::bench::{self, ExperimentScript, KeyDist, OpMix, Report, WorkloadSpec, Zipfian};
use shadowkv::client::{Client, ClientConfig, ClientError, Outcome, Request};
use shadowkv::cluster::{Cluster, ClusterConfig};
use shadowkv::epoch::EpochManager;
use shadowkv::hash::key_hash;
use shadowkv::index::IndexConfig;
use shadowkv::metadata::Metadata;
use shadowkv::ownership::{validate_hash_per_key, validate_view, HashRange, RangeSet};
use shadowkv::server::{storage_reads, Phase, ServerConfig};
use shadowkv::shared_tier::MemSharedTier;
use shadowkv::store::{Op, WalkMode};
use shadowkv::wire::{frame_magic, BatchStatus, Control, Opcode, RequestBatch, ResponseBatch, WireRequest, CONTROL_MAGIC};
use shadowkv::StoreConfig;

fn verdict(name: &str, ok: bool, detail: impl AsRef<str>) {
    let line = format!("[{}] {name}: {}\n", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{name}: {}", detail.as_ref());
}

struct Setup {
    servers: Vec<u32>,
    empty: Vec<u32>,
    threads: usize,
    page_bits: u32,
    memory_pages: u64,
    buckets: u64,
    value_bytes: usize,
    server: fn(&mut ServerConfig),
}

impl Default for Setup {
    fn default() -> Self {
        Setup {
            servers: vec![1, 2],
            empty: vec![2],
            threads: 4,
            page_bits: 18,
            memory_pages: 128,
            buckets: 1 << 15,
            value_bytes: 256,
            server: |_| {},
        }
    }
}

fn cluster(dir: &Path, s: &Setup) -> Cluster {
    let mut store = StoreConfig::new(0, dir);
    store.log.page_bits = s.page_bits;
    store.log.memory_pages = s.memory_pages;
    store.index = IndexConfig::new(s.buckets);
    store.max_value_bytes = s.value_bytes.max(8);
    let mut server = ServerConfig::new(0, s.threads);
    (s.server)(&mut server);
    let cfg = ClusterConfig {
        servers: s.servers.clone(),
        empty: s.empty.clone(),
        dir: dir.to_path_buf(),
        store,
        server,
    };
    Cluster::new(cfg, Arc::new(MemSharedTier::new(1 << s.page_bits))).unwrap()
}

fn counter(v: &[u8]) -> u64 {
    u64::from_le_bytes(v[..8].try_into().unwrap())
}

/// Reads `keys` through a pipelined client.
fn read_all(c: &Cluster, keys: &[u64]) -> HashMap<u64, Outcome> {
    let mut client = c.client(ClientConfig::default()).unwrap();
    let mut out = HashMap::with_capacity(keys.len());
    let mut next = 0;
    let deadline = Instant::now() + Duration::from_secs(120);
    while out.len() < keys.len() {
        assert!(Instant::now() < deadline, "reads stalled at {}/{}", out.len(), keys.len());
        while next < keys.len() {
            match client.issue(Request::Read(keys[next])) {
                Ok(_) => next += 1,
                Err(ClientError::Backpressure) => break,
                Err(e) => panic!("{e}"),
            }
        }
        for d in client.poll().unwrap() {
            out.insert(d.request.key(), d.outcome);
        }
    }
    out
}

fn sum_counters(c: &Cluster, records: u64) -> u64 {
    let keys: Vec<u64> = (0..records).collect();
    read_all(c, &keys)
        .into_values()
        .map(|o| match o {
            Outcome::Value(v) => counter(&v),
            other => panic!("unexpected {other:?}"),
        })
        .sum()
}

/// Distinct content per key and version.
fn value_of(key: u64, version: u64, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    let mut x = key.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ version.wrapping_mul(0xd1b5_4a32_d192_ed03);
    for chunk in v.chunks_mut(8) {
        x ^= x >> 29;
        x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        chunk.copy_from_slice(&x.to_le_bytes()[..chunk.len()]);
    }
    v
}

/// Loads `records` keys onto server 1: every key at version 0, all of it
/// evicted to disk and copied to the shared tier, then even keys rewritten
/// at version 1 so half the data is memory resident. Returns the oracle.
fn load_half_cold(c: &Cluster, records: u64, len: usize) -> HashMap<u64, Vec<u8>> {
    let mut s = c.session(1).unwrap();
    let mut oracle = HashMap::new();
    for k in 0..records {
        let v = value_of(k, 0, len);
        s.execute_blocking(k, Op::Upsert(v.clone())).unwrap();
        oracle.insert(k, v);
    }
    let log = c.store(1).log();
    let tail = log.evict_all().unwrap();
    log.flush_to_shared(tail).unwrap();
    for k in (0..records).step_by(2) {
        let v = value_of(k, 1, len);
        s.execute_blocking(k, Op::Upsert(v.clone())).unwrap();
        oracle.insert(k, v);
    }
    oracle
}

fn in_ranges(ranges: &[HashRange], key: u64) -> bool {
    let h = key_hash(key);
    ranges.iter().any(|r| r.contains(h))
}

fn settle(c: &Cluster, id: u64) {
    assert!(c.wait_settled(id, Duration::from_secs(120)).unwrap(), "migration {id} did not settle");
}

// ---------------------------------------------------------------------------

fn counting_run(cancel: bool) -> (Report, u64, bool, Duration) {
    const KEYS: u64 = 100_000;
    const OPS: u64 = 1_000_000;
    let dir = tempfile::tempdir().unwrap();
    let setup = Setup {
        value_bytes: 8,
        server: if cancel {
            |s: &mut ServerConfig| {
                s.migrate_chunk_buckets = 16;
                s.migrate_throttle = Some(Duration::from_millis(5));
            }
        } else {
            |_: &mut ServerConfig| {}
        },
        ..Setup::default()
    };
    let mut c = cluster(dir.path(), &setup);
    let spec = WorkloadSpec {
        records: KEYS,
        dist: KeyDist::Zipfian { theta: 0.99 },
        mix: OpMix::Rmw,
        value_size: 8,
        threads: 8,
        duration: Duration::from_secs(600),
        ops: Some(OPS),
        seed: 11,
        client: ClientConfig::default(),
    };
    bench::load(&c, &spec, 0.0).unwrap();
    c.start().unwrap();
    let c = Arc::new(c);
    let mut script = String::from("[[event]]\nprogress = 0.5\naction = \"migrate\"\nsource = 1\ntarget = 2\nfraction = 0.1\n");
    if cancel {
        script.push_str("[[event]]\nprogress = 0.5\nphase = \"migrate\"\naction = \"cancel\"\n");
    }
    let script: ExperimentScript = script.parse().unwrap();
    let start = Instant::now();
    let report = bench::run_experiment(&c, &spec, &script, Duration::from_secs(1)).unwrap();
    let id = *report.migrations.first().expect("migration was started");
    settle(&c, id);
    let elapsed = start.elapsed();
    let d = c.metadata.dependency(id).unwrap();
    let outcome = match d {
        Some(d) if cancel => d.cancelled,
        Some(d) => d.committed(),
        // swept: committed and cleaned up; a cancelled one stays reverted
        None => !cancel,
    };
    let sum = sum_counters(&c, KEYS);
    (report, sum, outcome, elapsed)
}

#[test]
fn no_lost_updates_under_migration() {
    for cancel in [false, true] {
        let (report, sum, outcome, elapsed) = counting_run(cancel);
        let name = if cancel {
            "no lost updates, migration cancelled mid-transfer"
        } else {
            "no lost updates, migration completed"
        };
        let ok = report.errors.is_empty()
            && report.failed == 0
            && report.acked == 1_000_000
            && sum == report.acked_rmw
            && outcome
            && elapsed < Duration::from_secs(60);
        verdict(
            name,
            ok,
            format!(
                "acked rmw {} counter sum {} migration {} run {:.1}s errors {:?} actions {:?}",
                report.acked_rmw,
                sum,
                if outcome { "as scripted" } else { "NOT as scripted" },
                elapsed.as_secs_f64(),
                report.errors,
                report.actions
            ),
        );
    }
}

#[test]
fn indirection_migration_is_complete() {
    const KEYS: u64 = 20_000;
    let dir = tempfile::tempdir().unwrap();
    let setup = Setup {
        page_bits: 16,
        ..Setup::default()
    };
    let mut c = cluster(dir.path(), &setup);
    let oracle = load_half_cold(&c, KEYS, setup.value_bytes);
    c.start().unwrap();
    let range = HashRange::FULL.prefix(0.5);
    let id = c.migrate(1, 2, vec![range], WalkMode::Indirection).unwrap();
    settle(&c, id);
    let moved: Vec<u64> = (0..KEYS).filter(|&k| in_ranges(&[range], k)).collect();
    let before = c.store(2).stats().indirection_fetches;
    let got = read_all(&c, &moved);
    let via_indirection = c.store(2).stats().indirection_fetches - before;
    let wrong: Vec<u64> = moved
        .iter()
        .copied()
        .filter(|k| got.get(k) != Some(&Outcome::Value(oracle[k].clone())))
        .collect();
    let target_ops = c.server(2).metrics().ops;
    let ok = wrong.is_empty() && via_indirection > 0 && target_ops >= moved.len() as u64;
    verdict(
        "migrated keys read back exactly at the target",
        ok,
        format!(
            "{} keys moved, {} mismatched (first {:?}), {} resolved through indirections",
            moved.len(),
            wrong.len(),
            &wrong[..wrong.len().min(5)],
            via_indirection
        ),
    );
}

struct MigrationCost {
    source_local_reads: u64,
    bytes: u64,
}

fn migration_cost(mode: WalkMode) -> MigrationCost {
    const KEYS: u64 = 20_000;
    let dir = tempfile::tempdir().unwrap();
    let setup = Setup {
        page_bits: 16,
        ..Setup::default()
    };
    let mut c = cluster(dir.path(), &setup);
    load_half_cold(&c, KEYS, setup.value_bytes);
    c.start().unwrap();
    let ranges = bench::share_of(&RangeSet::full(), 0.1, 0.0);
    let (local_before, _) = storage_reads(c.store(1));
    let bytes_before = c.server(1).metrics().migration_bytes;
    let id = c.migrate(1, 2, ranges, mode).unwrap();
    settle(&c, id);
    let (local_after, _) = storage_reads(c.store(1));
    MigrationCost {
        source_local_reads: local_after - local_before,
        bytes: c.server(1).metrics().migration_bytes - bytes_before,
    }
}

#[test]
fn indirection_mode_skips_source_disk() {
    let ind = migration_cost(WalkMode::Indirection);
    let scan = migration_cost(WalkMode::ScanLog);
    verdict(
        "no source disk reads while migrating with indirections",
        ind.source_local_reads == 0 && scan.source_local_reads > 0,
        format!(
            "indirection mode {} local reads, scan mode {}",
            ind.source_local_reads, scan.source_local_reads
        ),
    );
}

#[test]
fn indirection_mode_sends_more_bytes() {
    let ind = migration_cost(WalkMode::Indirection);
    let scan = migration_cost(WalkMode::ScanLog);
    verdict(
        "indirection mode transmits more than log scanning",
        ind.bytes > scan.bytes,
        format!("indirection mode {} bytes, scan mode {} bytes", ind.bytes, scan.bytes),
    );
}

#[test]
fn view_validation_is_one_comparison_per_batch() {
    let dir = tempfile::tempdir().unwrap();
    let setup = Setup {
        empty: vec![],
        value_bytes: 8,
        ..Setup::default()
    };
    let mut c = cluster(dir.path(), &setup);
    let spec = WorkloadSpec {
        records: 10_000,
        value_size: 8,
        threads: 4,
        duration: Duration::from_millis(1500),
        ..WorkloadSpec::default()
    };
    bench::load(&c, &spec, 0.0).unwrap();
    c.start().unwrap();
    let c = Arc::new(c);
    let report = bench::run_experiment(&c, &spec, &ExperimentScript::default(), Duration::from_millis(500)).unwrap();
    let mut counts = Vec::new();
    let mut ok = report.acked > 0;
    for s in c.servers() {
        let m = s.metrics();
        ok &= m.batches > 0 && m.view_checks == m.batches && m.range_lookups == 0;
        counts.push((s.id(), m.batches, m.view_checks, m.range_lookups));
    }

    // Microbenchmark against per-key range checks with 512 owned ranges.
    let owned = RangeSet::from_ranges(HashRange::FULL.split(1024).into_iter().step_by(2));
    assert_eq!(owned.len(), 512);
    let mut rng = rand::rngs::StdRng::seed_from_u64(5);
    let keys: Vec<u64> = (0..256).map(|_| rng.random()).collect();
    let rounds = 200_000u32;
    let timed = |f: &mut dyn FnMut() -> bool| {
        let mut best = Duration::MAX;
        for _ in 0..3 {
            let t = Instant::now();
            for _ in 0..rounds {
                black_box(f());
            }
            best = best.min(t.elapsed());
        }
        rounds as f64 / best.as_secs_f64()
    };
    let view_rate = timed(&mut || validate_view(black_box(7), black_box(7)) && !black_box(&keys).is_empty());
    let mut out = Vec::with_capacity(keys.len());
    let hash_rate = timed(&mut || {
        validate_hash_per_key(black_box(&owned), black_box(&keys), &mut out);
        out.iter().all(|&x| x)
    });
    ok &= view_rate >= hash_rate;
    verdict(
        "view validation costs one comparison per batch",
        ok,
        format!(
            "(server, batches, view checks, range lookups) {counts:?}; batches/s view {view_rate:.0} per-key {hash_rate:.0}"
        ),
    );
}

fn exchange(conn: &mut dyn shadowkv::transport::Connection, batch: &RequestBatch) -> ResponseBatch {
    let mut buf = Vec::new();
    batch.encode(&mut buf);
    conn.send(&buf).unwrap();
    loop {
        let f = conn.recv_timeout(Duration::from_secs(10)).unwrap().expect("response");
        if frame_magic(&f) != Some(CONTROL_MAGIC) {
            let r = ResponseBatch::decode(&f).unwrap();
            if r.batch_seq == batch.batch_seq {
                return r;
            }
        }
    }
}

fn write_batch(view: u64, seq: u32, keys: &[u64]) -> RequestBatch {
    RequestBatch {
        session_id: 77 << 16,
        view,
        batch_seq: seq,
        requests: keys
            .iter()
            .flat_map(|&k| {
                [
                    WireRequest {
                        opcode: Opcode::Upsert,
                        key: k,
                        value: 100u64.to_le_bytes().to_vec(),
                    },
                    WireRequest {
                        opcode: Opcode::RmwAdd,
                        key: k,
                        value: 1u64.to_le_bytes().to_vec(),
                    },
                ]
            })
            .collect(),
    }
}

#[test]
fn rejected_batches_execute_nothing_and_complete_once() {
    let mut notes = Vec::new();
    let mut ok = true;

    // Stale and ahead-of-server views against a quiet server.
    {
        let dir = tempfile::tempdir().unwrap();
        let setup = Setup {
            empty: vec![],
            value_bytes: 8,
            ..Setup::default()
        };
        let mut c = cluster(dir.path(), &setup);
        let keys: Vec<u64> = (0..200).filter(|&k| c.metadata_owner(k) == 1).take(50).collect();
        {
            let mut s = c.session(1).unwrap();
            for &k in &keys {
                s.execute_blocking(k, Op::Upsert(5u64.to_le_bytes().to_vec())).unwrap();
            }
        }
        c.start().unwrap();
        let unchanged = |c: &Cluster| {
            let mut s = c.session(1).unwrap();
            keys.iter().all(|&k| {
                matches!(s.execute_blocking(k, Op::Read).unwrap(), shadowkv::store::Status::Found(v) if counter(&v) == 5)
            })
        };
        let view = c.server(1).view().view;
        let mut conn = c.dialer.dial_server(1);
        let ops_before = c.server(1).metrics().ops;
        let r = exchange(conn.as_mut(), &write_batch(view - 1, 1, &keys));
        let stale_ok = r.status == BatchStatus::ViewRejected && r.results.is_empty();
        std::thread::sleep(Duration::from_millis(20));
        let stale_ok = stale_ok && unchanged(&c) && c.server(1).metrics().ops == ops_before;
        notes.push(format!("stale view rejected with nothing executed: {stale_ok}"));
        ok &= stale_ok;

        // The client learns of a new view before the server does.
        c.metadata.add_server(9).unwrap();
        let gone = c.metadata_ranges(1).ranges()[0].prefix(0.01);
        c.metadata.transfer_ranges(1, 9, &[gone]).unwrap();
        let ahead = c.metadata.get_ownership().unwrap().view_of(1).unwrap();
        assert!(ahead > view);
        let kept: Vec<u64> = keys.iter().copied().filter(|&k| !in_ranges(&[gone], k)).collect();
        conn.send(&Control::Resync { session_id: 77 << 16 }.encode()).unwrap();
        let r = exchange(conn.as_mut(), &write_batch(ahead, 2, &kept));
        let first_rejected = r.status == BatchStatus::ViewRejected && unchanged(&c);
        let deadline = Instant::now() + Duration::from_secs(5);
        while c.server(1).view().view < ahead && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(1));
        }
        conn.send(&Control::Resync { session_id: 77 << 16 }.encode()).unwrap();
        let r = exchange(conn.as_mut(), &write_batch(ahead, 3, &kept));
        let accepted = r.status == BatchStatus::Ok
            && r.results.len() == kept.len() * 2
            && r.results.iter().skip(1).step_by(2).all(|x| counter(&x.value) == 101);
        notes.push(format!("ahead view rejected {first_rejected}, then refreshed and accepted {accepted}"));
        ok &= first_rejected && accepted;
    }

    // Rejections caused by a live migration: every request completes once.
    {
        let dir = tempfile::tempdir().unwrap();
        let setup = Setup {
            value_bytes: 8,
            ..Setup::default()
        };
        let mut c = cluster(dir.path(), &setup);
        let spec = WorkloadSpec {
            records: 20_000,
            value_size: 8,
            threads: 4,
            duration: Duration::from_secs(120),
            ops: Some(200_000),
            seed: 3,
            ..WorkloadSpec::default()
        };
        bench::load(&c, &spec, 0.0).unwrap();
        c.start().unwrap();
        let c = Arc::new(c);
        let script: ExperimentScript =
            "[[event]]\nprogress = 0.3\naction = \"migrate\"\nsource = 1\ntarget = 2\nfraction = 0.5\n"
                .parse()
                .unwrap();
        let report = bench::run_experiment(&c, &spec, &script, Duration::from_secs(1)).unwrap();
        settle(&c, report.migrations[0]);
        let rejected: u64 = c.servers().map(|s| s.metrics().rejected_batches).sum();
        let sum = sum_counters(&c, spec.records);
        let once = report.errors.is_empty() && report.acked == 200_000 && sum == report.acked_rmw && report.failed == 0;
        notes.push(format!(
            "under migration: {rejected} batches rejected, {} acked, counter sum {sum}",
            report.acked
        ));
        ok &= once && rejected > 0;
    }
    verdict("view-rejected batches are all-or-nothing and reissued once", ok, notes.join("; "));
}

trait ClusterExt {
    fn metadata_owner(&self, key: u64) -> u32;
    fn metadata_ranges(&self, server: u32) -> RangeSet;
}

impl ClusterExt for Cluster {
    fn metadata_owner(&self, key: u64) -> u32 {
        self.metadata.get_ownership().unwrap().owner_of_key(key).0
    }

    fn metadata_ranges(&self, server: u32) -> RangeSet {
        self.metadata.get_ownership().unwrap().ranges_of(server)
    }
}

trait DialExt {
    fn dial_server(&self, id: u32) -> Box<dyn shadowkv::transport::Connection>;
}

impl DialExt for shadowkv::server::LoopbackDialer {
    fn dial_server(&self, id: u32) -> Box<dyn shadowkv::transport::Connection> {
        use shadowkv::server::Dialer;
        self.dial(id).unwrap()
    }
}

// ---------------------------------------------------------------------------

const POISON: u64 = 0xdead_dead_dead_dead;

struct Page {
    words: [AtomicU64; 4],
}

#[test]
fn epoch_reclamation_is_safe_under_stress() {
    const THREADS: usize = 8;
    const BUMPS: usize = 1_000_000;
    const SLOTS: usize = 64;
    let epoch = Arc::new(EpochManager::new(64, 1 << 16));
    let fresh = |v: u64| Box::into_raw(Box::new(Page {
        words: std::array::from_fn(|_| AtomicU64::new(v)),
    }));
    let table: Arc<Vec<AtomicPtr<Page>>> = Arc::new((0..SLOTS).map(|i| AtomicPtr::new(fresh(i as u64))).collect());
    // Retired pages stay allocated until the end so a premature reclaim shows
    // up as a poisoned read rather than a crash.
    let graveyard: Arc<Mutex<Vec<usize>>> = Arc::new(Mutex::new(Vec::new()));
    let runs: Arc<Vec<AtomicU8>> = Arc::new((0..BUMPS).map(|_| AtomicU8::new(0)).collect());
    let registered: Arc<Vec<AtomicU64>> = Arc::new((0..BUMPS).map(|_| AtomicU64::new(0)).collect());
    let order: Arc<Mutex<Vec<usize>>> = Arc::new(Mutex::new(Vec::with_capacity(BUMPS)));
    let bad_reads = Arc::new(AtomicU64::new(0));
    let start = Instant::now();
    let handles: Vec<_> = (0..THREADS)
        .map(|t| {
            let registered = registered.clone();
            let (epoch, table, graveyard, runs, order, bad_reads) = (
                epoch.clone(),
                table.clone(),
                graveyard.clone(),
                runs.clone(),
                order.clone(),
                bad_reads.clone(),
            );
            std::thread::spawn(move || {
                let me = epoch.register().unwrap();
                let mut rng = rand::rngs::StdRng::seed_from_u64(t as u64);
                for i in (t..BUMPS).step_by(THREADS) {
                    epoch.protect(me).unwrap();
                    for _ in 0..4 {
                        let p = table[rng.random_range(0..SLOTS)].load(Ordering::Acquire);
                        // SAFETY: pages are only freed after every thread has exited.
                        let page = unsafe { &*p };
                        if page.words.iter().any(|w| w.load(Ordering::Acquire) == POISON) {
                            bad_reads.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    let slot = rng.random_range(0..SLOTS);
                    let old = table[slot].swap(fresh(i as u64), Ordering::AcqRel) as usize;
                    graveyard.lock().push(old);
                    let (runs, order) = (runs.clone(), order.clone());
                    let prior = epoch.bump_with_action_from(me, move || {
                        // SAFETY: as above; the page is still allocated.
                        let page = unsafe { &*(old as *const Page) };
                        for w in &page.words {
                            w.store(POISON, Ordering::Release);
                        }
                        runs[i].fetch_add(1, Ordering::AcqRel);
                        order.lock().push(i);
                    });
                    registered[i].store(prior, Ordering::Release);
                    epoch.unprotect(me).unwrap();
                }
                epoch.release(me);
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let deadline = Instant::now() + Duration::from_secs(30);
    while epoch.pending_actions() > 0 && Instant::now() < deadline {
        epoch.try_drain();
    }
    let once = runs.iter().all(|r| r.load(Ordering::Acquire) == 1);
    let order = order.lock();
    let ordered = order
        .windows(2)
        .filter(|w| registered[w[0]].load(Ordering::Acquire) > registered[w[1]].load(Ordering::Acquire))
        .count();
    let bad = bad_reads.load(Ordering::Relaxed);
    for p in graveyard.lock().drain(..) {
        // SAFETY: every thread has exited; each page was boxed once.
        drop(unsafe { Box::from_raw(p as *mut Page) });
    }
    for slot in table.iter() {
        drop(unsafe { Box::from_raw(slot.load(Ordering::Acquire)) });
    }
    verdict(
        "epoch actions run once, in order, never under a reader",
        bad == 0 && once && ordered == 0 && order.len() == BUMPS,
        format!(
            "{BUMPS} bumps on {THREADS} threads in {:.1}s: {bad} poisoned reads, {} actions ran, {ordered} out of order",
            start.elapsed().as_secs_f64(),
            order.len()
        ),
    );
}

// ---------------------------------------------------------------------------

fn call_latencies(client: &mut Client, keys: &[u64], n: usize, rng: &mut impl Rng) -> Vec<Duration> {
    (0..n)
        .map(|_| {
            let k = keys[rng.random_range(0..keys.len())];
            let t = Instant::now();
            client.call(Request::RmwAdd(k, 1), Duration::from_secs(10)).unwrap();
            t.elapsed()
        })
        .collect()
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

#[test]
fn sampled_records_are_served_before_bulk_transfer() {
    // Warm-up: hot keys reach the target with ownership.
    let dir = tempfile::tempdir().unwrap();
    let setup = Setup {
        value_bytes: 8,
        server: |s| {
            s.trace_migration = true;
            s.migrate_chunk_buckets = 16;
            s.migrate_throttle = Some(Duration::from_millis(5));
        },
        ..Setup::default()
    };
    let mut c = cluster(dir.path(), &setup);
    let spec = WorkloadSpec {
        records: 50_000,
        value_size: 8,
        threads: 4,
        duration: Duration::from_secs(6),
        ..WorkloadSpec::default()
    };
    bench::load(&c, &spec, 0.0).unwrap();
    c.start().unwrap();
    let c = Arc::new(c);
    let script: ExperimentScript = "[[event]]\nat = 1.0\naction = \"migrate\"\nsource = 1\ntarget = 2\nfraction = 0.1\n"
        .parse()
        .unwrap();
    let report = bench::run_experiment(&c, &spec, &script, Duration::from_millis(500)).unwrap();
    settle(&c, report.migrations[0]);
    let trace = c.server(2).trace();
    // Sampled keys asked for before their bulk push must not wait for it.
    let mut early = 0;
    let mut late = Vec::new();
    let mut unasked = 0;
    for k in &trace.sampled {
        let Some(&pushed) = trace.pushed_at.get(k) else { continue };
        match (trace.arrived_at.get(k), trace.served_at.get(k)) {
            (Some(&asked), Some(&served)) if asked < pushed => {
                if served < pushed {
                    early += 1;
                } else {
                    late.push(*k);
                }
            }
            _ => unasked += 1,
        }
    }
    let warm = !trace.sampled.is_empty() && early > 0 && late.is_empty();
    let warm_note = format!(
        "{} sampled keys requested before their bulk push: {early} served before it, {} after ({unasked} not requested in time)",
        early + late.len(),
        late.len()
    );

    // Overhead: source latency with and without the sampling hook.
    let dir = tempfile::tempdir().unwrap();
    let setup = Setup {
        value_bytes: 8,
        server: |s| s.sampling_duration = Duration::from_secs(30),
        ..Setup::default()
    };
    let mut c = cluster(dir.path(), &setup);
    let quiet = WorkloadSpec {
        records: 50_000,
        value_size: 8,
        ..WorkloadSpec::default()
    };
    bench::load(&c, &quiet, 0.0).unwrap();
    c.start().unwrap();
    let range = HashRange::FULL.prefix(0.1);
    let keys: Vec<u64> = (0..quiet.records).filter(|&k| in_ranges(&[range], k)).collect();
    let mut client = c.client(ClientConfig::default()).unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(8);
    call_latencies(&mut client, &keys, 500, &mut rng);
    let base = median(call_latencies(&mut client, &keys, 5000, &mut rng));
    let id = c.migrate(1, 2, vec![range], WalkMode::Indirection).unwrap();
    assert!(c.wait_phase(1, Phase::Sampling, Duration::from_secs(10)));
    let sampling = median(call_latencies(&mut client, &keys, 5000, &mut rng));
    let still_sampling = c.server(1).phase() == Phase::Sampling;
    let _ = c.cancel(1, id);
    let overhead = sampling.as_secs_f64() / base.as_secs_f64() - 1.0;
    let cheap = still_sampling && overhead < 0.05;
    verdict(
        "sampled hot records are served at the target before the bulk copy",
        warm && cheap,
        format!(
            "{warm_note}; median source latency {:?} before, {:?} while sampling ({:+.1}%)",
            base,
            sampling,
            overhead * 100.0
        ),
    );
}

#[test]
fn pending_requests_rise_at_transfer_and_drain() {
    let dir = tempfile::tempdir().unwrap();
    let setup = Setup {
        value_bytes: 8,
        server: |s| {
            s.migrate_chunk_buckets = 16;
            s.migrate_throttle = Some(Duration::from_millis(2));
        },
        ..Setup::default()
    };
    let mut c = cluster(dir.path(), &setup);
    let spec = WorkloadSpec {
        records: 50_000,
        value_size: 8,
        threads: 4,
        duration: Duration::from_secs(8),
        ..WorkloadSpec::default()
    };
    bench::load(&c, &spec, 0.0).unwrap();
    c.start().unwrap();
    let c = Arc::new(c);
    let script: ExperimentScript = "[[event]]\nat = 1.0\naction = \"migrate\"\nsource = 1\ntarget = 2\nfraction = 0.25\n"
        .parse()
        .unwrap();
    let report = bench::run_experiment(&c, &spec, &script, Duration::from_millis(100)).unwrap();
    settle(&c, report.migrations[0]);
    let rows = &report.rows;
    let transfer = rows.iter().position(|r| r.phase_marks.contains("transfer")).unwrap_or(rows.len());
    let complete = rows.iter().position(|r| r.phase_marks.contains("source-complete")).unwrap_or(rows.len());
    let before = rows[..transfer].iter().map(|r| r.pending_count).max().unwrap_or(0);
    let during = rows[transfer.min(rows.len())..complete.min(rows.len())]
        .iter()
        .map(|r| r.pending_count)
        .max()
        .unwrap_or(0);
    let last = rows.last().map_or(u64::MAX, |r| r.pending_count);
    // settled while the load was still running, not only once it stopped
    let after = rows.get(complete + 1..rows.len() - 1).and_then(|r| r.iter().map(|r| r.pending_count).min());
    let now: u64 = c.servers().map(|s| s.metrics().pending_now).sum();
    let ok = transfer < rows.len()
        && complete < rows.len()
        && during > before
        && after == Some(0)
        && last == 0
        && now == 0;
    verdict(
        "pending requests rise at ownership transfer and drain to zero",
        ok,
        format!(
            "peak pending before transfer {before}, during migration {during}, lowest after completion {after:?}, final {last}; transfer at row {transfer}, complete at row {complete} of {}",
            rows.len()
        ),
    );
}

fn read_throughput(server_threads: usize) -> f64 {
    let dir = tempfile::tempdir().unwrap();
    let setup = Setup {
        servers: vec![1],
        empty: vec![],
        threads: server_threads,
        value_bytes: 8,
        ..Setup::default()
    };
    let mut c = cluster(dir.path(), &setup);
    let spec = WorkloadSpec {
        records: 100_000,
        dist: KeyDist::Uniform,
        mix: OpMix::Read,
        value_size: 8,
        threads: 8,
        duration: Duration::from_secs(3),
        ..WorkloadSpec::default()
    };
    bench::load(&c, &spec, 0.0).unwrap();
    c.start().unwrap();
    let c = Arc::new(c);
    let r = bench::run_experiment(&c, &spec, &ExperimentScript::default(), Duration::from_secs(1)).unwrap();
    assert!(r.errors.is_empty(), "{:?}", r.errors);
    r.throughput()
}

#[test]
fn read_throughput_scales_with_server_threads() {
    let one = read_throughput(1);
    let eight = read_throughput(8);
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    verdict(
        "eight server threads read at least four times faster than one",
        eight >= 4.0 * one,
        format!("1 thread {one:.0} ops/s, 8 threads {eight:.0} ops/s ({:.2}x) on {cpus} cpus", eight / one),
    );
}

#[test]
fn compaction_leaves_one_version_per_migrated_key() {
    const KEYS: u64 = 20_000;
    let dir = tempfile::tempdir().unwrap();
    let setup = Setup {
        page_bits: 16,
        ..Setup::default()
    };
    let mut c = cluster(dir.path(), &setup);
    let mut oracle = load_half_cold(&c, KEYS, setup.value_bytes);
    c.start().unwrap();
    let range = HashRange::FULL.prefix(0.5);
    let id = c.migrate(1, 2, vec![range], WalkMode::Indirection).unwrap();
    settle(&c, id);

    let moved: Vec<u64> = (0..KEYS).filter(|&k| in_ranges(&[range], k)).collect();
    let mut cold: Vec<u64> = moved.iter().copied().filter(|k| k % 2 == 1).collect();
    let mut rng = rand::rngs::StdRng::seed_from_u64(21);
    cold.shuffle(&mut rng);
    let fetched: HashSet<u64> = cold[..cold.len() / 2].iter().copied().collect();
    // Half of the fetches are reads, half are updates that must survive the
    // forwarded copies arriving later.
    let mut client = c.client(ClientConfig::default()).unwrap();
    for (i, &k) in cold[..cold.len() / 2].iter().enumerate() {
        if i % 2 == 0 {
            let got = client.call(Request::Read(k), Duration::from_secs(10)).unwrap();
            assert_eq!(got, Outcome::Value(oracle[&k].clone()), "key {k}");
        } else {
            client.call(Request::RmwAdd(k, 1), Duration::from_secs(10)).unwrap();
            let v = oracle.get_mut(&k).unwrap();
            let n = counter(v) + 1;
            v[..8].copy_from_slice(&n.to_le_bytes());
        }
    }
    let stats_before = c.store(2).stats();
    let msg = c.compact(1).unwrap();
    let stats = c.store(2).stats();
    let inserted = stats.forwarded_inserted - stats_before.forwarded_inserted;
    let discarded = stats.forwarded_discarded - stats_before.forwarded_discarded;

    let audit = {
        let mut s = c.session(2).unwrap();
        c.store(2).audit(&mut s, range).unwrap()
    };
    let wrong: Vec<u64> = moved
        .iter()
        .copied()
        .filter(|k| audit.values.get(k) != Some(&oracle[k]))
        .collect();
    let extra = audit.values.len() as u64 - (moved.len() as u64 - wrong.iter().filter(|k| !audit.values.contains_key(k)).count() as u64);
    let want_inserted = (cold.len() - fetched.len()) as u64;
    let want_discarded = fetched.len() as u64;
    let ok = wrong.is_empty()
        && extra == 0
        && audit.stale_versions == 0
        && audit.live_indirections == 0
        && inserted == want_inserted
        && discarded == want_discarded;
    verdict(
        "compaction leaves one live version per migrated key and no indirections",
        ok,
        format!(
            "{} moved keys, {} wrong, {} stale versions, {} live indirections; forwarded inserted {inserted} (want {want_inserted}) discarded {discarded} (want {want_discarded}); source: {msg}",
            moved.len(),
            wrong.len(),
            audit.stale_versions,
            audit.live_indirections
        ),
    );
}

#[test]
fn zipfian_frequencies_match_closed_form() {
    const DRAWS: u64 = 1_000_000;
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for n in [4u64, 1000] {
        for theta in [0.0, 0.99] {
            let z = Zipfian::new(n, theta).unwrap();
            let mut rng = rand::rngs::StdRng::seed_from_u64(n ^ theta.to_bits());
            let mut hits = vec![0u64; n as usize + 1];
            for _ in 0..DRAWS {
                hits[z.next_rank(&mut rng) as usize] += 1;
            }
            let dev = (1..=n)
                .map(|k| (hits[k as usize] as f64 / DRAWS as f64 - Zipfian::probability(n, theta, k)).abs())
                .fold(0.0, f64::max);
            worst = worst.max(dev);
            notes.push(format!("n={n} theta={theta}: max deviation {:.4}%", dev * 100.0));
        }
    }
    verdict("zipfian frequencies within 0.5% of closed form", worst <= 0.005, notes.join(", "));
}

