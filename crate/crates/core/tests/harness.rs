use std::sync::Arc;
use std::time::Duration;

use shadowkv::bench::{self, ExperimentScript, KeyDist, OpMix, WorkloadSpec, CSV_HEADER};
use shadowkv::client::{ClientConfig, Outcome, Request};
use shadowkv::cluster::{Cluster, ClusterConfig};
use shadowkv::index::IndexConfig;
use shadowkv::server::ServerConfig;
use shadowkv::shared_tier::MemSharedTier;
use shadowkv::StoreConfig;

fn cluster(dir: &std::path::Path) -> Cluster {
    let mut store = StoreConfig::new(0, dir);
    store.log.page_bits = 14;
    store.log.memory_pages = 32;
    store.index = IndexConfig::new(1 << 12);
    let cfg = ClusterConfig {
        servers: vec![1, 2],
        empty: vec![2],
        dir: dir.to_path_buf(),
        store,
        server: ServerConfig::new(0, 2),
    };
    Cluster::new(cfg, Arc::new(MemSharedTier::new(1 << 14))).unwrap()
}

fn spec() -> WorkloadSpec {
    WorkloadSpec {
        records: 5000,
        dist: KeyDist::Zipfian { theta: 0.99 },
        mix: OpMix::Rmw,
        value_size: 16,
        threads: 2,
        duration: Duration::from_millis(1500),
        ops: None,
        seed: 7,
        client: ClientConfig::default(),
    }
}

fn sum_counters(c: &Cluster, records: u64) -> u64 {
    let mut client = c.client(ClientConfig::default()).unwrap();
    (0..records)
        .map(|k| match client.call(Request::Read(k), Duration::from_secs(10)).unwrap() {
            Outcome::Value(v) => u64::from_le_bytes(v[..8].try_into().unwrap()),
            other => panic!("key {k}: {other:?}"),
        })
        .sum()
}

#[test]
fn scripted_migration_run_accounts_for_every_op() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cluster(dir.path());
    let spec = spec();
    bench::load(&c, &spec, 0.5).unwrap();
    c.start().unwrap();
    let c = Arc::new(c);
    let script: ExperimentScript = "[[event]]\nat = 0.5\naction = \"migrate\"\nsource = 1\ntarget = 2\nfraction = 0.1\n"
        .parse()
        .unwrap();
    let report = bench::run_experiment(&c, &spec, &script, Duration::from_millis(250)).unwrap();
    assert!(report.errors.is_empty(), "{:?}", report.errors);
    assert_eq!(report.failed, 0);
    assert_eq!(report.migrations.len(), 1, "{:?}", report.actions);
    assert!(c.wait_settled(report.migrations[0], Duration::from_secs(30)).unwrap());

    let in_rows: u64 = report.rows.iter().map(|r| r.total_ops).sum();
    assert_eq!(in_rows, report.acked);
    assert_eq!(report.acked, report.acked_rmw);
    assert!(report.rows.len() >= 6);
    assert!(report.rows.iter().any(|r| r.phase_marks.contains("migrate 1")));
    assert!(report.rows.iter().map(|r| r.bytes_sent).sum::<u64>() > 0);
    assert!(report.rows.iter().map(|r| r.target_ops).sum::<u64>() > 0);
    assert_eq!(sum_counters(&c, spec.records), report.acked_rmw);

    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    for l in lines {
        assert_eq!(l.split(',').count(), 9, "{l}");
    }
}
