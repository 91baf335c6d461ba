//! Runs a workload against an in-process cluster, fires a migration script
//! and writes per-interval metrics as CSV.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Parser;
use shadowkv::bench::{self, ExperimentScript, KeyDist, OpMix, WorkloadSpec};
use shadowkv::client::ClientConfig;
use shadowkv::cluster::{Cluster, ClusterConfig};
use shadowkv::index::IndexConfig;
use shadowkv::server::ServerConfig;
use shadowkv::shared_tier::{FsSharedTier, LatencyModel, MemSharedTier, SharedTier};
use shadowkv::StoreConfig;

#[derive(Parser, Debug)]
#[command(name = "shadowkv-bench", about = "Scripted migration experiments on an in-process cluster")]
struct Args {
    /// ycsb-f (rmw), read, upsert or insert-only.
    #[arg(long, default_value = "ycsb-f")]
    workload: String,
    #[arg(long, default_value_t = 1_000_000)]
    records: u64,
    /// Zipfian skew; ignored with --uniform.
    #[arg(long, default_value_t = 0.99)]
    theta: f64,
    #[arg(long)]
    uniform: bool,
    #[arg(long, default_value_t = 256)]
    value_size: usize,
    /// Client threads.
    #[arg(long, default_value_t = 4)]
    threads: usize,
    /// Run length in seconds.
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    /// Stop after this many requests in total (the duration still caps the run).
    #[arg(long)]
    ops: Option<u64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Timed events (TOML); none means a plain run.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    /// Sample interval in seconds.
    #[arg(long, default_value_t = 1.0)]
    interval: f64,
    /// Servers in the cluster, numbered from 1.
    #[arg(long, default_value_t = 2)]
    servers: u32,
    /// How many of the highest-numbered servers start without ranges.
    #[arg(long, default_value_t = 1)]
    empty_servers: u32,
    #[arg(long, default_value_t = 4)]
    server_threads: usize,
    /// Share of the records left only on storage after loading.
    #[arg(long, default_value_t = 0.0)]
    cold_fraction: f64,
    /// In-memory log pages per server.
    #[arg(long, default_value_t = 64)]
    memory_pages: u64,
    #[arg(long, default_value_t = 22)]
    page_bits: u32,
    /// Work directory for logs; a fresh temporary one by default.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Keep the shared tier in files under the work directory instead of memory.
    #[arg(long)]
    fs_shared_tier: bool,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let a = Args::parse();
    if a.empty_servers >= a.servers {
        bail!("at least one server must own ranges");
    }
    let mix: OpMix = a.workload.parse()?;
    let spec = WorkloadSpec {
        records: a.records,
        dist: if a.uniform {
            KeyDist::Uniform
        } else {
            KeyDist::Zipfian { theta: a.theta }
        },
        mix,
        value_size: a.value_size,
        threads: a.threads,
        duration: Duration::from_secs_f64(a.duration),
        ops: a.ops,
        seed: a.seed,
        client: ClientConfig::default(),
    };
    let script = match &a.script {
        Some(p) => ExperimentScript::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentScript::default(),
    };
    let dir = a
        .dir
        .clone()
        .unwrap_or_else(|| std::env::temp_dir().join(format!("shadowkv-bench-{}", std::process::id())));
    std::fs::create_dir_all(&dir)?;

    let page = 1u64 << a.page_bits;
    let shared: Arc<dyn SharedTier> = if a.fs_shared_tier {
        Arc::new(FsSharedTier::open(dir.join("shared"), page, page * 64, LatencyModel::default())?)
    } else {
        Arc::new(MemSharedTier::new(page))
    };
    let mut store = StoreConfig::new(0, &dir);
    store.log.page_bits = a.page_bits;
    store.log.memory_pages = a.memory_pages;
    store.index = IndexConfig::new((a.records / 4).max(1024).next_power_of_two());
    store.max_value_bytes = a.value_size.max(8);
    let servers: Vec<u32> = (1..=a.servers).collect();
    let empty: Vec<u32> = servers[(a.servers - a.empty_servers) as usize..].to_vec();
    let mut cluster = Cluster::new(
        ClusterConfig {
            servers,
            empty,
            dir: dir.clone(),
            store,
            server: ServerConfig::new(0, a.server_threads),
        },
        shared,
    )?;
    eprintln!("loading {} records", a.records);
    bench::load(&cluster, &spec, a.cold_fraction)?;
    cluster.start()?;
    let cluster = Arc::new(cluster);
    let report = bench::run_experiment(&cluster, &spec, &script, Duration::from_secs_f64(a.interval))?;
    report.write_csv(std::io::BufWriter::new(std::fs::File::create(&a.out)?))?;
    for line in &report.actions {
        eprintln!("{line}");
    }
    for e in &report.errors {
        eprintln!("error: {e}");
    }
    eprintln!(
        "{} ops in {:.2}s ({:.0} ops/s); metrics in {}",
        report.acked,
        report.elapsed.as_secs_f64(),
        report.throughput(),
        a.out.display()
    );
    drop(cluster);
    if a.dir.is_none() {
        let _ = std::fs::remove_dir_all(&dir);
    }
    Ok(())
}
