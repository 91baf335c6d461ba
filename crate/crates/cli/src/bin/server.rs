//! One storage server: a store on local disk plus a shared tier directory,
//! serving clients and peers over TCP.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::Parser;
use shadowkv::epoch::EpochManager;
use shadowkv::metadata::{Metadata, RemoteMetadata};
use shadowkv::server::{Clock, Server, ServerConfig, TcpDialer};
use shadowkv::shared_tier::{FsSharedTier, LatencyModel};
use shadowkv::transport::TcpAcceptor;
use shadowkv::{Store, StoreConfig};

#[derive(Parser, Debug)]
#[command(name = "shadowkv-server", about = "Run one shadowkv storage server")]
struct Args {
    /// Address to accept clients and peers on.
    #[arg(long, default_value = "127.0.0.1:7001")]
    listen: SocketAddr,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    /// In-memory log size, e.g. 256M or 2G.
    #[arg(long, default_value = "256M", value_parser = parse_bytes)]
    memory_budget: u64,
    /// Metadata service address (see `shadowkv-ctl meta-serve`).
    #[arg(long)]
    metadata: SocketAddr,
    /// Directory shared by all servers, standing in for cloud storage.
    #[arg(long)]
    shared_tier: PathBuf,
    #[arg(long)]
    server_id: u32,
    /// Other servers as `id=host:port`, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_peer)]
    peers: Vec<(u32, SocketAddr)>,
    /// Local log directory.
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// log2 of the log page size.
    #[arg(long, default_value_t = 22)]
    page_bits: u32,
    /// Hash index buckets (rounded up to a power of two).
    #[arg(long, default_value_t = 1 << 20)]
    index_buckets: u64,
}

fn parse_bytes(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (num, mult) = match s.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() => {
            let m = match c.to_ascii_uppercase() {
                'K' => 1 << 10,
                'M' => 1 << 20,
                'G' => 1 << 30,
                _ => return Err(format!("unknown size suffix in {s:?}")),
            };
            (&s[..i], m)
        }
        _ => (s, 1),
    };
    num.parse::<u64>()
        .map(|n| n * mult)
        .map_err(|e| format!("bad size {s:?}: {e}"))
}

fn parse_peer(s: &str) -> Result<(u32, SocketAddr), String> {
    let (id, addr) = s.split_once('=').ok_or_else(|| format!("expected id=host:port, got {s:?}"))?;
    Ok((
        id.trim().parse().map_err(|e| format!("bad server id in {s:?}: {e}"))?,
        addr.trim().parse().map_err(|e| format!("bad address in {s:?}: {e}"))?,
    ))
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();
    let page = 1u64 << args.page_bits;
    let pages = args.memory_budget / page;
    if pages < 4 {
        bail!("memory budget {} holds fewer than 4 pages of {page} bytes", args.memory_budget);
    }

    let metadata = Arc::new(RemoteMetadata::connect(args.metadata).context("connecting to metadata")?);
    let map = metadata.get_ownership()?;
    if map.view_of(args.server_id).is_none() {
        metadata.add_server(args.server_id)?;
    }

    let shared = Arc::new(
        FsSharedTier::open(&args.shared_tier, page, page * 64, LatencyModel::default())
            .context("opening shared tier")?,
    );
    let dir = args.data_dir.join(format!("server{}", args.server_id));
    std::fs::create_dir_all(&dir)?;
    let mut sc = StoreConfig::new(args.server_id as u64, &dir);
    sc.log.page_bits = args.page_bits;
    sc.log.memory_pages = pages;
    sc.index = shadowkv::index::IndexConfig::new(args.index_buckets.next_power_of_two());
    let epoch = Arc::new(EpochManager::new(args.threads + 64, 4096));
    let store = Store::open(sc, epoch, shared).context("opening store")?;

    let acceptor = Arc::new(TcpAcceptor::bind(args.listen).context("binding listener")?);
    let mut addrs: HashMap<u32, SocketAddr> = args.peers.into_iter().collect();
    addrs.insert(args.server_id, args.listen);
    let server = Server::start(
        ServerConfig::new(args.server_id, args.threads),
        store,
        metadata,
        acceptor,
        Arc::new(TcpDialer { addrs }),
        Clock::new(),
    )?;
    tracing::info!(id = args.server_id, listen = %args.listen, threads = args.threads, "serving");
    loop {
        std::thread::park();
        let _ = &server;
    }
}
