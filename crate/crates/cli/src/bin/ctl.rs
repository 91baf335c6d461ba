//! Administration: metadata service, migrations and server status.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};
use shadowkv::address::Address;
use shadowkv::client::control_call;
use shadowkv::metadata::{Metadata, MetadataServer, MetadataStore, RemoteMetadata};
use shadowkv::ownership::{HashRange, OwnershipMap};
use shadowkv::store::WalkMode;
use shadowkv::transport::TcpConnection;
use shadowkv::wire::Control;

#[derive(Parser, Debug)]
#[command(name = "shadowkv-ctl", about = "Administer a shadowkv cluster")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Indirection,
    Scan,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Creates a metadata log with the hash space split evenly.
    Init {
        #[arg(long)]
        wal: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        servers: Vec<u32>,
        /// Servers registered without any ranges.
        #[arg(long, value_delimiter = ',')]
        empty: Vec<u32>,
    },
    /// Serves the metadata log over TCP until killed.
    MetaServe {
        #[arg(long)]
        wal: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7000")]
        listen: SocketAddr,
        /// Initial owners when the log does not exist yet.
        #[arg(long, value_delimiter = ',')]
        servers: Vec<u32>,
    },
    /// Prints the ownership map and open migrations.
    Map {
        #[arg(long)]
        metadata: SocketAddr,
    },
    /// Starts moving hash ranges from the server at `--server` to `--target`.
    Migrate {
        #[arg(long)]
        server: SocketAddr,
        #[arg(long)]
        target: u32,
        /// `lo:hi` bounds, decimal or 0x-hex, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        ranges: Vec<HashRange>,
        #[arg(long, value_enum, default_value = "indirection")]
        mode: Mode,
    },
    /// Cancels a running migration at its source.
    Cancel {
        #[arg(long)]
        server: SocketAddr,
        #[arg(long)]
        id: u64,
    },
    Status {
        #[arg(long)]
        server: SocketAddr,
    },
    /// Compacts the server's log up to `--until` (default: the in-memory head).
    Compact {
        #[arg(long)]
        server: SocketAddr,
        #[arg(long)]
        until: Option<u64>,
    },
}

fn control(server: SocketAddr, msg: Control, timeout: Duration) -> Result<()> {
    let mut conn = TcpConnection::connect(server)?;
    let (ok, message, _) = control_call(&mut conn, &msg, timeout)?;
    if !ok {
        bail!("{message}");
    }
    println!("{message}");
    Ok(())
}

fn initial_map(servers: &[u32], empty: &[u32]) -> Result<OwnershipMap> {
    if servers.is_empty() {
        bail!("no servers given");
    }
    let owners: Vec<u32> = servers.iter().copied().filter(|s| !empty.contains(s)).collect();
    let mut map = OwnershipMap::even(&owners);
    for s in empty {
        map.add_server(*s);
    }
    Ok(map)
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    match Args::parse().cmd {
        Cmd::Init { wal, servers, empty } => {
            if wal.exists() {
                bail!("{} already exists", wal.display());
            }
            let store = MetadataStore::open(&wal, initial_map(&servers, &empty)?, true)?;
            println!("{:?}", store.get_ownership()?);
        }
        Cmd::MetaServe { wal, listen, servers } => {
            let initial = if wal.exists() {
                OwnershipMap::single(0)
            } else {
                initial_map(&servers, &[])?
            };
            let store = Arc::new(MetadataStore::open(&wal, initial, true)?);
            let server = MetadataServer::spawn(store, listen)?;
            println!("metadata serving on {}", server.local_addr());
            loop {
                std::thread::park();
            }
        }
        Cmd::Map { metadata } => {
            let m = RemoteMetadata::connect(metadata)?;
            println!("{:?}", m.get_ownership()?);
            for d in m.dependencies()? {
                println!("{d:?}");
            }
        }
        Cmd::Migrate {
            server,
            target,
            ranges,
            mode,
        } => {
            let mode = match mode {
                Mode::Indirection => WalkMode::Indirection,
                Mode::Scan => WalkMode::ScanLog,
            };
            control(server, Control::Migrate { target, ranges, mode }, Duration::from_secs(30))?;
        }
        Cmd::Cancel { server, id } => control(server, Control::Cancel { id }, Duration::from_secs(120))?,
        Cmd::Status { server } => control(server, Control::Status, Duration::from_secs(10))?,
        Cmd::Compact { server, until } => control(
            server,
            Control::Compact {
                until: until.map_or(Address::NULL, Address::new),
            },
            Duration::from_secs(600),
        )?,
    }
    Ok(())
}
