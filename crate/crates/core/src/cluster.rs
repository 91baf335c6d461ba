//! In-process cluster: metadata store, servers on loopback transport and a
//! shared tier, for tests and the benchmark harness.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::client::{control_call, Client, ClientConfig, ClientError};
use crate::epoch::EpochManager;
use crate::metadata::{Metadata, MetadataStore, MigrationId};
use crate::ownership::{HashRange, OwnershipMap, ServerId};
use crate::server::{Clock, Dialer, LoopbackDialer, Phase, Server, ServerConfig, ServerError};
use crate::shared_tier::SharedTier;
use crate::store::{Store, StoreConfig, StoreSession, WalkMode};
use crate::transport::LoopbackListener;
use crate::wire::Control;

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub servers: Vec<ServerId>,
    /// Servers that start owning nothing.
    pub empty: Vec<ServerId>,
    pub dir: PathBuf,
    /// Template; `log.log_id` and `log.dir` are set per server.
    pub store: StoreConfig,
    /// Template; `id` is set per server.
    pub server: ServerConfig,
}

pub struct Cluster {
    pub metadata: Arc<MetadataStore>,
    pub dialer: Arc<LoopbackDialer>,
    pub clock: Clock,
    pub shared: Arc<dyn SharedTier>,
    stores: BTreeMap<ServerId, Arc<Store>>,
    servers: BTreeMap<ServerId, Server>,
    listeners: BTreeMap<ServerId, LoopbackListener>,
    cfg: ClusterConfig,
}

impl std::fmt::Debug for Cluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Cluster({:?})", self.cfg.servers)
    }
}

impl Cluster {
    /// Opens the stores and the metadata; servers start with [`Cluster::start`]
    /// so data can be loaded first.
    pub fn new(cfg: ClusterConfig, shared: Arc<dyn SharedTier>) -> Result<Cluster, ServerError> {
        let owners: Vec<ServerId> = cfg.servers.iter().copied().filter(|s| !cfg.empty.contains(s)).collect();
        let mut map = OwnershipMap::even(&owners);
        for s in &cfg.empty {
            map.add_server(*s);
        }
        let metadata = Arc::new(MetadataStore::in_memory(map));
        let dialer = Arc::new(LoopbackDialer::new());
        let mut stores = BTreeMap::new();
        let mut listeners = BTreeMap::new();
        for &id in &cfg.servers {
            let mut sc = cfg.store.clone();
            sc.log.log_id = id as u64;
            sc.log.dir = cfg.dir.join(format!("server{id}"));
            std::fs::create_dir_all(&sc.log.dir)?;
            let epoch = Arc::new(EpochManager::new(256, 4096));
            stores.insert(id, Store::open(sc, epoch, shared.clone())?);
            let l = LoopbackListener::new();
            dialer.register(id, l.clone());
            listeners.insert(id, l);
        }
        Ok(Cluster {
            metadata,
            dialer,
            clock: Clock::new(),
            shared,
            stores,
            servers: BTreeMap::new(),
            listeners,
            cfg,
        })
    }

    pub fn store(&self, id: ServerId) -> &Arc<Store> {
        &self.stores[&id]
    }

    pub fn session(&self, id: ServerId) -> Result<StoreSession, ServerError> {
        Ok(self.stores[&id].session()?)
    }

    pub fn start(&mut self) -> Result<(), ServerError> {
        for (&id, store) in &self.stores {
            if self.servers.contains_key(&id) {
                continue;
            }
            let mut sc = self.cfg.server.clone();
            sc.id = id;
            let server = Server::start(
                sc,
                store.clone(),
                self.metadata.clone(),
                Arc::new(self.listeners[&id].clone()),
                self.dialer.clone(),
                self.clock,
            )?;
            self.servers.insert(id, server);
        }
        Ok(())
    }

    pub fn server(&self, id: ServerId) -> &Server {
        &self.servers[&id]
    }

    pub fn servers(&self) -> impl Iterator<Item = &Server> {
        self.servers.values()
    }

    pub fn client(&self, cfg: ClientConfig) -> Result<Client, ClientError> {
        Client::connect(self.metadata.clone(), self.dialer.clone(), cfg)
    }

    fn control(&self, server: ServerId, msg: &Control, timeout: Duration) -> Result<String, ServerError> {
        let mut conn = self.dialer.dial(server)?;
        let (ok, message, _) =
            control_call(conn.as_mut(), msg, timeout).map_err(|e| ServerError::Remote(e.to_string()))?;
        if ok {
            Ok(message)
        } else {
            Err(ServerError::Remote(message))
        }
    }

    /// Asks `source` to migrate `ranges` to `target`; returns the migration id.
    pub fn migrate(
        &self,
        source: ServerId,
        target: ServerId,
        ranges: Vec<HashRange>,
        mode: WalkMode,
    ) -> Result<MigrationId, ServerError> {
        self.control(source, &Control::Migrate { target, ranges, mode }, Duration::from_secs(10))?;
        let deps = self.metadata.dependencies()?;
        deps.iter()
            .filter(|d| d.source == source && d.target == target)
            .map(|d| d.id)
            .max()
            .ok_or_else(|| ServerError::Busy("migration not recorded".into()))
    }

    pub fn cancel(&self, source: ServerId, id: MigrationId) -> Result<String, ServerError> {
        self.control(source, &Control::Cancel { id }, Duration::from_secs(60))
    }

    pub fn compact(&self, server: ServerId) -> Result<String, ServerError> {
        self.control(
            server,
            &Control::Compact {
                until: crate::address::Address::NULL,
            },
            Duration::from_secs(60),
        )
    }

    pub fn status(&self, server: ServerId) -> Result<String, ServerError> {
        self.control(server, &Control::Status, Duration::from_secs(5))
    }

    /// Waits until `server` reports `phase`.
    pub fn wait_phase(&self, server: ServerId, phase: Phase, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if self.servers[&server].phase() == phase {
                return true;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
        false
    }

    /// Waits until both sides of `id` are done or it was cancelled and no
    /// server is migrating.
    pub fn wait_settled(&self, id: MigrationId, timeout: Duration) -> Result<bool, ServerError> {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            let idle = self.servers.values().all(|s| s.phase() == Phase::Normal);
            match self.metadata.dependency(id)? {
                Some(d) if (d.committed() || d.cancelled) && idle => return Ok(true),
                None if idle => return Ok(true),
                _ => {}
            }
            std::thread::sleep(Duration::from_millis(1));
        }
        Ok(false)
    }

    /// Stops one server in place, as if its process died.
    pub fn kill(&self, id: ServerId) {
        if let Some(s) = self.servers.get(&id) {
            s.halt();
        }
    }

    pub fn shutdown(&mut self) {
        for (_, s) in std::mem::take(&mut self.servers) {
            s.shutdown();
        }
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        self.shutdown();
    }
}
