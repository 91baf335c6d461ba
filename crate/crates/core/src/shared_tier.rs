//! Shared remote storage tier.
//!
//! Every server log owns an append-only address space in the tier, keyed by
//! `log_id`, that any server can read. Appends are page-granular and must start
//! at the current cursor; bytes below the cursor never change.
//!
//! Two emulations ship: [`FsSharedTier`] (directory per log, fixed-size extent
//! files) and [`MemSharedTier`]. Both accept a [`LatencyModel`] so tests and
//! experiments can emulate a slow blob store.
//!
//! Extent file layout (little-endian):
//!
//! ```text
//! log_id: u64 | start_address: u64 | page_size: u32 | pages_written: u32 |
//! crc32: u32 x pages_per_extent | page payloads...
//! ```

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::address::Address;

pub const DEFAULT_EXTENT_SIZE: u64 = 64 << 20;

#[derive(Debug, Error)]
pub enum SharedTierError {
    #[error("append for log {log_id} at {start} does not match cursor {cursor}")]
    NotAtCursor {
        log_id: u64,
        start: Address,
        cursor: Address,
    },
    #[error("append of {len} bytes at {start} is not page aligned")]
    Unaligned { start: Address, len: usize },
    #[error("read of log {log_id} [{address}, +{len}) beyond cursor {cursor}")]
    OutOfRange {
        log_id: u64,
        address: Address,
        len: usize,
        cursor: Address,
    },
    #[error("checksum mismatch in log {log_id} page at {address}")]
    Corrupt { log_id: u64, address: Address },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Artificial delay and throughput cap applied to every operation.
#[derive(Debug, Clone, Copy, Default)]
pub struct LatencyModel {
    pub read_latency: Duration,
    pub append_latency: Duration,
    /// Operations per second across the whole tier; `None` is unlimited.
    pub iops_cap: Option<u32>,
}

#[derive(Debug, Default)]
struct Throttle {
    next_slot: Mutex<Option<Instant>>,
}

impl Throttle {
    fn wait(&self, model: &LatencyModel, latency: Duration) {
        if let Some(iops) = model.iops_cap.filter(|&n| n > 0) {
            let gap = Duration::from_secs_f64(1.0 / iops as f64);
            let start = {
                let mut slot = self.next_slot.lock();
                let now = Instant::now();
                let at = slot.map_or(now, |s| s.max(now));
                *slot = Some(at + gap);
                at
            };
            let now = Instant::now();
            if start > now {
                std::thread::sleep(start - now);
            }
        }
        if !latency.is_zero() {
            std::thread::sleep(latency);
        }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct SharedTierStats {
    pub reads: u64,
    pub bytes_read: u64,
    pub appends: u64,
    pub bytes_appended: u64,
}

#[derive(Debug, Default)]
struct Counters {
    reads: AtomicU64,
    bytes_read: AtomicU64,
    appends: AtomicU64,
    bytes_appended: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> SharedTierStats {
        SharedTierStats {
            reads: self.reads.load(Ordering::Relaxed),
            bytes_read: self.bytes_read.load(Ordering::Relaxed),
            appends: self.appends.load(Ordering::Relaxed),
            bytes_appended: self.bytes_appended.load(Ordering::Relaxed),
        }
    }
}

pub trait SharedTier: Send + Sync + std::fmt::Debug {
    fn page_size(&self) -> u64;

    /// Appends whole pages starting exactly at the log's cursor.
    fn append_pages(&self, log_id: u64, start: Address, bytes: &[u8])
        -> Result<(), SharedTierError>;

    fn read(&self, log_id: u64, address: Address, len: usize) -> Result<Vec<u8>, SharedTierError>;

    /// Next address to be appended for `log_id` (0 for an unknown log).
    fn cursor(&self, log_id: u64) -> Address;

    fn stats(&self) -> SharedTierStats;
}

fn check_append(
    page_size: u64,
    log_id: u64,
    start: Address,
    len: usize,
    cursor: Address,
) -> Result<(), SharedTierError> {
    if !start.raw().is_multiple_of(page_size) || !(len as u64).is_multiple_of(page_size) {
        return Err(SharedTierError::Unaligned { start, len });
    }
    if start != cursor {
        return Err(SharedTierError::NotAtCursor {
            log_id,
            start,
            cursor,
        });
    }
    Ok(())
}

/// In-process tier backed by heap buffers.
#[derive(Debug)]
pub struct MemSharedTier {
    page_size: u64,
    logs: RwLock<HashMap<u64, Vec<u8>>>,
    latency: LatencyModel,
    throttle: Throttle,
    counters: Counters,
}

impl MemSharedTier {
    pub fn new(page_size: u64) -> Self {
        Self::with_latency(page_size, LatencyModel::default())
    }

    pub fn with_latency(page_size: u64, latency: LatencyModel) -> Self {
        MemSharedTier {
            page_size,
            logs: RwLock::new(HashMap::new()),
            latency,
            throttle: Throttle::default(),
            counters: Counters::default(),
        }
    }
}

impl SharedTier for MemSharedTier {
    fn page_size(&self) -> u64 {
        self.page_size
    }

    fn append_pages(
        &self,
        log_id: u64,
        start: Address,
        bytes: &[u8],
    ) -> Result<(), SharedTierError> {
        self.throttle.wait(&self.latency, self.latency.append_latency);
        let mut logs = self.logs.write();
        let log = logs.entry(log_id).or_default();
        check_append(
            self.page_size,
            log_id,
            start,
            bytes.len(),
            Address::new(log.len() as u64),
        )?;
        log.extend_from_slice(bytes);
        self.counters.appends.fetch_add(1, Ordering::Relaxed);
        self.counters
            .bytes_appended
            .fetch_add(bytes.len() as u64, Ordering::Relaxed);
        Ok(())
    }

    fn read(&self, log_id: u64, address: Address, len: usize) -> Result<Vec<u8>, SharedTierError> {
        self.throttle.wait(&self.latency, self.latency.read_latency);
        let logs = self.logs.read();
        let log = logs.get(&log_id).map(Vec::as_slice).unwrap_or(&[]);
        let start = address.raw() as usize;
        if start + len > log.len() {
            return Err(SharedTierError::OutOfRange {
                log_id,
                address,
                len,
                cursor: Address::new(log.len() as u64),
            });
        }
        self.counters.reads.fetch_add(1, Ordering::Relaxed);
        self.counters
            .bytes_read
            .fetch_add(len as u64, Ordering::Relaxed);
        Ok(log[start..start + len].to_vec())
    }

    fn cursor(&self, log_id: u64) -> Address {
        Address::new(self.logs.read().get(&log_id).map_or(0, |l| l.len() as u64))
    }

    fn stats(&self) -> SharedTierStats {
        self.counters.snapshot()
    }
}

#[derive(Debug)]
struct FsLog {
    cursor: u64,
    extents: HashMap<u64, File>,
}

/// Filesystem emulation: `root/log-<id>/extent-<n>.dat`.
#[derive(Debug)]
pub struct FsSharedTier {
    root: PathBuf,
    page_size: u64,
    extent_size: u64,
    sync: bool,
    logs: Mutex<HashMap<u64, FsLog>>,
    latency: LatencyModel,
    throttle: Throttle,
    counters: Counters,
}

impl FsSharedTier {
    /// Opens (or creates) a tier rooted at `root`. Existing extents are scanned
    /// to recover each log's cursor.
    pub fn open(
        root: impl AsRef<Path>,
        page_size: u64,
        extent_size: u64,
        latency: LatencyModel,
    ) -> Result<Self, SharedTierError> {
        assert!(extent_size.is_multiple_of(page_size) && extent_size >= page_size);
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let tier = FsSharedTier {
            root,
            page_size,
            extent_size,
            sync: false,
            logs: Mutex::new(HashMap::new()),
            latency,
            throttle: Throttle::default(),
            counters: Counters::default(),
        };
        tier.recover()?;
        Ok(tier)
    }

    /// Calls `sync_data` after every append.
    pub fn with_sync(mut self, sync: bool) -> Self {
        self.sync = sync;
        self
    }

    fn pages_per_extent(&self) -> u64 {
        self.extent_size / self.page_size
    }

    fn header_len(&self) -> u64 {
        24 + 4 * self.pages_per_extent()
    }

    fn log_dir(&self, log_id: u64) -> PathBuf {
        self.root.join(format!("log-{log_id:016x}"))
    }

    fn extent_path(&self, log_id: u64, extent: u64) -> PathBuf {
        self.log_dir(log_id).join(format!("extent-{extent:08}.dat"))
    }

    fn recover(&self) -> Result<(), SharedTierError> {
        let mut logs = self.logs.lock();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(id) = name
                .strip_prefix("log-")
                .and_then(|h| u64::from_str_radix(h, 16).ok())
            else {
                continue;
            };
            let mut cursor = 0u64;
            for ext in fs::read_dir(entry.path())? {
                let ext = ext?;
                let file = File::open(ext.path())?;
                let mut hdr = [0u8; 24];
                file.read_exact_at(&mut hdr, 0)?;
                let start = u64::from_le_bytes(hdr[8..16].try_into().unwrap());
                let written = u32::from_le_bytes(hdr[20..24].try_into().unwrap()) as u64;
                cursor = cursor.max(start + written * self.page_size);
            }
            logs.insert(
                id,
                FsLog {
                    cursor,
                    extents: HashMap::new(),
                },
            );
        }
        Ok(())
    }

    fn extent_file<'a>(
        &self,
        log: &'a mut FsLog,
        log_id: u64,
        extent: u64,
        create: bool,
    ) -> Result<&'a File, SharedTierError> {
        if let std::collections::hash_map::Entry::Vacant(e) = log.extents.entry(extent) {
            let path = self.extent_path(log_id, extent);
            let file = if create {
                fs::create_dir_all(self.log_dir(log_id))?;
                let file = OpenOptions::new()
                    .read(true)
                    .write(true)
                    .create(true)
                    .truncate(false)
                    .open(&path)?;
                if file.metadata()?.len() == 0 {
                    let mut hdr = vec![0u8; self.header_len() as usize];
                    hdr[0..8].copy_from_slice(&log_id.to_le_bytes());
                    hdr[8..16].copy_from_slice(&(extent * self.extent_size).to_le_bytes());
                    hdr[16..20].copy_from_slice(&(self.page_size as u32).to_le_bytes());
                    file.write_all_at(&hdr, 0)?;
                }
                file
            } else {
                OpenOptions::new().read(true).write(true).open(&path)?
            };
            e.insert(file);
        }
        Ok(&log.extents[&extent])
    }
}

impl SharedTier for FsSharedTier {
    fn page_size(&self) -> u64 {
        self.page_size
    }

    fn append_pages(
        &self,
        log_id: u64,
        start: Address,
        bytes: &[u8],
    ) -> Result<(), SharedTierError> {
        self.throttle.wait(&self.latency, self.latency.append_latency);
        let mut logs = self.logs.lock();
        let log = logs.entry(log_id).or_insert_with(|| FsLog {
            cursor: 0,
            extents: HashMap::new(),
        });
        check_append(
            self.page_size,
            log_id,
            start,
            bytes.len(),
            Address::new(log.cursor),
        )?;
        let header_len = self.header_len();
        for (i, page) in bytes.chunks(self.page_size as usize).enumerate() {
            let addr = start.raw() + i as u64 * self.page_size;
            let extent = addr / self.extent_size;
            let page_in_extent = (addr % self.extent_size) / self.page_size;
            let file = self.extent_file(log, log_id, extent, true)?;
            file.write_all_at(page, header_len + addr % self.extent_size)?;
            let crc = crc32fast::hash(page);
            file.write_all_at(&crc.to_le_bytes(), 24 + 4 * page_in_extent)?;
            file.write_all_at(&(page_in_extent as u32 + 1).to_le_bytes(), 20)?;
            if self.sync {
                file.sync_data()?;
            }
        }
        log.cursor = start.raw() + bytes.len() as u64;
        self.counters.appends.fetch_add(1, Ordering::Relaxed);
        self.counters
            .bytes_appended
            .fetch_add(bytes.len() as u64, Ordering::Relaxed);
        Ok(())
    }

    fn read(&self, log_id: u64, address: Address, len: usize) -> Result<Vec<u8>, SharedTierError> {
        self.throttle.wait(&self.latency, self.latency.read_latency);
        let mut logs = self.logs.lock();
        let Some(log) = logs.get_mut(&log_id) else {
            return Err(SharedTierError::OutOfRange {
                log_id,
                address,
                len,
                cursor: Address::NULL,
            });
        };
        if address.raw() + len as u64 > log.cursor {
            return Err(SharedTierError::OutOfRange {
                log_id,
                address,
                len,
                cursor: Address::new(log.cursor),
            });
        }
        let mut out = vec![0u8; len];
        let mut done = 0usize;
        while done < len {
            let addr = address.raw() + done as u64;
            let extent = addr / self.extent_size;
            let within = addr % self.extent_size;
            let n = ((self.extent_size - within) as usize).min(len - done);
            let file = self.extent_file(log, log_id, extent, false)?;
            file.read_exact_at(&mut out[done..done + n], self.header_len() + within)?;
            done += n;
        }
        self.counters.reads.fetch_add(1, Ordering::Relaxed);
        self.counters
            .bytes_read
            .fetch_add(len as u64, Ordering::Relaxed);
        Ok(out)
    }

    fn cursor(&self, log_id: u64) -> Address {
        Address::new(self.logs.lock().get(&log_id).map_or(0, |l| l.cursor))
    }

    fn stats(&self) -> SharedTierStats {
        self.counters.snapshot()
    }
}

impl FsSharedTier {
    /// Recomputes every page checksum of `log_id` and compares it with the
    /// extent header.
    pub fn verify(&self, log_id: u64) -> Result<(), SharedTierError> {
        let cursor = self.cursor(log_id).raw();
        let mut logs = self.logs.lock();
        let Some(log) = logs.get_mut(&log_id) else {
            return Ok(());
        };
        let mut page = vec![0u8; self.page_size as usize];
        let mut addr = 0;
        while addr < cursor {
            let extent = addr / self.extent_size;
            let idx = (addr % self.extent_size) / self.page_size;
            let header_len = self.header_len();
            let file = self.extent_file(log, log_id, extent, false)?;
            file.read_exact_at(&mut page, header_len + addr % self.extent_size)?;
            let mut crc = [0u8; 4];
            file.read_exact_at(&mut crc, 24 + 4 * idx)?;
            if u32::from_le_bytes(crc) != crc32fast::hash(&page) {
                return Err(SharedTierError::Corrupt {
                    log_id,
                    address: Address::new(addr),
                });
            }
            addr += self.page_size;
        }
        Ok(())
    }
}
