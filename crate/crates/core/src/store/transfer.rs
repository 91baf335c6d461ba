//! Bulk movement of records between logs: the migration walk at a source,
//! inserts at the receiving end, compaction with forwarding, and audits.

use std::collections::{HashMap, HashSet};
use std::ops::Range;
use std::sync::atomic::Ordering;

use super::session::Install;
use super::{End, Indirection, Store, StoreError, StoreSession};
use crate::address::Address;
use crate::codec::{DecodeError, Put, Reader};
use crate::hash::key_hash;
use crate::index::EntryHandle;
use crate::log::record::FLAG_INDIRECTION;
use crate::log::{LogError, OwnedRecord, ReadPurpose, RecordInfo};
use crate::ownership::{HashRange, RangeSet};

/// One unit of a migration or forwarding batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MigratedItem {
    Record {
        key: u64,
        value: Vec<u8>,
        /// Address in the sending log; inserts are idempotent on it.
        source_address: Address,
    },
    Indirection(Indirection),
}

impl MigratedItem {
    pub fn encode(&self, out: &mut Vec<u8>) {
        match self {
            MigratedItem::Record {
                key,
                value,
                source_address,
            } => {
                out.put_u8(0);
                out.put_u64(*key);
                out.put_u64(source_address.raw());
                out.put_blob(value);
            }
            MigratedItem::Indirection(i) => {
                out.put_u8(1);
                out.extend_from_slice(&i.encode());
            }
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<MigratedItem, DecodeError> {
        match r.u8()? {
            0 => Ok(MigratedItem::Record {
                key: r.u64()?,
                source_address: Address::new(r.u64()?),
                value: r.blob()?.to_vec(),
            }),
            1 => Ok(MigratedItem::Indirection(Indirection::decode(
                r.bytes(super::indirection::ENCODED_LEN)?,
            )?)),
            t => Err(DecodeError::Invalid {
                field: "item kind",
                value: t as u64,
            }),
        }
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            MigratedItem::Record { value, .. } => 1 + 8 + 8 + 4 + value.len(),
            MigratedItem::Indirection(_) => 1 + super::indirection::ENCODED_LEN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalkMode {
    /// Chains that continue on storage are handed over as indirections.
    Indirection,
    /// Only memory is walked; storage is scanned afterwards.
    ScanLog,
}

/// Summary of one region walk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegionScan {
    pub entries: u64,
    pub records: u64,
    pub indirections: u64,
    /// Highest storage address an emitted indirection points to.
    pub disk_frontier: Option<Address>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompactionReport {
    pub scanned: u64,
    pub live_copied: u64,
    pub forwarded: u64,
    pub dropped: u64,
    pub indirections_kept: u64,
    pub truncated_to: Address,
}

/// Visible state of a hash range in one store.
#[derive(Debug, Clone, Default)]
pub struct Audit {
    /// Value a lookup returns, per key that has a concrete record.
    pub values: HashMap<u64, Vec<u8>>,
    /// Older concrete versions still in the chains.
    pub stale_versions: u64,
    /// Distinct non-retired indirections overlapping the range.
    pub live_indirections: u64,
}

const REFRESH_EVERY: u64 = 256;

impl Store {
    /// Walks the chains in `buckets` and emits, per key in `ranges`, the
    /// newest memory-resident record. In indirection mode each chain that
    /// continues on storage also yields one indirection per migrating range,
    /// after the page it points into is on the shared tier.
    pub fn walk_region(
        &self,
        s: &mut StoreSession,
        ranges: &RangeSet,
        buckets: Range<u64>,
        mode: WalkMode,
        emit: &mut dyn FnMut(MigratedItem),
    ) -> Result<RegionScan, StoreError> {
        let mut heads = Vec::new();
        self.index.for_each_entry(buckets, |h: EntryHandle<'_>| {
            heads.push((h.bucket(), h.tag(), h.load().address()));
        });
        let bits = self.index.bucket_bits() as u8;
        let mut scan = RegionScan::default();
        let mut seen = HashSet::new();
        let was_protected = s.is_protected();
        s.protect()?;
        for (bucket, tag, head) in heads {
            scan.entries += 1;
            if scan.entries % REFRESH_EVERY == 0 {
                s.refresh()?;
            }
            seen.clear();
            let begin = self.log.begin();
            let mut addr = head;
            while !addr.is_null() && addr >= begin {
                let Some(rec) = self.log.get(addr) else {
                    if mode == WalkMode::Indirection {
                        for r in ranges.ranges() {
                            if addr.raw() < self.range_floor(r) {
                                continue;
                            }
                            // The walk holds the epoch; the copy must not wait on it.
                            s.unprotect();
                            let shared = self.log.ensure_shared(addr);
                            s.protect()?;
                            shared?;
                            emit(MigratedItem::Indirection(Indirection {
                                next_address: addr,
                                source_log_id: self.log_id(),
                                range: *r,
                                bucket,
                                tag,
                                bucket_bits: bits,
                            }));
                            scan.indirections += 1;
                            scan.disk_frontier = scan.disk_frontier.max(Some(addr));
                        }
                    }
                    break;
                };
                let info = rec.info();
                if !info.is_invalid() {
                    if info.is_indirection() {
                        // Stand-in received from an earlier migration: pass on
                        // the part that overlaps what is moving.
                        if let Ok(ind) = Indirection::decode(&rec.read_value()) {
                            if !self.retired(&ind) {
                                for r in ranges.ranges() {
                                    if let Some(range) = ind.range.intersect(r) {
                                        emit(MigratedItem::Indirection(Indirection { range, ..ind }));
                                        scan.indirections += 1;
                                    }
                                }
                            }
                        }
                    } else {
                        let key = rec.key();
                        let hash = key_hash(key);
                        if ranges.contains(hash)
                            && addr.raw() >= self.stop_below(hash)
                            && seen.insert(key)
                        {
                            emit(MigratedItem::Record {
                                key,
                                value: super::read_value(&rec, true),
                                source_address: addr,
                            });
                            scan.records += 1;
                        }
                    }
                }
                addr = info.previous_address();
            }
        }
        if !was_protected {
            s.unprotect();
        }
        Ok(scan)
    }

    /// Lowest address holding current data for every hash of `r`.
    fn range_floor(&self, r: &HashRange) -> u64 {
        let mut floor = self.log.begin().raw();
        for z in self.dead_zones.load().iter() {
            if z.range.lo <= r.lo && z.range.end() >= r.end() {
                floor = floor.max(z.below.raw());
            }
        }
        floor
    }

    /// Sequential pass over storage from the oldest page up to `head`,
    /// emitting the newest record of every key in `ranges` not in `sent`.
    /// Returns the number of records emitted.
    pub fn scan_storage_for_migration(
        &self,
        ranges: &RangeSet,
        sent: &HashSet<u64>,
        emit: &mut dyn FnMut(MigratedItem),
    ) -> Result<u64, StoreError> {
        let mut latest: HashMap<u64, OwnedRecord> = HashMap::new();
        self.log.scan_storage(
            self.log.begin(),
            self.log.head(),
            ReadPurpose::Migration,
            |rec| {
                if !rec.info.is_invalid() && !rec.info.is_indirection() && !sent.contains(&rec.key) {
                    let hash = key_hash(rec.key);
                    if ranges.contains(hash) && rec.address.raw() >= self.stop_below(hash) {
                        latest.insert(rec.key, rec);
                    }
                }
                true
            },
        )?;
        let mut recs: Vec<_> = latest.into_values().collect();
        recs.sort_by_key(|r| r.address);
        let n = recs.len() as u64;
        for r in recs {
            emit(MigratedItem::Record {
                key: r.key,
                value: r.value,
                source_address: r.address,
            });
        }
        Ok(n)
    }

    /// Current records of `keys`, for handing over sampled keys and for
    /// pushing writes back after a cancelled migration.
    pub fn snapshot_keys(
        &self,
        s: &mut StoreSession,
        keys: &[u64],
    ) -> Result<Vec<MigratedItem>, StoreError> {
        let mut out = Vec::with_capacity(keys.len());
        let was_protected = s.is_protected();
        for (i, &key) in keys.iter().enumerate() {
            if (i as u64).is_multiple_of(REFRESH_EVERY) {
                s.refresh()?;
            }
            let hash = key_hash(key);
            let Some(entry) = self.index.find_entry(hash) else {
                continue;
            };
            let from = entry.load().address();
            let (rec, _) = self.walk_sync(key, hash, from, self.stop_below(hash), ReadPurpose::Background)?;
            if let Some(r) = rec.filter(|r| !r.info.is_tombstone()) {
                out.push(MigratedItem::Record {
                    key,
                    value: r.value,
                    source_address: r.address,
                });
            }
        }
        if !was_protected {
            s.unprotect();
        }
        Ok(out)
    }

    /// Appends `value` for `key` unless `keep` decides otherwise after
    /// looking at the current chain. Retries on conflicts.
    fn insert_if(
        &self,
        s: &mut StoreSession,
        key: u64,
        value: &[u8],
        keep: impl Fn(&Option<OwnedRecord>, &Option<Indirection>) -> bool,
    ) -> Result<bool, StoreError> {
        let hash = key_hash(key);
        let entry = self.index.find_or_create_entry(hash)?;
        for _ in 0..self.cfg.max_retries {
            let snap = entry.load();
            let stop = self.stop_below(hash);
            let w = self.walk(key, hash, snap.address(), stop);
            let found = match w.end {
                End::Memory(a) => (self.log.get(a).map(|r| r.to_owned_record()), w.indirection),
                End::Null => (None, w.indirection),
                End::Disk(_) => self.walk_sync(key, hash, snap.address(), stop, ReadPurpose::Background)?,
            };
            if !keep(&found.0, &found.1) {
                return Ok(false);
            }
            match self.install(&s.ctx(), &entry, snap, key, value, RecordInfo::default()) {
                Install::Ok => return Ok(true),
                Install::Conflict => {}
                Install::Backpressure => s.refresh()?,
                Install::Failed(e) => return Err(e),
            }
        }
        Err(StoreError::Conflict(self.cfg.max_retries))
    }

    fn insert_indirection(&self, s: &mut StoreSession, ind: &Indirection) -> Result<(), StoreError> {
        let value = ind.encode();
        for b in ind.target_buckets(self.index.bucket_bits()) {
            let entry = self.index.find_or_create_entry(ind.placement_hash(b))?;
            loop {
                let snap = entry.load();
                let info = RecordInfo::new(snap.address()).with_flag(FLAG_INDIRECTION);
                match self.log.append(s.thread(), info, entry.tag(), 0, &value) {
                    Ok(a) => {
                        if self.index.try_update_entry(&entry, snap, snap.with_address(a)) {
                            break;
                        }
                        if let Some(r) = self.log.get(a) {
                            super::seal(&r);
                        }
                    }
                    Err(LogError::Backpressure) => s.refresh()?,
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(())
    }

    /// Inserts a migration batch at the target. Keys written here since
    /// receiving began, and keys that already have a record, are skipped.
    /// Returns (inserted, skipped).
    pub fn insert_migrated(
        &self,
        s: &mut StoreSession,
        items: &[MigratedItem],
    ) -> Result<(u64, u64), StoreError> {
        let hook = self
            .receive_hook()
            .ok_or(StoreError::Usage("not receiving"))?;
        let (mut inserted, mut skipped) = (0, 0);
        let was_protected = s.is_protected();
        s.protect()?;
        for (i, item) in items.iter().enumerate() {
            if i as u64 % REFRESH_EVERY == REFRESH_EVERY - 1 {
                s.refresh()?;
            }
            match item {
                MigratedItem::Record {
                    key,
                    value,
                    source_address,
                } => {
                    let fresh = hook.ranges.contains_key(*key)
                        && !hook.written.lock().contains(key)
                        && hook.inserted.lock().insert(source_address.raw());
                    if fresh && self.insert_if(s, *key, value, |rec, _| rec.is_none())? {
                        inserted += 1;
                    } else {
                        skipped += 1;
                    }
                }
                MigratedItem::Indirection(ind) => {
                    if hook.indirections.lock().insert(*ind) {
                        self.insert_indirection(s, ind)?;
                        inserted += 1;
                    } else {
                        skipped += 1;
                    }
                }
            }
        }
        if !was_protected {
            s.unprotect();
        }
        let c = &self.counters;
        c.migrated_inserted.fetch_add(inserted, Ordering::Relaxed);
        c.migrated_skipped.fetch_add(skipped, Ordering::Relaxed);
        Ok((inserted, skipped))
    }

    /// Inserts records forwarded by `source_log_id`'s compaction. A record is
    /// kept iff the lookup for its key finds no concrete record and passes an
    /// indirection into that log; otherwise the key was already fetched or
    /// the range never came from there. Returns (inserted, discarded).
    pub fn insert_forwarded(
        &self,
        s: &mut StoreSession,
        source_log_id: u64,
        items: &[MigratedItem],
    ) -> Result<(u64, u64), StoreError> {
        let (mut inserted, mut discarded) = (0, 0);
        let was_protected = s.is_protected();
        s.protect()?;
        for (i, item) in items.iter().enumerate() {
            if i as u64 % REFRESH_EVERY == REFRESH_EVERY - 1 {
                s.refresh()?;
            }
            let MigratedItem::Record { key, value, .. } = item else {
                discarded += 1;
                continue;
            };
            let keep = |rec: &Option<OwnedRecord>, ind: &Option<Indirection>| {
                rec.is_none() && ind.is_some_and(|i| i.source_log_id == source_log_id)
            };
            if self.insert_if(s, *key, value, keep)? {
                inserted += 1;
            } else {
                discarded += 1;
            }
        }
        if !was_protected {
            s.unprotect();
        }
        let c = &self.counters;
        c.forwarded_inserted.fetch_add(inserted, Ordering::Relaxed);
        c.forwarded_discarded.fetch_add(discarded, Ordering::Relaxed);
        Ok((inserted, discarded))
    }

    /// Reclaims `[begin, until)`. Live records of owned keys move to the
    /// tail; live records of keys owned elsewhere go to `forward` (which
    /// must deliver them before returning) and are then dropped.
    pub fn compact(
        &self,
        s: &mut StoreSession,
        until: Address,
        owned: &RangeSet,
        forward: &mut dyn FnMut(Vec<MigratedItem>) -> Result<(), StoreError>,
    ) -> Result<CompactionReport, StoreError> {
        let until = until.min(self.log.head());
        let mut report = CompactionReport::default();
        let mut latest: HashMap<u64, OwnedRecord> = HashMap::new();
        let mut indirections = HashSet::new();
        self.log
            .scan_storage(self.log.begin(), until, ReadPurpose::Compaction, |rec| {
                report.scanned += 1;
                if rec.info.is_invalid() {
                    return true;
                }
                if rec.info.is_indirection() {
                    if let Ok(ind) = Indirection::decode(&rec.value) {
                        indirections.insert(ind);
                    }
                } else {
                    latest.insert(rec.key, rec);
                }
                true
            })?;

        let mut outgoing = Vec::new();
        let was_protected = s.is_protected();
        s.protect()?;
        let mut n = 0u64;
        for (key, rec) in latest {
            n += 1;
            if n.is_multiple_of(REFRESH_EVERY) {
                s.refresh()?;
            }
            let hash = key_hash(key);
            let Some(entry) = self.index.find_entry(hash) else {
                report.dropped += 1;
                continue;
            };
            let mut copied = false;
            for _ in 0..self.cfg.max_retries {
                let snap = entry.load();
                let (live, _) = self.walk_sync(
                    key,
                    hash,
                    snap.address(),
                    self.stop_below(hash),
                    ReadPurpose::Compaction,
                )?;
                if live.as_ref().map(|r| r.address) != Some(rec.address) {
                    break;
                }
                if !owned.contains(hash) {
                    outgoing.push(MigratedItem::Record {
                        key,
                        value: rec.value.clone(),
                        source_address: rec.address,
                    });
                    copied = true;
                    break;
                }
                match self.install(&s.ctx(), &entry, snap, key, &rec.value, RecordInfo::default()) {
                    Install::Ok => {
                        report.live_copied += 1;
                        copied = true;
                        break;
                    }
                    Install::Conflict => {}
                    Install::Backpressure => s.refresh()?,
                    Install::Failed(e) => return Err(e),
                }
            }
            if !copied {
                report.dropped += 1;
            }
        }
        for ind in indirections {
            if !self.retired(&ind) && owned.overlaps(&ind.range) {
                self.insert_indirection(s, &ind)?;
                report.indirections_kept += 1;
            }
        }
        if !was_protected {
            s.unprotect();
        }

        report.forwarded = outgoing.len() as u64;
        for chunk in outgoing.chunks(1024) {
            forward(chunk.to_vec())?;
        }
        self.log.truncate_until(until)?;
        report.truncated_to = self.log.begin();
        Ok(report)
    }

    /// Walks every chain, memory and storage, and reports what lookups of
    /// keys in `range` see.
    pub fn audit(&self, s: &mut StoreSession, range: HashRange) -> Result<Audit, StoreError> {
        let mut heads = Vec::new();
        self.index
            .for_each_entry(0..self.index.bucket_count(), |h| heads.push(h.load().address()));
        let mut audit = Audit::default();
        let mut inds = HashSet::new();
        let was_protected = s.is_protected();
        s.protect()?;
        for (i, head) in heads.into_iter().enumerate() {
            if (i as u64).is_multiple_of(REFRESH_EVERY) {
                s.refresh()?;
            }
            let mut seen = HashSet::new();
            let mut addr = head;
            while !addr.is_null() && addr >= self.log.begin() {
                let rec = match self.log.get(addr) {
                    Some(r) => r.to_owned_record(),
                    None => self.log.read_sync(addr, ReadPurpose::Background)?,
                };
                if !rec.info.is_invalid() {
                    if rec.info.is_indirection() {
                        if let Ok(ind) = Indirection::decode(&rec.value) {
                            if ind.range.overlaps(&range) && !self.retired(&ind) {
                                inds.insert(ind);
                            }
                        }
                    } else {
                        let hash = key_hash(rec.key);
                        if range.contains(hash) && addr.raw() >= self.stop_below(hash) {
                            if seen.insert(rec.key) {
                                audit.values.insert(rec.key, rec.value);
                            } else {
                                audit.stale_versions += 1;
                            }
                        }
                    }
                }
                addr = rec.info.previous_address();
            }
        }
        if !was_protected {
            s.unprotect();
        }
        audit.live_indirections = inds.len() as u64;
        Ok(audit)
    }
}
