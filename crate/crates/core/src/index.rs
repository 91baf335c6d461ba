//! Lock-free hash index from key hash to the head of a record chain.
//!
//! The table is an array of cacheline-sized buckets, each holding seven 8-byte
//! entries and one overflow link. An entry word is laid out as
//!
//! ```text
//!  63        62        61..48   47..0
//! +---------+---------+--------+---------+
//! |tentative| in-use  |  tag   | address |
//! +---------+---------+--------+---------+
//! ```
//!
//! The bucket is chosen by the low bits of the key hash and the 14-bit tag is
//! taken from hash bits 48..62, so the two never overlap. A word of zero is a
//! free slot; the in-use bit lets a freshly created entry carry tag 0 and the
//! null address without looking free.
//!
//! Inserts use a two-phase protocol: claim a free slot with the tentative bit
//! set, re-scan the bucket chain for any other entry with the same tag, and
//! either clear the tentative bit or release the slot and retry. Readers skip
//! tentative entries, so at most one visible entry exists per (bucket, tag).

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use thiserror::Error;

use crate::address::{Address, ADDRESS_BITS, ADDRESS_MASK};

pub const TAG_BITS: u32 = 14;
pub const TAG_SHIFT: u32 = 48;
pub const TAG_MASK: u64 = (1 << TAG_BITS) - 1;
const IN_USE_BIT: u64 = 1 << 62;
const TENTATIVE_BIT: u64 = 1 << 63;
pub const ENTRIES_PER_BUCKET: usize = 7;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IndexError {
    #[error("overflow bucket pool exhausted")]
    Exhausted,
    #[error("bucket count must be a power of two between 2 and 2^{max}, got {0}", max = ADDRESS_BITS)]
    BadBucketCount(u64),
}

#[inline]
pub fn tag_of(hash: u64) -> u16 {
    ((hash >> TAG_SHIFT) & TAG_MASK) as u16
}

/// One packed index slot.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct BucketEntry(u64);

impl BucketEntry {
    pub const FREE: BucketEntry = BucketEntry(0);

    pub fn new(tag: u16, address: Address) -> Self {
        BucketEntry(IN_USE_BIT | ((tag as u64 & TAG_MASK) << TAG_SHIFT) | address.raw())
    }

    pub fn from_raw(raw: u64) -> Self {
        BucketEntry(raw)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn is_free(self) -> bool {
        self.0 == 0
    }

    pub fn is_tentative(self) -> bool {
        self.0 & TENTATIVE_BIT != 0
    }

    pub fn tag(self) -> u16 {
        ((self.0 >> TAG_SHIFT) & TAG_MASK) as u16
    }

    pub fn address(self) -> Address {
        Address::new(self.0 & ADDRESS_MASK)
    }

    pub fn with_address(self, address: Address) -> Self {
        BucketEntry((self.0 & !ADDRESS_MASK) | address.raw())
    }

    fn tentative(self) -> Self {
        BucketEntry(self.0 | TENTATIVE_BIT)
    }
}

impl std::fmt::Debug for BucketEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_free() {
            return write!(f, "BucketEntry(free)");
        }
        write!(
            f,
            "BucketEntry(tag={}, addr={:?}{})",
            self.tag(),
            self.address(),
            if self.is_tentative() { ", tentative" } else { "" }
        )
    }
}

#[repr(C, align(64))]
pub struct Bucket {
    entries: [AtomicU64; ENTRIES_PER_BUCKET],
    /// 1-based index into the overflow pool, 0 when absent.
    overflow: AtomicU64,
}

impl Bucket {
    fn new() -> Self {
        Bucket {
            entries: Default::default(),
            overflow: AtomicU64::new(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexConfig {
    pub bucket_count: u64,
    /// Overflow buckets available for the whole table.
    pub overflow_buckets: usize,
}

impl IndexConfig {
    pub fn new(bucket_count: u64) -> Self {
        IndexConfig {
            bucket_count,
            overflow_buckets: (bucket_count as usize / 4).max(64),
        }
    }

    pub fn validate(&self) -> Result<u32, IndexError> {
        let n = self.bucket_count;
        if n < 2 || !n.is_power_of_two() || n.trailing_zeros() > ADDRESS_BITS {
            return Err(IndexError::BadBucketCount(n));
        }
        Ok(n.trailing_zeros())
    }
}

/// Reference to a live slot in the table.
#[derive(Clone, Copy)]
pub struct EntryHandle<'a> {
    slot: &'a AtomicU64,
    bucket: u64,
    tag: u16,
}

impl<'a> EntryHandle<'a> {
    pub fn load(&self) -> BucketEntry {
        BucketEntry(self.slot.load(Ordering::Acquire))
    }

    pub fn bucket(&self) -> u64 {
        self.bucket
    }

    pub fn tag(&self) -> u16 {
        self.tag
    }
}

impl std::fmt::Debug for EntryHandle<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EntryHandle(bucket={}, {:?})", self.bucket, self.load())
    }
}

pub struct HashIndex {
    bucket_bits: u32,
    mask: u64,
    buckets: Box<[Bucket]>,
    overflow: Box<[Bucket]>,
    next_overflow: AtomicUsize,
}

impl std::fmt::Debug for HashIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HashIndex")
            .field("buckets", &self.buckets.len())
            .field("overflow_used", &self.next_overflow.load(Ordering::Relaxed))
            .finish()
    }
}

impl HashIndex {
    pub fn new(config: IndexConfig) -> Result<Self, IndexError> {
        let bits = config.validate()?;
        Ok(HashIndex {
            bucket_bits: bits,
            mask: config.bucket_count - 1,
            buckets: (0..config.bucket_count).map(|_| Bucket::new()).collect(),
            overflow: (0..config.overflow_buckets).map(|_| Bucket::new()).collect(),
            next_overflow: AtomicUsize::new(0),
        })
    }

    pub fn bucket_count(&self) -> u64 {
        self.buckets.len() as u64
    }

    pub fn bucket_bits(&self) -> u32 {
        self.bucket_bits
    }

    #[inline]
    pub fn bucket_of(&self, hash: u64) -> u64 {
        hash & self.mask
    }

    fn overflow_of(&self, bucket: &Bucket) -> Option<&Bucket> {
        match bucket.overflow.load(Ordering::Acquire) {
            0 => None,
            i => Some(&self.overflow[(i - 1) as usize]),
        }
    }

    /// Visits every slot in the chain of `bucket`; stops early when `f`
    /// returns `Some`.
    fn scan<'a, T>(
        &'a self,
        bucket: u64,
        mut f: impl FnMut(&'a AtomicU64) -> Option<T>,
    ) -> Option<T> {
        let mut b = Some(&self.buckets[bucket as usize]);
        while let Some(cur) = b {
            for slot in &cur.entries {
                if let Some(v) = f(slot) {
                    return Some(v);
                }
            }
            b = self.overflow_of(cur);
        }
        None
    }

    pub fn find_entry(&self, hash: u64) -> Option<EntryHandle<'_>> {
        let bucket = self.bucket_of(hash);
        let tag = tag_of(hash);
        self.scan(bucket, |slot| {
            let e = BucketEntry(slot.load(Ordering::Acquire));
            (!e.is_free() && !e.is_tentative() && e.tag() == tag).then_some(EntryHandle {
                slot,
                bucket,
                tag,
            })
        })
    }

    pub fn find_or_create_entry(&self, hash: u64) -> Result<EntryHandle<'_>, IndexError> {
        let bucket = self.bucket_of(hash);
        let tag = tag_of(hash);
        let fresh = BucketEntry::new(tag, Address::NULL);
        let mut spins = 0u32;
        loop {
            let mut free = None;
            let found = self.scan(bucket, |slot| {
                let e = BucketEntry(slot.load(Ordering::Acquire));
                if e.is_free() {
                    free.get_or_insert(slot);
                    None
                } else if !e.is_tentative() && e.tag() == tag {
                    Some(slot)
                } else {
                    None
                }
            });
            if let Some(slot) = found {
                return Ok(EntryHandle { slot, bucket, tag });
            }
            let Some(slot) = free else {
                self.extend_chain(bucket)?;
                continue;
            };
            let tentative = fresh.tentative();
            if slot
                .compare_exchange(0, tentative.raw(), Ordering::AcqRel, Ordering::Acquire)
                .is_err()
            {
                continue;
            }
            let conflict = self
                .scan(bucket, |other| {
                    if std::ptr::eq(other, slot) {
                        return None;
                    }
                    let e = BucketEntry(other.load(Ordering::Acquire));
                    (!e.is_free() && e.tag() == tag).then_some(())
                })
                .is_some();
            if conflict {
                slot.store(0, Ordering::Release);
                spins += 1;
                if spins > 4 {
                    std::thread::yield_now();
                }
                continue;
            }
            slot.store(fresh.raw(), Ordering::Release);
            return Ok(EntryHandle { slot, bucket, tag });
        }
    }

    fn extend_chain(&self, bucket: u64) -> Result<(), IndexError> {
        let mut b = &self.buckets[bucket as usize];
        while let Some(next) = self.overflow_of(b) {
            b = next;
        }
        let idx = self.next_overflow.fetch_add(1, Ordering::AcqRel);
        if idx >= self.overflow.len() {
            return Err(IndexError::Exhausted);
        }
        // Losing this race leaks one pool bucket; the winner's bucket is used.
        let _ = b.overflow.compare_exchange(
            0,
            idx as u64 + 1,
            Ordering::AcqRel,
            Ordering::Acquire,
        );
        Ok(())
    }

    pub fn try_update_entry(
        &self,
        handle: &EntryHandle<'_>,
        expected: BucketEntry,
        desired: BucketEntry,
    ) -> bool {
        handle
            .slot
            .compare_exchange(
                expected.raw(),
                desired.raw(),
                Ordering::AcqRel,
                Ordering::Acquire,
            )
            .is_ok()
    }

    pub fn delete_entry(&self, handle: &EntryHandle<'_>) {
        handle.slot.store(0, Ordering::Release);
    }

    /// Calls `f` for every visible entry in buckets `[lo, hi)`.
    pub fn for_each_entry<'a>(
        &'a self,
        buckets: std::ops::Range<u64>,
        mut f: impl FnMut(EntryHandle<'a>),
    ) {
        for bucket in buckets {
            let _ = self.scan(bucket, |slot| {
                let e = BucketEntry(slot.load(Ordering::Acquire));
                if !e.is_free() && !e.is_tentative() {
                    f(EntryHandle {
                        slot,
                        bucket,
                        tag: e.tag(),
                    });
                }
                None::<()>
            });
        }
    }

    /// Hash value that selects (bucket, tag) in this table.
    pub fn representative_hash(bucket: u64, tag: u16) -> u64 {
        bucket | ((tag as u64 & TAG_MASK) << TAG_SHIFT)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::collections::HashMap;
    use std::sync::Arc;

    fn h(bucket: u64, tag: u16) -> u64 {
        HashIndex::representative_hash(bucket, tag)
    }

    #[test]
    fn bucket_is_one_cacheline() {
        assert_eq!(std::mem::size_of::<Bucket>(), 64);
        assert_eq!(std::mem::align_of::<Bucket>(), 64);
    }

    #[test]
    fn config_validation() {
        assert!(HashIndex::new(IndexConfig::new(3)).is_err());
        assert!(HashIndex::new(IndexConfig::new(1)).is_err());
        assert!(HashIndex::new(IndexConfig::new(2)).is_ok());
    }

    #[test]
    fn empty_index_finds_nothing() {
        let idx = HashIndex::new(IndexConfig::new(16)).unwrap();
        assert!(idx.find_entry(0xdead_beef).is_none());
    }

    #[test]
    fn write_then_read() {
        let idx = HashIndex::new(IndexConfig::new(16)).unwrap();
        let hash = 0x1234_5678_9abc_def0;
        let e = idx.find_or_create_entry(hash).unwrap();
        assert!(e.load().address().is_null());
        let cur = e.load();
        assert!(idx.try_update_entry(&e, cur, cur.with_address(Address::new(4096))));
        let found = idx.find_entry(hash).unwrap();
        assert_eq!(found.load().address(), Address::new(4096));
    }

    #[test]
    fn tag_zero_entry_is_not_free() {
        let idx = HashIndex::new(IndexConfig::new(4)).unwrap();
        let e = idx.find_or_create_entry(h(1, 0)).unwrap();
        assert!(!e.load().is_free());
        assert!(idx.find_entry(h(1, 0)).is_some());
    }

    #[test]
    fn stale_update_fails() {
        let idx = HashIndex::new(IndexConfig::new(4)).unwrap();
        let e = idx.find_or_create_entry(h(0, 9)).unwrap();
        let old = e.load();
        assert!(idx.try_update_entry(&e, old, old.with_address(Address::new(64))));
        assert!(!idx.try_update_entry(&e, old, old.with_address(Address::new(128))));
        assert_eq!(e.load().address(), Address::new(64));
    }

    #[test]
    fn eighth_tag_overflows() {
        let idx = HashIndex::new(IndexConfig::new(4)).unwrap();
        for tag in 0..8u16 {
            let e = idx.find_or_create_entry(h(2, tag)).unwrap();
            let cur = e.load();
            idx.try_update_entry(&e, cur, cur.with_address(Address::new(64 * (tag as u64 + 1))));
        }
        for tag in 0..8u16 {
            let e = idx.find_entry(h(2, tag)).unwrap();
            assert_eq!(e.load().address(), Address::new(64 * (tag as u64 + 1)));
        }
    }

    #[test]
    fn create_delete_create() {
        let idx = HashIndex::new(IndexConfig::new(4)).unwrap();
        let e = idx.find_or_create_entry(h(0, 1)).unwrap();
        idx.delete_entry(&e);
        assert!(idx.find_entry(h(0, 1)).is_none());
        let e2 = idx.find_or_create_entry(h(0, 1)).unwrap();
        assert!(std::ptr::eq(e.slot, e2.slot));
    }

    #[test]
    fn exhausted_pool() {
        let idx = HashIndex::new(IndexConfig {
            bucket_count: 2,
            overflow_buckets: 1,
        })
        .unwrap();
        for tag in 0..14u16 {
            idx.find_or_create_entry(h(0, tag)).unwrap();
        }
        assert_eq!(
            idx.find_or_create_entry(h(0, 14)).unwrap_err(),
            IndexError::Exhausted
        );
    }

    /// Single-threaded model check against a (bucket, tag) -> address map.
    #[test]
    fn matches_reference_model() {
        let idx = HashIndex::new(IndexConfig {
            bucket_count: 64,
            overflow_buckets: 4096,
        })
        .unwrap();
        let mut model: HashMap<(u64, u16), u64> = HashMap::new();
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for i in 0..100_000u64 {
            // Narrow tag space so collisions inside a bucket are common.
            let bucket = rng.random_range(0..64u64);
            let tag = rng.random_range(0..24u16);
            let noise = rng.random::<u64>() & !((TAG_MASK << TAG_SHIFT) | 63);
            let hash = h(bucket, tag) | noise;
            match rng.random_range(0..4) {
                0 => {
                    let got = idx.find_entry(hash).map(|e| e.load().address().raw());
                    assert_eq!(got, model.get(&(bucket, tag)).copied(), "step {i}");
                }
                1 | 2 => {
                    let e = idx.find_or_create_entry(hash).unwrap();
                    let addr = (i + 1) * 8;
                    let cur = e.load();
                    assert!(idx.try_update_entry(&e, cur, cur.with_address(Address::new(addr))));
                    model.insert((bucket, tag), addr);
                }
                _ => {
                    if let Some(e) = idx.find_entry(hash) {
                        idx.delete_entry(&e);
                    }
                    model.remove(&(bucket, tag));
                }
            }
        }
    }

    fn assert_unique(idx: &HashIndex) {
        let mut seen = std::collections::HashSet::new();
        idx.for_each_entry(0..idx.bucket_count(), |e| {
            assert!(seen.insert((e.bucket(), e.tag())), "duplicate {:?}", e);
        });
    }

    #[test]
    fn concurrent_create_same_hash_returns_same_slot() {
        for round in 0..20 {
            let idx = Arc::new(HashIndex::new(IndexConfig::new(8)).unwrap());
            let hash = h(3, 77 + round);
            let handles: Vec<_> = (0..8)
                .map(|_| {
                    let idx = idx.clone();
                    std::thread::spawn(move || {
                        let e = idx.find_or_create_entry(hash).unwrap();
                        e.slot as *const AtomicU64 as usize
                    })
                })
                .collect();
            let ptrs: Vec<usize> = handles.into_iter().map(|h| h.join().unwrap()).collect();
            assert!(ptrs.windows(2).all(|w| w[0] == w[1]));
            assert_unique(&idx);
        }
    }

    #[test]
    fn concurrent_mixed_workload_stays_unique() {
        let idx = Arc::new(
            HashIndex::new(IndexConfig {
                bucket_count: 16,
                overflow_buckets: 1024,
            })
            .unwrap(),
        );
        let threads: Vec<_> = (0..8)
            .map(|t| {
                let idx = idx.clone();
                std::thread::spawn(move || {
                    let mut rng = rand::rngs::StdRng::seed_from_u64(t);
                    for _ in 0..5_000 {
                        let hash = h(rng.random_range(0..16), rng.random_range(0..20));
                        let e = idx.find_or_create_entry(hash).unwrap();
                        let cur = e.load();
                        idx.try_update_entry(&e, cur, cur.with_address(Address::new(64)));
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_unique(&idx);
    }

    #[test]
    fn racing_updates_have_one_winner() {
        let idx = Arc::new(HashIndex::new(IndexConfig::new(4)).unwrap());
        let hash = h(1, 5);
        for round in 0..200u64 {
            let e = idx.find_or_create_entry(hash).unwrap();
            let expected = e.load();
            let wins: usize = (0..4)
                .map(|t| {
                    let idx = idx.clone();
                    std::thread::spawn(move || {
                        let e = idx.find_entry(hash).unwrap();
                        idx.try_update_entry(
                            &e,
                            expected,
                            expected.with_address(Address::new((round * 4 + t + 1) * 8)),
                        ) as usize
                    })
                })
                .map(|j| j.join().unwrap())
                .sum();
            assert_eq!(wins, 1);
        }
    }
}
