//! Hash-range ownership, per-server view numbers and their propagation to
//! server threads.
//!
//! Ranges are half-open intervals `[lo, hi)` of the 64-bit key-hash space;
//! `hi == 0` stands for 2^64 so that the last range can reach the end.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use arc_swap::ArcSwap;
use thiserror::Error;

use crate::codec::{DecodeError, Put, Reader};
use crate::epoch::EpochManager;
use crate::hash::key_hash;

pub type ServerId = u32;
pub type ViewNumber = u64;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct HashRange {
    pub lo: u64,
    pub hi: u64,
}

impl HashRange {
    pub const FULL: HashRange = HashRange { lo: 0, hi: 0 };

    /// Panics unless `lo < hi` (with `hi == 0` read as 2^64).
    pub fn new(lo: u64, hi: u64) -> Self {
        let r = HashRange { lo, hi };
        assert!((lo as u128) < r.end(), "empty hash range {lo:#x}:{hi:#x}");
        r
    }

    fn from_bounds(lo: u128, end: u128) -> Self {
        HashRange {
            lo: lo as u64,
            hi: if end == 1 << 64 { 0 } else { end as u64 },
        }
    }

    /// Exclusive upper bound as a 128-bit number.
    pub fn end(&self) -> u128 {
        if self.hi == 0 {
            1 << 64
        } else {
            self.hi as u128
        }
    }

    pub fn len(&self) -> u128 {
        self.end() - self.lo as u128
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn contains(&self, hash: u64) -> bool {
        hash >= self.lo && (self.hi == 0 || hash < self.hi)
    }

    pub fn overlaps(&self, other: &HashRange) -> bool {
        (self.lo as u128) < other.end() && (other.lo as u128) < self.end()
    }

    pub fn intersect(&self, other: &HashRange) -> Option<HashRange> {
        let lo = self.lo.max(other.lo) as u128;
        let end = self.end().min(other.end());
        (lo < end).then(|| HashRange::from_bounds(lo, end))
    }

    /// Splits into `n` contiguous pieces of near-equal size.
    pub fn split(&self, n: usize) -> Vec<HashRange> {
        assert!(n > 0 && (n as u128) <= self.len());
        let step = self.len() / n as u128;
        (0..n as u128)
            .map(|i| {
                let lo = self.lo as u128 + i * step;
                let end = if i + 1 == n as u128 { self.end() } else { lo + step };
                HashRange::from_bounds(lo, end)
            })
            .collect()
    }

    /// Leading sub-range covering `fraction` of this range.
    pub fn prefix(&self, fraction: f64) -> HashRange {
        assert!(fraction > 0.0 && fraction <= 1.0);
        let len = ((self.len() as f64) * fraction).max(1.0) as u128;
        HashRange::from_bounds(self.lo as u128, self.lo as u128 + len.min(self.len()))
    }
}

impl fmt::Debug for HashRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:#x}, {:#x})", self.lo, self.end())
    }
}

impl fmt::Display for HashRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}:{:#x}", self.lo, self.hi)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("bad hash range {0:?}: expected lo:hi with decimal or 0x-prefixed hex bounds")]
pub struct ParseRangeError(String);

impl FromStr for HashRange {
    type Err = ParseRangeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseRangeError(s.to_string());
        let num = |t: &str| {
            let t = t.trim();
            match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
                Some(h) => u64::from_str_radix(&h.replace('_', ""), 16),
                None => t.replace('_', "").parse(),
            }
        };
        let (lo, hi) = s.split_once(':').ok_or_else(err)?;
        let (lo, hi) = (num(lo).map_err(|_| err())?, num(hi).map_err(|_| err())?);
        let r = HashRange { lo, hi };
        if (lo as u128) < r.end() {
            Ok(r)
        } else {
            Err(err())
        }
    }
}

/// Sorted, disjoint, coalesced set of ranges with binary-search membership.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct RangeSet {
    ranges: Vec<HashRange>,
}

impl fmt::Debug for RangeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.ranges).finish()
    }
}

impl RangeSet {
    pub fn new() -> Self {
        RangeSet::default()
    }

    pub fn full() -> Self {
        RangeSet {
            ranges: vec![HashRange::FULL],
        }
    }

    pub fn from_ranges(ranges: impl IntoIterator<Item = HashRange>) -> Self {
        let mut s = RangeSet::new();
        for r in ranges {
            s.insert(r);
        }
        s
    }

    pub fn ranges(&self) -> &[HashRange] {
        &self.ranges
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    #[inline]
    pub fn contains(&self, hash: u64) -> bool {
        let i = self.ranges.partition_point(|r| r.lo <= hash);
        i > 0 && self.ranges[i - 1].contains(hash)
    }

    pub fn contains_key(&self, key: u64) -> bool {
        self.contains(key_hash(key))
    }

    pub fn covers(&self, range: &HashRange) -> bool {
        let mut covered = RangeSet::from_ranges([*range]);
        for r in &self.ranges {
            covered.remove(*r);
        }
        covered.is_empty()
    }

    pub fn overlaps(&self, range: &HashRange) -> bool {
        self.ranges.iter().any(|r| r.overlaps(range))
    }

    pub fn insert(&mut self, range: HashRange) {
        let mut lo = range.lo as u128;
        let mut end = range.end();
        let mut kept = Vec::with_capacity(self.ranges.len() + 1);
        for r in &self.ranges {
            if r.end() < lo || (r.lo as u128) > end {
                kept.push(*r);
            } else {
                lo = lo.min(r.lo as u128);
                end = end.max(r.end());
            }
        }
        kept.push(HashRange::from_bounds(lo, end));
        kept.sort_by_key(|r| r.lo);
        self.ranges = kept;
    }

    pub fn remove(&mut self, range: HashRange) {
        let mut kept = Vec::with_capacity(self.ranges.len() + 1);
        for r in &self.ranges {
            if !r.overlaps(&range) {
                kept.push(*r);
                continue;
            }
            if (r.lo as u128) < range.lo as u128 {
                kept.push(HashRange::from_bounds(r.lo as u128, range.lo as u128));
            }
            if range.end() < r.end() {
                kept.push(HashRange::from_bounds(range.end(), r.end()));
            }
        }
        self.ranges = kept;
    }
}

/// Accept iff the batch was tagged with the server's current view. Never
/// looks at keys.
#[inline]
pub fn validate_view(batch_view: ViewNumber, server_view: ViewNumber) -> bool {
    batch_view == server_view
}

/// Per-key baseline: hashes every key and searches the owned ranges.
pub fn validate_hash_per_key(owned: &RangeSet, keys: &[u64], out: &mut Vec<bool>) {
    out.clear();
    out.extend(keys.iter().map(|&k| owned.contains(key_hash(k))));
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MapError {
    #[error("server {0} is not in the map")]
    UnknownServer(ServerId),
    #[error("server {server} does not own {range:?}")]
    NotOwner { server: ServerId, range: HashRange },
    #[error("source and target are both {0}")]
    SameServer(ServerId),
    #[error("map entries overlap or leave a gap near {0:#x}")]
    Coverage(u128),
}

/// Hash ranges to servers plus per-server view numbers.
#[derive(Clone, PartialEq, Eq)]
pub struct OwnershipMap {
    entries: Vec<(HashRange, ServerId)>,
    views: BTreeMap<ServerId, ViewNumber>,
    version: u64,
}

impl fmt::Debug for OwnershipMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OwnershipMap")
            .field("version", &self.version)
            .field("entries", &self.entries)
            .field("views", &self.views)
            .finish()
    }
}

impl OwnershipMap {
    /// One server owning the whole space at view 1.
    pub fn single(server: ServerId) -> Self {
        OwnershipMap {
            entries: vec![(HashRange::FULL, server)],
            views: BTreeMap::from([(server, 1)]),
            version: 1,
        }
    }

    /// Even split of the space over `servers`, in order.
    pub fn even(servers: &[ServerId]) -> Self {
        let entries = HashRange::FULL
            .split(servers.len())
            .into_iter()
            .zip(servers.iter().copied())
            .collect();
        OwnershipMap {
            entries,
            views: servers.iter().map(|&s| (s, 1)).collect(),
            version: 1,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn entries(&self) -> &[(HashRange, ServerId)] {
        &self.entries
    }

    pub fn views(&self) -> &BTreeMap<ServerId, ViewNumber> {
        &self.views
    }

    pub fn view_of(&self, server: ServerId) -> Option<ViewNumber> {
        self.views.get(&server).copied()
    }

    pub fn add_server(&mut self, server: ServerId) -> bool {
        if self.views.contains_key(&server) {
            return false;
        }
        self.views.insert(server, 1);
        self.version += 1;
        true
    }

    pub fn owner_of(&self, hash: u64) -> (ServerId, ViewNumber) {
        let i = self.entries.partition_point(|(r, _)| r.lo <= hash);
        let (_, s) = self.entries[i - 1];
        (s, self.views[&s])
    }

    pub fn owner_of_key(&self, key: u64) -> (ServerId, ViewNumber) {
        self.owner_of(key_hash(key))
    }

    pub fn ranges_of(&self, server: ServerId) -> RangeSet {
        RangeSet::from_ranges(
            self.entries
                .iter()
                .filter(|(_, s)| *s == server)
                .map(|(r, _)| *r),
        )
    }

    pub fn server_view(&self, server: ServerId) -> Option<ServerView> {
        Some(ServerView {
            server,
            view: self.view_of(server)?,
            ranges: self.ranges_of(server),
        })
    }

    /// Moves `ranges` from `source` to `target`, bumping both views and the
    /// map version.
    pub fn transfer(
        &mut self,
        source: ServerId,
        target: ServerId,
        ranges: &[HashRange],
    ) -> Result<(), MapError> {
        if source == target {
            return Err(MapError::SameServer(source));
        }
        for s in [source, target] {
            if !self.views.contains_key(&s) {
                return Err(MapError::UnknownServer(s));
            }
        }
        let owned = self.ranges_of(source);
        for r in ranges {
            if !owned.covers(r) {
                return Err(MapError::NotOwner {
                    server: source,
                    range: *r,
                });
            }
        }
        for r in ranges {
            self.assign(*r, target);
        }
        *self.views.get_mut(&source).unwrap() += 1;
        *self.views.get_mut(&target).unwrap() += 1;
        self.version += 1;
        Ok(())
    }

    fn assign(&mut self, range: HashRange, server: ServerId) {
        let mut out = Vec::with_capacity(self.entries.len() + 2);
        for &(r, s) in &self.entries {
            if !r.overlaps(&range) {
                out.push((r, s));
                continue;
            }
            if r.lo < range.lo {
                out.push((HashRange::from_bounds(r.lo as u128, range.lo as u128), s));
            }
            if range.end() < r.end() {
                out.push((HashRange::from_bounds(range.end(), r.end()), s));
            }
        }
        out.push((range, server));
        out.sort_by_key(|(r, _)| r.lo);
        // coalesce neighbours with the same owner
        let mut merged: Vec<(HashRange, ServerId)> = Vec::with_capacity(out.len());
        for (r, s) in out {
            match merged.last_mut() {
                Some((last, ls)) if *ls == s && last.end() == r.lo as u128 => {
                    *last = HashRange::from_bounds(last.lo as u128, r.end());
                }
                _ => merged.push((r, s)),
            }
        }
        self.entries = merged;
    }

    /// Checks disjointness and full coverage.
    pub fn check(&self) -> Result<(), MapError> {
        let mut next: u128 = 0;
        for (r, s) in &self.entries {
            if r.lo as u128 != next {
                return Err(MapError::Coverage(next));
            }
            if !self.views.contains_key(s) {
                return Err(MapError::UnknownServer(*s));
            }
            next = r.end();
        }
        if next != 1 << 64 {
            return Err(MapError::Coverage(next));
        }
        Ok(())
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.put_u64(self.version);
        out.put_u32(self.entries.len() as u32);
        for (r, s) in &self.entries {
            out.put_u64(r.lo);
            out.put_u64(r.hi);
            out.put_u32(*s);
        }
        out.put_u32(self.views.len() as u32);
        for (s, v) in &self.views {
            out.put_u32(*s);
            out.put_u64(*v);
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let version = r.u64()?;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let (lo, hi, s) = (r.u64()?, r.u64()?, r.u32()?);
            entries.push((HashRange { lo, hi }, s));
        }
        let n = r.u32()? as usize;
        let mut views = BTreeMap::new();
        for _ in 0..n {
            let s = r.u32()?;
            views.insert(s, r.u64()?);
        }
        let map = OwnershipMap {
            entries,
            views,
            version,
        };
        map.check().map_err(|_| DecodeError::Invalid {
            field: "ownership map",
            value: version,
        })?;
        Ok(map)
    }
}

/// What one server owns under one view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerView {
    pub server: ServerId,
    pub view: ViewNumber,
    pub ranges: RangeSet,
}

/// Process-global current view of a server. Threads adopt new views at their
/// own loop boundaries; `install` reports when every thread has done so.
pub struct ViewCell {
    current: ArcSwap<ServerView>,
    number: AtomicU64,
    epoch: Arc<EpochManager>,
}

impl fmt::Debug for ViewCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ViewCell({:?})", self.current.load())
    }
}

impl ViewCell {
    pub fn new(initial: ServerView, epoch: Arc<EpochManager>) -> Self {
        ViewCell {
            number: AtomicU64::new(initial.view),
            current: ArcSwap::from_pointee(initial),
            epoch,
        }
    }

    pub fn view_number(&self) -> ViewNumber {
        self.number.load(Ordering::Acquire)
    }

    pub fn load(&self) -> Arc<ServerView> {
        self.current.load_full()
    }

    /// Replaces the view if `view.view` is newer and schedules `on_adopted`
    /// for once every protected thread has refreshed past this point.
    /// Returns false (and drops the callback) for a stale view.
    pub fn install<F>(&self, view: ServerView, on_adopted: F) -> bool
    where
        F: FnOnce() + Send + 'static,
    {
        let n = view.view;
        if n <= self.view_number() {
            return false;
        }
        self.current.store(Arc::new(view));
        self.number.fetch_max(n, Ordering::AcqRel);
        self.epoch.bump_with_action(on_adopted);
        true
    }

    /// Per-thread adoption: refreshes `local` if the global view moved.
    /// Threads call this right after refreshing their epoch.
    #[inline]
    pub fn adopt(&self, local: &mut Arc<ServerView>) -> bool {
        if local.view != self.view_number() {
            *local = self.load();
            true
        } else {
            false
        }
    }
}
