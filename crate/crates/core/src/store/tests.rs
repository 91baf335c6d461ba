use super::*;
use crate::epoch::EpochManager;
use crate::shared_tier::MemSharedTier;
use proptest::prelude::*;
use std::collections::HashMap;

struct Fixture {
    _dir: tempfile::TempDir,
    store: Arc<Store>,
}

fn fixture_on(log_id: u64, shared: Arc<dyn SharedTier>, memory_pages: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = StoreConfig::new(log_id, dir.path());
    cfg.log.page_bits = 12;
    cfg.log.memory_pages = memory_pages;
    cfg.log.mutable_fraction = 0.5;
    cfg.log.max_record_bytes = 512;
    cfg.index = IndexConfig::new(1024);
    cfg.max_value_bytes = 256;
    let epoch = Arc::new(EpochManager::default());
    let store = Store::open(cfg, epoch, shared).unwrap();
    Fixture { _dir: dir, store }
}

fn fixture(memory_pages: u64) -> Fixture {
    fixture_on(1, Arc::new(MemSharedTier::new(4096)), memory_pages)
}

fn get(s: &mut StoreSession, key: u64) -> Option<Vec<u8>> {
    match s.execute_blocking(key, Op::Read).unwrap() {
        Status::Found(v) => Some(v),
        Status::NotFound => None,
        other => panic!("unexpected {other:?}"),
    }
}

fn put(s: &mut StoreSession, key: u64, v: &[u8]) {
    assert_eq!(s.execute_blocking(key, Op::Upsert(v.to_vec())).unwrap(), Status::Written);
}

fn add(s: &mut StoreSession, key: u64, d: u64) -> u64 {
    match s.execute_blocking(key, Op::Rmw(RmwOp::AddU64(d))).unwrap() {
        Status::Found(v) => u64::from_le_bytes(v[..8].try_into().unwrap()),
        other => panic!("unexpected {other:?}"),
    }
}

fn val(key: u64, len: usize) -> Vec<u8> {
    (0..len).map(|i| (key as u8) ^ (i as u8)).collect()
}

#[test]
fn basic_operations() {
    let f = fixture(8);
    let mut s = f.store.session().unwrap();
    assert_eq!(get(&mut s, 1), None);
    put(&mut s, 1, b"abc");
    assert_eq!(get(&mut s, 1).unwrap(), b"abc");
    put(&mut s, 1, b"xyz");
    assert_eq!(get(&mut s, 1).unwrap(), b"xyz");
    assert_eq!(add(&mut s, 2, 5), 5);
    assert_eq!(add(&mut s, 2, 7), 12);
    // wide values change in place and across lengths
    put(&mut s, 3, &val(3, 100));
    put(&mut s, 3, &val(4, 100));
    assert_eq!(get(&mut s, 3).unwrap(), val(4, 100));
    put(&mut s, 3, &val(5, 40));
    assert_eq!(get(&mut s, 3).unwrap(), val(5, 40));
    assert_eq!(add(&mut s, 3, 1) & 0xff, (val(5, 40)[0] as u64 + 1) & 0xff);
    // a short value growing through a custom rmw
    put(&mut s, 4, b"ab");
    let grow = RmwOp::Custom(Arc::new(|old: Option<&[u8]>| {
        let mut v = old.unwrap_or_default().to_vec();
        v.extend_from_slice(b"cd");
        v
    }));
    let r = s.execute_blocking(4, Op::Rmw(grow)).unwrap();
    assert_eq!(r, Status::Found(b"abcd".to_vec()));
    assert_eq!(get(&mut s, 4).unwrap(), b"abcd");
    assert_eq!(
        s.execute_blocking(99, Op::RmwExisting(RmwOp::AddU64(1))).unwrap(),
        Status::NotFound
    );
    assert!(matches!(
        s.upsert(5, &[0; 300]),
        Err(StoreError::ValueTooLarge(300))
    ));
}

#[test]
fn reads_through_storage_match_reference_map() {
    let f = fixture(4);
    let mut s = f.store.session().unwrap();
    let mut model = HashMap::new();
    let mut rng = rand::rng();
    use rand::Rng;
    for i in 0..20_000u64 {
        let key = rng.random_range(0..2_000u64);
        match rng.random_range(0..3) {
            0 => {
                let v = val(i, rng.random_range(1..64));
                put(&mut s, key, &v);
                model.insert(key, v);
            }
            1 => {
                let got = add(&mut s, key, 3);
                let e = model.entry(key).or_insert_with(|| 0u64.to_le_bytes().to_vec());
                let upd = RmwOp::AddU64(3).apply(Some(e));
                *e = upd;
                assert_eq!(got, u64::from_le_bytes(e[..8].try_into().unwrap()));
            }
            _ => assert_eq!(get(&mut s, key), model.get(&key).cloned(), "key {key}"),
        }
    }
    assert!(f.store.log().head() > Address::new(crate::log::START_ADDRESS));
    for (k, v) in &model {
        assert_eq!(get(&mut s, *k).as_ref(), Some(v));
    }
}

#[test]
fn chains_survive_read_only_shift() {
    let f = fixture(8);
    let mut s = f.store.session().unwrap();
    for k in 0..500 {
        put(&mut s, k, &val(k, 16));
    }
    let tail = f.store.log().seal_tail_page();
    f.store.log().shift_read_only(tail, None);
    f.store.epoch().bump();
    for k in 0..500 {
        put(&mut s, k, &val(k + 1, 16));
    }
    for k in 0..500 {
        assert_eq!(get(&mut s, k).unwrap(), val(k + 1, 16));
    }
    assert!(f.store.stats().rcu >= 1000);
}

#[test]
fn concurrent_counters_are_conserved() {
    let f = fixture(4);
    let threads = 8;
    let per = 20_000u64;
    let keys = 200u64;
    std::thread::scope(|sc| {
        for t in 0..threads {
            let store = f.store.clone();
            sc.spawn(move || {
                let mut s = store.session().unwrap();
                let mut done = 0;
                for i in 0..per {
                    let key = (i * 7 + t * 13) % keys;
                    match s.rmw(key, RmwOp::AddU64(1)).unwrap() {
                        Status::Pending(_) => {}
                        _ => done += 1,
                    }
                    for c in s.complete_pending(false) {
                        c.result.unwrap();
                        done += 1;
                    }
                }
                for c in s.complete_pending(true) {
                    c.result.unwrap();
                    done += 1;
                }
                assert_eq!(done, per);
            });
        }
    });
    let mut s = f.store.session().unwrap();
    let total: u64 = (0..keys)
        .map(|k| get(&mut s, k).map_or(0, |v| u64::from_le_bytes(v[..8].try_into().unwrap())))
        .sum();
    assert_eq!(total, threads * per);
}

#[test]
fn fuzzy_region_defers_updates() {
    let f = fixture(8);
    let mut s = f.store.session().unwrap();
    put(&mut s, 1, &7u64.to_le_bytes());
    // move read-only past the record without letting the epoch catch up
    s.protect().unwrap();
    let tail = f.store.log().seal_tail_page();
    f.store.log().shift_read_only(tail, Some(s.thread()));
    let st = s.rmw(1, RmwOp::AddU64(1)).unwrap();
    let r = match st {
        Status::Pending(id) => {
            let c = s.complete_pending(true);
            assert_eq!(c[0].id, id);
            c.into_iter().next().unwrap().result.unwrap()
        }
        other => other,
    };
    assert_eq!(r, Status::Found(8u64.to_le_bytes().to_vec()));
    s.unprotect();
    assert_eq!(get(&mut s, 1).unwrap(), 8u64.to_le_bytes());
}

#[test]
fn queued_operations_keep_key_order() {
    let f = fixture(4);
    let mut s = f.store.session().unwrap();
    for k in 0..3000 {
        put(&mut s, k, &val(k, 32));
    }
    f.store.log().evict_all().unwrap();
    let a = s.rmw(5, RmwOp::AddU64(1)).unwrap();
    let b = s.upsert(5, b"final").unwrap();
    let c = s.read(5).unwrap();
    assert!(matches!(a, Status::Pending(_)));
    assert!(matches!(b, Status::Pending(_)));
    assert!(matches!(c, Status::Pending(_)));
    let done = s.complete_pending(true);
    assert_eq!(done.len(), 3);
    assert_eq!(done[2].result.as_ref().unwrap(), &Status::Found(b"final".to_vec()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn history_matches_model(ops in prop::collection::vec((0u64..40, 0u8..5, 1usize..40), 1..300)) {
        let f = fixture(4);
        let mut s = f.store.session().unwrap();
        let mut model: HashMap<u64, Vec<u8>> = HashMap::new();
        for (i, (key, kind, len)) in ops.into_iter().enumerate() {
            match kind {
                0 => { let v = val(i as u64, len); put(&mut s, key, &v); model.insert(key, v); }
                1 => {
                    let got = s.execute_blocking(key, Op::Rmw(RmwOp::AddU64(2))).unwrap();
                    let e = RmwOp::AddU64(2).apply(model.get(&key).map(|v| &v[..]));
                    prop_assert_eq!(got, Status::Found(e.clone()));
                    model.insert(key, e);
                }
                2 => prop_assert_eq!(get(&mut s, key), model.get(&key).cloned()),
                3 => { f.store.log().evict_all().unwrap(); }
                _ => {
                    let tail = f.store.log().seal_tail_page();
                    f.store.log().shift_read_only(tail, None);
                }
            }
        }
        for (k, v) in &model {
            let got = get(&mut s, *k);
            prop_assert_eq!(got.as_ref(), Some(v));
        }
    }
}

fn all_keys_in(range: HashRange, n: u64) -> Vec<u64> {
    (0..n).filter(|k| range.contains(crate::hash::key_hash(*k))).collect()
}

struct Pair {
    src: Fixture,
    dst: Fixture,
    range: HashRange,
    model: HashMap<u64, Vec<u8>>,
}

/// Source with 2000 keys, half of them updated after an eviction so chains
/// span memory and storage.
fn pair() -> Pair {
    pair_on(Arc::new(MemSharedTier::new(4096)))
}

fn pair_on(shared: Arc<dyn SharedTier>) -> Pair {
    let src = fixture_on(10, shared.clone(), 16);
    let dst = fixture_on(20, shared, 64);
    let mut s = src.store.session().unwrap();
    let mut model = HashMap::new();
    for k in 0..2000 {
        put(&mut s, k, &val(k, 24));
        model.insert(k, val(k, 24));
    }
    let tail = src.store.log().evict_all().unwrap();
    src.store.log().flush_to_shared(tail).unwrap();
    for k in (0..2000).step_by(2) {
        put(&mut s, k, &val(k + 7, 24));
        model.insert(k, val(k + 7, 24));
    }
    Pair {
        src,
        dst,
        range: HashRange::new(0, 1 << 62),
        model,
    }
}

fn migrate(p: &Pair, mode: WalkMode) -> (u64, HashSet<u64>) {
    let ranges = RangeSet::from_ranges([p.range]);
    let mut ss = p.src.store.session().unwrap();
    let mut ds = p.dst.store.session().unwrap();
    p.dst.store.begin_receiving(ranges.clone(), p.src.store.log_id());
    let mut items = Vec::new();
    let n = p.src.store.index().bucket_count();
    p.src
        .store
        .walk_region(&mut ss, &ranges, 0..n, mode, &mut |i| items.push(i))
        .unwrap();
    let sent: HashSet<u64> = items
        .iter()
        .filter_map(|i| match i {
            MigratedItem::Record { key, .. } => Some(*key),
            _ => None,
        })
        .collect();
    if mode == WalkMode::ScanLog {
        p.src
            .store
            .scan_storage_for_migration(&ranges, &sent, &mut |i| items.push(i))
            .unwrap();
    }
    let bytes: usize = items.iter().map(|i| i.encoded_len()).sum();
    let mut buf = Vec::new();
    for i in &items {
        i.encode(&mut buf);
    }
    let mut r = crate::codec::Reader::new(&buf);
    let decoded: Vec<_> = (0..items.len()).map(|_| MigratedItem::decode(&mut r).unwrap()).collect();
    assert_eq!(decoded, items);
    p.dst.store.insert_migrated(&mut ds, &items).unwrap();
    (bytes as u64, sent)
}

#[test]
fn indirection_migration_is_complete_without_local_reads() {
    let p = pair();
    let before = p.src.store.log().stats();
    let (_, sent) = migrate(&p, WalkMode::Indirection);
    let after = p.src.store.log().stats();
    assert_eq!(after.local(crate::log::ReadPurpose::Migration), before.local(crate::log::ReadPurpose::Migration));
    assert!(!sent.is_empty());
    let mut ds = p.dst.store.session().unwrap();
    for k in all_keys_in(p.range, 2000) {
        assert_eq!(get(&mut ds, k).as_ref(), p.model.get(&k), "key {k}");
    }
    let st = p.dst.store.stats();
    assert!(st.indirection_fetches > 0);
    // keys outside the range stay unknown at the target
    let outside = (0..2000).find(|k| !p.range.contains(crate::hash::key_hash(*k))).unwrap();
    assert_eq!(get(&mut ds, outside), None);
}

#[test]
fn scan_log_migration_is_complete() {
    let p = pair();
    let (bytes_scan, _) = migrate(&p, WalkMode::ScanLog);
    assert!(p.src.store.log().stats().local(crate::log::ReadPurpose::Migration) > 0);
    let mut ds = p.dst.store.session().unwrap();
    for k in all_keys_in(p.range, 2000) {
        assert_eq!(get(&mut ds, k).as_ref(), p.model.get(&k), "key {k}");
    }
    assert_eq!(p.dst.store.stats().indirection_fetches, 0);
    let q = pair();
    let (bytes_ind, _) = migrate(&q, WalkMode::Indirection);
    assert!(bytes_scan > 0 && bytes_ind > 0);
}

#[test]
fn concurrent_lookups_share_one_fetch() {
    let latency = crate::shared_tier::LatencyModel {
        read_latency: std::time::Duration::from_millis(5),
        ..Default::default()
    };
    let p = pair_on(Arc::new(MemSharedTier::with_latency(4096, latency)));
    migrate(&p, WalkMode::Indirection);
    // an odd key was never rewritten, so it lives only on the source's storage
    let key = all_keys_in(p.range, 2000).into_iter().find(|k| k % 2 == 1).unwrap();
    let mut sessions: Vec<_> = (0..6).map(|_| p.dst.store.session().unwrap()).collect();
    let mut ids = Vec::new();
    for s in sessions.iter_mut() {
        ids.push(s.read(key).unwrap());
    }
    assert!(ids.iter().all(|st| matches!(st, Status::Pending(_))));
    assert_eq!(p.dst.store.stats().indirection_fetches, 1);
    for s in sessions.iter_mut() {
        let c = s.complete_pending(true);
        assert_eq!(c[0].result.as_ref().unwrap(), &Status::Found(p.model[&key].clone()));
    }
    assert_eq!(p.dst.store.stats().indirection_fetches, 1);
}

#[test]
fn compaction_forwards_unfetched_records_and_retires_indirections() {
    let p = pair();
    migrate(&p, WalkMode::Indirection);
    let keys = all_keys_in(p.range, 2000);
    let mut ds = p.dst.store.session().unwrap();
    // demand-fetch half of the cold keys
    let cold: Vec<u64> = keys.iter().copied().filter(|k| k % 2 == 1).collect();
    let fetched: HashSet<u64> = cold.iter().copied().step_by(2).collect();
    for k in &fetched {
        assert_eq!(get(&mut ds, *k).as_ref(), p.model.get(k));
    }
    let mut ss = p.src.store.session().unwrap();
    let tail = p.src.store.log().evict_all().unwrap();
    let mut owned = RangeSet::full();
    owned.remove(p.range);
    let mut forwarded = Vec::new();
    let report = p
        .src
        .store
        .compact(&mut ss, tail, &owned, &mut |items| {
            forwarded.extend(items);
            Ok(())
        })
        .unwrap();
    assert_eq!(report.truncated_to, tail);
    // every forwarded key is either fetched already (discarded) or inserted
    let (ins, disc) = p
        .dst
        .store
        .insert_forwarded(&mut ds, p.src.store.log_id(), &forwarded)
        .unwrap();
    let expect_ins = forwarded
        .iter()
        .filter(|i| matches!(i, MigratedItem::Record { key, .. } if !fetched.contains(key) && cold.contains(key)))
        .count() as u64;
    assert_eq!(ins, expect_ins);
    assert_eq!(ins + disc, forwarded.len() as u64);
    p.dst.store.set_watermark(p.src.store.log_id(), tail);
    let audit = p.dst.store.audit(&mut ds, p.range).unwrap();
    assert_eq!(audit.live_indirections, 0);
    assert_eq!(audit.values.len(), keys.len());
    for k in &keys {
        assert_eq!(audit.values.get(k), p.model.get(k));
        assert_eq!(get(&mut ds, *k).as_ref(), p.model.get(k));
    }
    // source keeps serving what it still owns
    let mine = (0..2000).find(|k| owned.contains_key(*k)).unwrap();
    assert_eq!(get(&mut ss, mine).as_ref(), p.model.get(&mine));
}

#[test]
fn sampling_copies_old_records_once() {
    let f = fixture(16);
    let mut s = f.store.session().unwrap();
    for k in 0..300 {
        put(&mut s, k, &val(k, 16));
    }
    f.store.log().evict_all().unwrap();
    let hook = f.store.begin_sampling(RangeSet::full(), 4096);
    for _ in 0..2 {
        for k in 0..10 {
            assert_eq!(get(&mut s, k).unwrap(), val(k, 16));
        }
    }
    assert_eq!(f.store.stats().sample_copies, 10);
    assert_eq!(hook.sampled_keys(), (0..10).collect::<Vec<_>>());
    let small = f.store.begin_sampling(RangeSet::full(), 3);
    for k in 20..30 {
        get(&mut s, k);
    }
    assert_eq!(small.sampled_keys().len(), 3);
    assert_eq!(small.overflow(), 7);
    assert_eq!(f.store.stats().sample_copies, 20);
    f.store.end_sampling();
}

#[test]
fn dead_zone_hides_stale_records() {
    let f = fixture(8);
    let mut s = f.store.session().unwrap();
    put(&mut s, 1, b"old");
    let r = HashRange::FULL;
    f.store.begin_receiving(RangeSet::from_ranges([r]), 99);
    assert_eq!(get(&mut s, 1), None);
    put(&mut s, 1, b"new");
    assert_eq!(get(&mut s, 1).unwrap(), b"new");
    assert_eq!(f.store.receive_hook().unwrap().written_keys(), vec![1]);
}
