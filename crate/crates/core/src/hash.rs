//! Key hashing.
//!
//! Keys are 64-bit integers. The key hash is the MurmurHash3 64-bit finalizer
//! applied to `key ^ KEY_HASH_SEED`. It is stable across runs and platforms;
//! ownership ranges, bucket selection and tags are all derived from it.
//!
//! Test vectors (also listed in `docs/wire.md`):
//!
//! | key | hash |
//! |-----|------|
//! | 0 | `0x9ca066f1a4ab2eea` |
//! | 1 | `0x25b775faeca8f520` |
//! | 42 | `0x2d1c8760f8047fc7` |
//! | 0xdeadbeef | `0x6d302c983091a3bf` |

pub const KEY_HASH_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
pub fn fmix64(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    h
}

#[inline]
pub fn key_hash(key: u64) -> u64 {
    fmix64(key ^ KEY_HASH_SEED)
}
