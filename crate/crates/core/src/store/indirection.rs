//! Stand-in for a record chain that continues in another server's log on the
//! shared tier.

use crate::address::Address;
use crate::codec::{DecodeError, Put, Reader};
use crate::index::{tag_of, HashIndex};
use crate::ownership::HashRange;

pub const ENCODED_LEN: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Indirection {
    /// Newest record of the remaining chain, in the source log.
    pub next_address: Address,
    pub source_log_id: u64,
    pub range: HashRange,
    /// Index entry the chain hung off at the source.
    pub bucket: u64,
    pub tag: u16,
    pub bucket_bits: u8,
}

impl Indirection {
    /// True when `hash` could have a record in the referenced chain.
    pub fn covers(&self, hash: u64) -> bool {
        let mask = (1u64 << self.bucket_bits) - 1;
        self.range.contains(hash) && hash & mask == self.bucket && tag_of(hash) == self.tag
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ENCODED_LEN);
        out.put_u64(self.next_address.raw());
        out.put_u64(self.source_log_id);
        out.put_u64(self.range.lo);
        out.put_u64(self.range.hi);
        out.put_u64(self.bucket);
        out.put_u64(self.tag as u64 | (self.bucket_bits as u64) << 16);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Indirection, DecodeError> {
        let mut r = Reader::new(bytes);
        let next_address = Address::new(r.u64()?);
        let source_log_id = r.u64()?;
        let range = HashRange {
            lo: r.u64()?,
            hi: r.u64()?,
        };
        let bucket = r.u64()?;
        let w = r.u64()?;
        let bucket_bits = (w >> 16) as u8;
        if bucket_bits > 48 || bucket >> bucket_bits != 0 {
            return Err(DecodeError::Invalid {
                field: "bucket",
                value: bucket,
            });
        }
        r.finish()?;
        Ok(Indirection {
            next_address,
            source_log_id,
            range,
            bucket,
            tag: w as u16,
            bucket_bits,
        })
    }

    /// Buckets of a table with `target_bits` bucket bits that can hold keys
    /// of this chain.
    pub fn target_buckets(&self, target_bits: u32) -> Vec<u64> {
        let src = self.bucket_bits as u32;
        if target_bits <= src {
            vec![self.bucket & ((1u64 << target_bits) - 1)]
        } else {
            (0..1u64 << (target_bits - src))
                .map(|j| self.bucket | j << src)
                .collect()
        }
    }

    /// Hash that addresses `(bucket, tag)` in a table.
    pub fn placement_hash(&self, bucket: u64) -> u64 {
        HashIndex::representative_hash(bucket, self.tag)
    }
}
