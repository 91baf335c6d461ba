//! Record layout inside the log.
//!
//! Records are 8-byte aligned and never straddle a page. Three header words
//! precede the value:
//!
//! ```text
//! word 0  info   previous_address:48 | flags:8 | unused:8
//! word 1  meta   value_len:32 | tag:14 | unused:2 | key_len:16
//! word 2  key
//! word 3+ value bytes, little-endian, zero padded to a word
//! ```
//!
//! A zero `meta` word marks page padding (every real record has `key_len = 8`).
//! Info is written last on insert so a record is complete once its info word is
//! visible; it is published to other threads through the index entry CAS.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::address::{Address, ADDRESS_MASK};

pub const HEADER_BYTES: u64 = 24;
pub const HEADER_WORDS: usize = 3;
const KEY_LEN: u64 = 8;

const FLAG_SHIFT: u32 = 48;
pub const FLAG_TOMBSTONE: u64 = 1 << FLAG_SHIFT;
pub const FLAG_INVALID: u64 = 1 << (FLAG_SHIFT + 1);
pub const FLAG_INDIRECTION: u64 = 1 << (FLAG_SHIFT + 2);
pub const FLAG_LOCKED: u64 = 1 << (FLAG_SHIFT + 3);

#[inline]
pub fn record_size(value_len: usize) -> u64 {
    HEADER_BYTES + (value_len as u64).div_ceil(8) * 8
}

#[derive(Clone, Copy, PartialEq, Eq, Default)]
pub struct RecordInfo(u64);

impl RecordInfo {
    pub fn new(previous: Address) -> Self {
        RecordInfo(previous.raw())
    }

    pub fn from_raw(raw: u64) -> Self {
        RecordInfo(raw)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn previous_address(self) -> Address {
        Address::new(self.0 & ADDRESS_MASK)
    }

    pub fn with_flag(self, flag: u64) -> Self {
        RecordInfo(self.0 | flag)
    }

    pub fn is_tombstone(self) -> bool {
        self.0 & FLAG_TOMBSTONE != 0
    }

    pub fn is_invalid(self) -> bool {
        self.0 & FLAG_INVALID != 0
    }

    pub fn is_indirection(self) -> bool {
        self.0 & FLAG_INDIRECTION != 0
    }

    pub fn is_locked(self) -> bool {
        self.0 & FLAG_LOCKED != 0
    }
}

impl std::fmt::Debug for RecordInfo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RecordInfo(prev={:?}", self.previous_address())?;
        if self.is_tombstone() {
            write!(f, ", tombstone")?;
        }
        if self.is_invalid() {
            write!(f, ", invalid")?;
        }
        if self.is_indirection() {
            write!(f, ", indirection")?;
        }
        write!(f, ")")
    }
}

#[inline]
pub fn encode_meta(value_len: usize, tag: u16) -> u64 {
    value_len as u64 | ((tag as u64 & 0x3fff) << 32) | (KEY_LEN << 48)
}

#[inline]
pub fn meta_value_len(meta: u64) -> usize {
    (meta & 0xffff_ffff) as usize
}

#[inline]
pub fn meta_tag(meta: u64) -> u16 {
    ((meta >> 32) & 0x3fff) as u16
}

/// Borrowed view of a memory-resident record.
#[derive(Clone, Copy)]
pub struct RecordRef<'a> {
    address: Address,
    words: &'a [AtomicU64],
}

impl<'a> RecordRef<'a> {
    pub(crate) fn new(address: Address, words: &'a [AtomicU64]) -> Self {
        RecordRef { address, words }
    }

    pub fn address(&self) -> Address {
        self.address
    }

    pub fn info(&self) -> RecordInfo {
        RecordInfo(self.words[0].load(Ordering::Acquire))
    }

    pub fn meta(&self) -> u64 {
        self.words[1].load(Ordering::Acquire)
    }

    pub fn tag(&self) -> u16 {
        meta_tag(self.meta())
    }

    pub fn key(&self) -> u64 {
        self.words[2].load(Ordering::Acquire)
    }

    pub fn value_len(&self) -> usize {
        meta_value_len(self.meta())
    }

    pub fn size(&self) -> u64 {
        record_size(self.value_len())
    }

    /// Atomic word holding the first 8 value bytes.
    pub fn value_word(&self) -> &'a AtomicU64 {
        &self.words[HEADER_WORDS]
    }

    pub fn read_value(&self) -> Vec<u8> {
        let len = self.value_len();
        let mut out = Vec::with_capacity(len.div_ceil(8) * 8);
        for w in &self.words[HEADER_WORDS..HEADER_WORDS + len.div_ceil(8)] {
            out.extend_from_slice(&w.load(Ordering::Acquire).to_le_bytes());
        }
        out.truncate(len);
        out
    }

    /// Overwrites the value in place; `value.len()` must equal the stored length.
    pub fn write_value(&self, value: &[u8]) {
        debug_assert_eq!(value.len(), self.value_len());
        store_value(&self.words[HEADER_WORDS..], value);
    }

    /// Spins until the record lock bit is acquired.
    pub fn lock(&self) {
        let w = &self.words[0];
        loop {
            let cur = w.load(Ordering::Acquire);
            if cur & FLAG_LOCKED == 0
                && w
                    .compare_exchange_weak(
                        cur,
                        cur | FLAG_LOCKED,
                        Ordering::AcqRel,
                        Ordering::Acquire,
                    )
                    .is_ok()
            {
                return;
            }
            std::hint::spin_loop();
        }
    }

    pub fn unlock(&self) {
        self.words[0].fetch_and(!FLAG_LOCKED, Ordering::Release);
    }

    pub fn set_flag(&self, flag: u64) {
        self.words[0].fetch_or(flag, Ordering::AcqRel);
    }

    pub fn to_owned_record(&self) -> OwnedRecord {
        OwnedRecord {
            address: self.address,
            info: self.info(),
            tag: self.tag(),
            key: self.key(),
            value: self.read_value(),
        }
    }
}

fn store_value(words: &[AtomicU64], value: &[u8]) {
    for (i, chunk) in value.chunks(8).enumerate() {
        let mut buf = [0u8; 8];
        buf[..chunk.len()].copy_from_slice(chunk);
        words[i].store(u64::from_le_bytes(buf), Ordering::Release);
    }
}

/// Writes a complete record; info goes last.
pub(crate) fn write_record(
    words: &[AtomicU64],
    info: RecordInfo,
    tag: u16,
    key: u64,
    value: &[u8],
) {
    words[1].store(encode_meta(value.len(), tag), Ordering::Relaxed);
    words[2].store(key, Ordering::Relaxed);
    store_value(&words[HEADER_WORDS..], value);
    words[0].store(info.raw(), Ordering::Release);
}

/// Decoded copy of a record, used for records read from storage.
#[derive(Clone, PartialEq, Eq)]
pub struct OwnedRecord {
    pub address: Address,
    pub info: RecordInfo,
    pub tag: u16,
    pub key: u64,
    pub value: Vec<u8>,
}

impl std::fmt::Debug for OwnedRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OwnedRecord")
            .field("address", &self.address)
            .field("info", &self.info)
            .field("key", &self.key)
            .field("value_len", &self.value.len())
            .finish()
    }
}

impl OwnedRecord {
    /// Parses a record from raw log bytes starting at `address`. Returns `None`
    /// for padding or truncated input.
    pub fn parse(address: Address, bytes: &[u8]) -> Option<OwnedRecord> {
        if bytes.len() < HEADER_BYTES as usize {
            return None;
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        let meta = word(1);
        if meta == 0 {
            return None;
        }
        let len = meta_value_len(meta);
        let end = HEADER_BYTES as usize + len;
        if bytes.len() < end {
            return None;
        }
        Some(OwnedRecord {
            address,
            info: RecordInfo(word(0) & !FLAG_LOCKED),
            tag: meta_tag(meta),
            key: word(2),
            value: bytes[HEADER_BYTES as usize..end].to_vec(),
        })
    }

    pub fn size(&self) -> u64 {
        record_size(self.value.len())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.size() as usize);
        out.extend_from_slice(&self.info.raw().to_le_bytes());
        out.extend_from_slice(&encode_meta(self.value.len(), self.tag).to_le_bytes());
        out.extend_from_slice(&self.key.to_le_bytes());
        out.extend_from_slice(&self.value);
        out.resize(self.size() as usize, 0);
        out
    }
}
