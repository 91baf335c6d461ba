//! Byte-exact message formats. Little-endian throughout; see `docs/wire.md`.
//!
//! Client traffic is request batches answered by response batches. Control
//! messages (migration RPCs, resync, admin) share the same connections and
//! are told apart by their magic.

use crate::address::Address;
use crate::codec::{DecodeError, Put, Reader};
use crate::ownership::{HashRange, ServerId, ViewNumber};
use crate::store::{MigratedItem, WalkMode};

pub const REQUEST_MAGIC: u32 = u32::from_le_bytes(*b"SKVB");
pub const CONTROL_MAGIC: u32 = u32::from_le_bytes(*b"SKVC");

pub const BATCH_HEADER_BYTES: usize = 4 + 8 + 8 + 4 + 4;
pub const REQUEST_HEADER_BYTES: usize = 1 + 8 + 4;
pub const RESPONSE_HEADER_BYTES: usize = 4 + 1 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Read = 1,
    Upsert = 2,
    /// Operand is an 8-byte little-endian delta.
    RmwAdd = 3,
}

impl Opcode {
    pub fn from_u8(v: u8) -> Result<Opcode, DecodeError> {
        match v {
            1 => Ok(Opcode::Read),
            2 => Ok(Opcode::Upsert),
            3 => Ok(Opcode::RmwAdd),
            _ => Err(DecodeError::BadOpcode(v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireRequest {
    pub opcode: Opcode,
    pub key: u64,
    pub value: Vec<u8>,
}

impl WireRequest {
    pub fn encoded_len(&self) -> usize {
        REQUEST_HEADER_BYTES + self.value.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestBatch {
    pub session_id: u64,
    pub view: ViewNumber,
    pub batch_seq: u32,
    pub requests: Vec<WireRequest>,
}

impl RequestBatch {
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.put_u32(REQUEST_MAGIC);
        out.put_u64(self.session_id);
        out.put_u64(self.view);
        out.put_u32(self.batch_seq);
        out.put_u32(self.requests.len() as u32);
        for r in &self.requests {
            out.put_u8(r.opcode as u8);
            out.put_u64(r.key);
            out.put_blob(&r.value);
        }
    }

    pub fn decode(buf: &[u8]) -> Result<RequestBatch, DecodeError> {
        let mut r = Reader::new(buf);
        let magic = r.u32()?;
        if magic != REQUEST_MAGIC {
            return Err(DecodeError::BadMagic(magic));
        }
        let session_id = r.u64()?;
        let view = r.u64()?;
        let batch_seq = r.u32()?;
        let count = r.u32()?;
        if count == 0 {
            return Err(DecodeError::Invalid {
                field: "count",
                value: 0,
            });
        }
        let mut requests = Vec::with_capacity((count as usize).min(r.remaining() / REQUEST_HEADER_BYTES));
        for _ in 0..count {
            let opcode = Opcode::from_u8(r.u8()?)?;
            let key = r.u64()?;
            let value = r.blob()?.to_vec();
            if opcode == Opcode::RmwAdd && value.len() != 8 {
                return Err(DecodeError::Invalid {
                    field: "rmw operand length",
                    value: value.len() as u64,
                });
            }
            requests.push(WireRequest { opcode, key, value });
        }
        r.finish()?;
        Ok(RequestBatch {
            session_id,
            view,
            batch_seq,
            requests,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum BatchStatus {
    Ok = 0,
    ViewRejected = 1,
    /// Carries only completion records; `batch_seq` is 0.
    CompletionsOnly = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ResultStatus {
    Ok = 0,
    NotFound = 1,
    /// Completes later through a completion record.
    Pending = 2,
    /// Not executed; the client must reissue it.
    Retry = 3,
    /// Value holds a UTF-8 message.
    Error = 4,
}

impl ResultStatus {
    fn from_u8(v: u8) -> Result<ResultStatus, DecodeError> {
        Ok(match v {
            0 => ResultStatus::Ok,
            1 => ResultStatus::NotFound,
            2 => ResultStatus::Pending,
            3 => ResultStatus::Retry,
            4 => ResultStatus::Error,
            _ => {
                return Err(DecodeError::Invalid {
                    field: "result status",
                    value: v as u64,
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireResult {
    pub status: ResultStatus,
    pub value: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireCompletion {
    pub orig_seq: u32,
    pub orig_idx: u32,
    pub result: WireResult,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseBatch {
    pub batch_seq: u32,
    pub status: BatchStatus,
    pub server_view: ViewNumber,
    /// Empty unless `status` is `Ok`.
    pub results: Vec<WireResult>,
    pub completions: Vec<WireCompletion>,
}

impl ResponseBatch {
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.put_u32(self.batch_seq);
        out.put_u8(self.status as u8);
        out.put_u64(self.server_view);
        out.put_u32(self.results.len() as u32);
        for r in &self.results {
            out.put_u8(r.status as u8);
            out.put_blob(&r.value);
        }
        out.put_u32(self.completions.len() as u32);
        for c in &self.completions {
            out.put_u32(c.orig_seq);
            out.put_u32(c.orig_idx);
            out.put_u8(c.result.status as u8);
            out.put_blob(&c.result.value);
        }
    }

    pub fn decode(buf: &[u8]) -> Result<ResponseBatch, DecodeError> {
        let mut r = Reader::new(buf);
        let batch_seq = r.u32()?;
        let status = match r.u8()? {
            0 => BatchStatus::Ok,
            1 => BatchStatus::ViewRejected,
            2 => BatchStatus::CompletionsOnly,
            v => {
                return Err(DecodeError::Invalid {
                    field: "batch status",
                    value: v as u64,
                })
            }
        };
        let server_view = r.u64()?;
        let n = r.u32()? as usize;
        if n > 0 && status != BatchStatus::Ok {
            return Err(DecodeError::Invalid {
                field: "results in non-ok batch",
                value: n as u64,
            });
        }
        let mut results = Vec::with_capacity(n.min(r.remaining() / 5));
        for _ in 0..n {
            let status = ResultStatus::from_u8(r.u8()?)?;
            results.push(WireResult {
                status,
                value: r.blob()?.to_vec(),
            });
        }
        let m = r.u32()? as usize;
        let mut completions = Vec::with_capacity(m.min(r.remaining() / 13));
        for _ in 0..m {
            let orig_seq = r.u32()?;
            let orig_idx = r.u32()?;
            let status = ResultStatus::from_u8(r.u8()?)?;
            completions.push(WireCompletion {
                orig_seq,
                orig_idx,
                result: WireResult {
                    status,
                    value: r.blob()?.to_vec(),
                },
            });
        }
        r.finish()?;
        Ok(ResponseBatch {
            batch_seq,
            status,
            server_view,
            results,
            completions,
        })
    }
}

/// Control opcodes.
pub mod op {
    pub const RESYNC: u8 = 1;
    pub const MIGRATE: u8 = 2;
    pub const PREP_FOR_TRANSFER: u8 = 3;
    pub const TRANSFER_OWNERSHIP: u8 = 4;
    pub const PUSH_RECORDS: u8 = 5;
    pub const COMPLETE_MIGRATION: u8 = 6;
    pub const CANCEL: u8 = 7;
    pub const FORWARD_RECORDS: u8 = 8;
    pub const FORWARD_DONE: u8 = 9;
    pub const COMPACT: u8 = 10;
    pub const STATUS: u8 = 11;
    pub const ACK: u8 = 12;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Control {
    /// Lifts the rejection state a view-rejected batch put the connection in.
    Resync { session_id: u64 },
    Migrate {
        target: ServerId,
        ranges: Vec<HashRange>,
        mode: WalkMode,
    },
    PrepForTransfer {
        id: u64,
        source: ServerId,
        source_log_id: u64,
        ranges: Vec<HashRange>,
    },
    TransferOwnership { id: u64, items: Vec<MigratedItem> },
    PushRecords {
        id: u64,
        seq: u32,
        items: Vec<MigratedItem>,
    },
    CompleteMigration { id: u64 },
    Cancel { id: u64 },
    ForwardRecords {
        source_log_id: u64,
        seq: u32,
        items: Vec<MigratedItem>,
    },
    ForwardDone { source_log_id: u64, until: Address },
    /// Compacts the log below `until` (the whole stable part when 0).
    Compact { until: Address },
    Status,
    Ack {
        /// Opcode being answered.
        to: u8,
        id: u64,
        seq: u32,
        ok: bool,
        message: String,
        items: Vec<MigratedItem>,
    },
}

fn put_ranges(out: &mut Vec<u8>, ranges: &[HashRange]) {
    out.put_u32(ranges.len() as u32);
    for r in ranges {
        out.put_u64(r.lo);
        out.put_u64(r.hi);
    }
}

fn get_ranges(r: &mut Reader<'_>) -> Result<Vec<HashRange>, DecodeError> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(r.remaining() / 16));
    for _ in 0..n {
        let range = HashRange {
            lo: r.u64()?,
            hi: r.u64()?,
        };
        if range.is_empty() {
            return Err(DecodeError::Invalid {
                field: "range",
                value: range.lo,
            });
        }
        out.push(range);
    }
    Ok(out)
}

fn put_items(out: &mut Vec<u8>, items: &[MigratedItem]) {
    out.put_u32(items.len() as u32);
    for i in items {
        i.encode(out);
    }
}

fn get_items(r: &mut Reader<'_>) -> Result<Vec<MigratedItem>, DecodeError> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(r.remaining() / 21));
    for _ in 0..n {
        out.push(MigratedItem::decode(r)?);
    }
    Ok(out)
}

impl Control {
    pub fn opcode(&self) -> u8 {
        match self {
            Control::Resync { .. } => op::RESYNC,
            Control::Migrate { .. } => op::MIGRATE,
            Control::PrepForTransfer { .. } => op::PREP_FOR_TRANSFER,
            Control::TransferOwnership { .. } => op::TRANSFER_OWNERSHIP,
            Control::PushRecords { .. } => op::PUSH_RECORDS,
            Control::CompleteMigration { .. } => op::COMPLETE_MIGRATION,
            Control::Cancel { .. } => op::CANCEL,
            Control::ForwardRecords { .. } => op::FORWARD_RECORDS,
            Control::ForwardDone { .. } => op::FORWARD_DONE,
            Control::Compact { .. } => op::COMPACT,
            Control::Status => op::STATUS,
            Control::Ack { .. } => op::ACK,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.put_u32(CONTROL_MAGIC);
        out.put_u8(self.opcode());
        match self {
            Control::Resync { session_id } => out.put_u64(*session_id),
            Control::Migrate {
                target,
                ranges,
                mode,
            } => {
                out.put_u32(*target);
                out.put_u8(match mode {
                    WalkMode::Indirection => 0,
                    WalkMode::ScanLog => 1,
                });
                put_ranges(&mut out, ranges);
            }
            Control::PrepForTransfer {
                id,
                source,
                source_log_id,
                ranges,
            } => {
                out.put_u64(*id);
                out.put_u32(*source);
                out.put_u64(*source_log_id);
                put_ranges(&mut out, ranges);
            }
            Control::TransferOwnership { id, items } => {
                out.put_u64(*id);
                put_items(&mut out, items);
            }
            Control::PushRecords { id, seq, items } => {
                out.put_u64(*id);
                out.put_u32(*seq);
                put_items(&mut out, items);
            }
            Control::CompleteMigration { id } | Control::Cancel { id } => out.put_u64(*id),
            Control::ForwardRecords {
                source_log_id,
                seq,
                items,
            } => {
                out.put_u64(*source_log_id);
                out.put_u32(*seq);
                put_items(&mut out, items);
            }
            Control::ForwardDone {
                source_log_id,
                until,
            } => {
                out.put_u64(*source_log_id);
                out.put_u64(until.raw());
            }
            Control::Compact { until } => out.put_u64(until.raw()),
            Control::Status => {}
            Control::Ack {
                to,
                id,
                seq,
                ok,
                message,
                items,
            } => {
                out.put_u8(*to);
                out.put_u64(*id);
                out.put_u32(*seq);
                out.put_u8(*ok as u8);
                out.put_blob(message.as_bytes());
                put_items(&mut out, items);
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Control, DecodeError> {
        let mut r = Reader::new(buf);
        let magic = r.u32()?;
        if magic != CONTROL_MAGIC {
            return Err(DecodeError::BadMagic(magic));
        }
        let c = match r.u8()? {
            op::RESYNC => Control::Resync {
                session_id: r.u64()?,
            },
            op::MIGRATE => {
                let target = r.u32()?;
                let mode = match r.u8()? {
                    0 => WalkMode::Indirection,
                    1 => WalkMode::ScanLog,
                    v => {
                        return Err(DecodeError::Invalid {
                            field: "mode",
                            value: v as u64,
                        })
                    }
                };
                Control::Migrate {
                    target,
                    mode,
                    ranges: get_ranges(&mut r)?,
                }
            }
            op::PREP_FOR_TRANSFER => Control::PrepForTransfer {
                id: r.u64()?,
                source: r.u32()?,
                source_log_id: r.u64()?,
                ranges: get_ranges(&mut r)?,
            },
            op::TRANSFER_OWNERSHIP => Control::TransferOwnership {
                id: r.u64()?,
                items: get_items(&mut r)?,
            },
            op::PUSH_RECORDS => Control::PushRecords {
                id: r.u64()?,
                seq: r.u32()?,
                items: get_items(&mut r)?,
            },
            op::COMPLETE_MIGRATION => Control::CompleteMigration { id: r.u64()? },
            op::CANCEL => Control::Cancel { id: r.u64()? },
            op::FORWARD_RECORDS => Control::ForwardRecords {
                source_log_id: r.u64()?,
                seq: r.u32()?,
                items: get_items(&mut r)?,
            },
            op::FORWARD_DONE => Control::ForwardDone {
                source_log_id: r.u64()?,
                until: Address::new(r.u64()?),
            },
            op::COMPACT => Control::Compact {
                until: Address::new(r.u64()?),
            },
            op::STATUS => Control::Status,
            op::ACK => {
                let to = r.u8()?;
                let id = r.u64()?;
                let seq = r.u32()?;
                let ok = r.u8()? != 0;
                let message = String::from_utf8_lossy(r.blob()?).into_owned();
                Control::Ack {
                    to,
                    id,
                    seq,
                    ok,
                    message,
                    items: get_items(&mut r)?,
                }
            }
            v => return Err(DecodeError::BadOpcode(v)),
        };
        r.finish()?;
        Ok(c)
    }

    pub fn ack(to: u8, id: u64, seq: u32, result: Result<String, String>) -> Control {
        let (ok, message) = match result {
            Ok(m) => (true, m),
            Err(m) => (false, m),
        };
        Control::Ack {
            to,
            id,
            seq,
            ok,
            message,
            items: Vec::new(),
        }
    }
}

/// First four bytes of a frame.
pub fn frame_magic(buf: &[u8]) -> Option<u32> {
    buf.get(..4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Indirection;
    use proptest::prelude::*;

    fn hex(b: &[u8]) -> String {
        b.iter().map(|x| format!("{x:02x}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn request_batch_bytes() {
        let b = RequestBatch {
            session_id: 7,
            view: 3,
            batch_seq: 1,
            requests: vec![
                WireRequest {
                    opcode: Opcode::Read,
                    key: 42,
                    value: vec![],
                },
                WireRequest {
                    opcode: Opcode::RmwAdd,
                    key: 5,
                    value: 1u64.to_le_bytes().to_vec(),
                },
            ],
        };
        let mut out = Vec::new();
        b.encode(&mut out);
        assert_eq!(
            hex(&out),
            "53 4b 56 42 07 00 00 00 00 00 00 00 03 00 00 00 00 00 00 00 01 00 00 00 02 00 00 00 \
             01 2a 00 00 00 00 00 00 00 00 00 00 00 \
             03 05 00 00 00 00 00 00 00 08 00 00 00 01 00 00 00 00 00 00 00"
        );
        assert_eq!(RequestBatch::decode(&out).unwrap(), b);
        assert_eq!(out.len(), BATCH_HEADER_BYTES + b.requests.iter().map(|r| r.encoded_len()).sum::<usize>());
    }

    #[test]
    fn response_batch_bytes() {
        let ok = ResponseBatch {
            batch_seq: 1,
            status: BatchStatus::Ok,
            server_view: 3,
            results: vec![
                WireResult {
                    status: ResultStatus::NotFound,
                    value: vec![],
                },
                WireResult {
                    status: ResultStatus::Pending,
                    value: vec![],
                },
            ],
            completions: vec![WireCompletion {
                orig_seq: 0,
                orig_idx: 2,
                result: WireResult {
                    status: ResultStatus::Ok,
                    value: vec![0xaa],
                },
            }],
        };
        let mut out = Vec::new();
        ok.encode(&mut out);
        assert_eq!(
            hex(&out),
            "01 00 00 00 00 03 00 00 00 00 00 00 00 02 00 00 00 \
             01 00 00 00 00 02 00 00 00 00 \
             01 00 00 00 00 00 00 00 02 00 00 00 00 01 00 00 00 aa"
        );
        assert_eq!(ResponseBatch::decode(&out).unwrap(), ok);

        let rejected = ResponseBatch {
            batch_seq: 9,
            status: BatchStatus::ViewRejected,
            server_view: 4,
            results: vec![],
            completions: vec![],
        };
        let mut out = Vec::new();
        rejected.encode(&mut out);
        assert_eq!(
            hex(&out),
            "09 00 00 00 01 04 00 00 00 00 00 00 00 00 00 00 00 00 00 00 00"
        );
        // a rejected batch never carries results
        let mut bad = out.clone();
        bad[13] = 1;
        bad.splice(17..17, [0u8, 0, 0, 0, 0]);
        assert!(ResponseBatch::decode(&bad).is_err());
    }

    #[test]
    fn malformed_batches_are_rejected() {
        let mut out = Vec::new();
        RequestBatch {
            session_id: 1,
            view: 1,
            batch_seq: 1,
            requests: vec![WireRequest {
                opcode: Opcode::Upsert,
                key: 1,
                value: vec![1, 2, 3],
            }],
        }
        .encode(&mut out);
        assert!(RequestBatch::decode(&out[..out.len() - 1]).is_err());
        let mut extra = out.clone();
        extra.push(0);
        assert_eq!(RequestBatch::decode(&extra), Err(DecodeError::Trailing(1)));
        let mut badop = out.clone();
        badop[BATCH_HEADER_BYTES] = 9;
        assert_eq!(RequestBatch::decode(&badop), Err(DecodeError::BadOpcode(9)));
        let mut empty = out[..BATCH_HEADER_BYTES].to_vec();
        empty[24..28].copy_from_slice(&0u32.to_le_bytes());
        assert!(RequestBatch::decode(&empty).is_err());
        assert!(matches!(
            RequestBatch::decode(&Control::Status.encode()),
            Err(DecodeError::BadMagic(_))
        ));
    }

    #[test]
    fn control_roundtrip() {
        let ind = Indirection {
            next_address: Address::new(4096),
            source_log_id: 1,
            range: HashRange::new(0, 1 << 60),
            bucket: 3,
            tag: 9,
            bucket_bits: 10,
        };
        let items = vec![
            MigratedItem::Record {
                key: 1,
                value: vec![1, 2],
                source_address: Address::new(64),
            },
            MigratedItem::Indirection(ind),
        ];
        let all = vec![
            Control::Resync { session_id: 4 },
            Control::Migrate {
                target: 2,
                ranges: vec![HashRange::new(5, 10)],
                mode: WalkMode::ScanLog,
            },
            Control::PrepForTransfer {
                id: 1,
                source: 1,
                source_log_id: 1,
                ranges: vec![HashRange::FULL],
            },
            Control::TransferOwnership {
                id: 1,
                items: items.clone(),
            },
            Control::PushRecords {
                id: 1,
                seq: 3,
                items: items.clone(),
            },
            Control::CompleteMigration { id: 1 },
            Control::Cancel { id: 1 },
            Control::ForwardRecords {
                source_log_id: 1,
                seq: 0,
                items,
            },
            Control::ForwardDone {
                source_log_id: 1,
                until: Address::new(8192),
            },
            Control::Compact {
                until: Address::NULL,
            },
            Control::Status,
            Control::ack(op::MIGRATE, 5, 0, Err("busy".into())),
        ];
        for c in all {
            let b = c.encode();
            assert_eq!(frame_magic(&b), Some(CONTROL_MAGIC));
            assert_eq!(Control::decode(&b).unwrap(), c);
        }
        assert_eq!(hex(&Control::Cancel { id: 2 }.encode()), "53 4b 56 43 07 02 00 00 00 00 00 00 00");
    }

    proptest! {
        #[test]
        fn request_roundtrip(reqs in prop::collection::vec((1u8..4, any::<u64>(), prop::collection::vec(any::<u8>(), 0..20)), 1..20),
                             sid in any::<u64>(), view in any::<u64>(), seq in any::<u32>()) {
            let requests = reqs.into_iter().map(|(o, key, mut value)| {
                let opcode = Opcode::from_u8(o).unwrap();
                if opcode == Opcode::RmwAdd { value.resize(8, 0); }
                WireRequest { opcode, key, value }
            }).collect();
            let b = RequestBatch { session_id: sid, view, batch_seq: seq, requests };
            let mut out = Vec::new();
            b.encode(&mut out);
            prop_assert_eq!(RequestBatch::decode(&out).unwrap(), b);
        }

        #[test]
        fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let _ = RequestBatch::decode(&bytes);
            let _ = ResponseBatch::decode(&bytes);
            let _ = Control::decode(&bytes);
        }
    }
}
