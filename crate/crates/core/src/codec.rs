//! Little-endian encoding helpers shared by the wire protocol, the metadata
//! service and its write-ahead log.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated input: needed {need} bytes at offset {at}, {have} available")]
    Truncated { at: usize, need: usize, have: usize },
    #[error("{0} trailing bytes after message")]
    Trailing(usize),
    #[error("bad magic {0:#010x}")]
    BadMagic(u32),
    #[error("unknown opcode {0}")]
    BadOpcode(u8),
    #[error("invalid field {field}: {value}")]
    Invalid { field: &'static str, value: u64 },
}

pub trait Put {
    fn put_u8(&mut self, v: u8);
    fn put_u32(&mut self, v: u32);
    fn put_u64(&mut self, v: u64);
    /// `u32` length followed by the bytes.
    fn put_blob(&mut self, v: &[u8]);
}

impl Put for Vec<u8> {
    fn put_u8(&mut self, v: u8) {
        self.push(v);
    }

    fn put_u32(&mut self, v: u32) {
        self.extend_from_slice(&v.to_le_bytes());
    }

    fn put_u64(&mut self, v: u64) {
        self.extend_from_slice(&v.to_le_bytes());
    }

    fn put_blob(&mut self, v: &[u8]) {
        self.put_u32(v.len() as u32);
        self.extend_from_slice(v);
    }
}

#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::Truncated {
                at: self.pos,
                need: n,
                have: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn blob(&mut self) -> Result<&'a [u8], DecodeError> {
        let n = self.u32()? as usize;
        self.bytes(n)
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(DecodeError::Trailing(n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_errors() {
        let mut v = Vec::new();
        v.put_u8(7);
        v.put_u32(0x01020304);
        v.put_u64(u64::MAX - 1);
        v.put_blob(b"abc");
        assert_eq!(&v[1..5], &[4, 3, 2, 1]);
        let mut r = Reader::new(&v);
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.u32().unwrap(), 0x01020304);
        assert_eq!(r.u64().unwrap(), u64::MAX - 1);
        assert_eq!(r.blob().unwrap(), b"abc");
        r.finish().unwrap();

        let mut r = Reader::new(&v[..3]);
        r.u8().unwrap();
        assert!(matches!(r.u32(), Err(DecodeError::Truncated { at: 1, need: 4, have: 2 })));
        let mut r = Reader::new(&v);
        r.u8().unwrap();
        assert_eq!(r.finish(), Err(DecodeError::Trailing(v.len() - 1)));
    }
}
