//! Local stable storage: one file per flushed page.
//!
//! File name `page-{start:016x}.seg`, a 16-byte header
//! `{start: u64, payload_len: u32, crc32: u32}` followed by the page bytes.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::address::Address;

const HEADER_LEN: u64 = 16;

#[derive(Debug)]
pub(crate) struct LocalPages {
    dir: PathBuf,
    page_bits: u32,
    sync: bool,
    open: Mutex<HashMap<u64, Arc<File>>>,
}

impl LocalPages {
    pub fn open(dir: &Path, page_bits: u32, sync: bool) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(LocalPages {
            dir: dir.to_path_buf(),
            page_bits,
            sync,
            open: Mutex::new(HashMap::new()),
        })
    }

    fn path(&self, page: u64) -> PathBuf {
        self.dir
            .join(format!("page-{:016x}.seg", page << self.page_bits))
    }

    pub fn write_page(&self, page: u64, bytes: &[u8]) -> io::Result<()> {
        let tmp = self.path(page).with_extension("tmp");
        let mut f = File::create(&tmp)?;
        let mut header = [0u8; HEADER_LEN as usize];
        header[0..8].copy_from_slice(&(page << self.page_bits).to_le_bytes());
        header[8..12].copy_from_slice(&(bytes.len() as u32).to_le_bytes());
        header[12..16].copy_from_slice(&crc32fast::hash(bytes).to_le_bytes());
        f.write_all(&header)?;
        f.write_all(bytes)?;
        if self.sync {
            f.sync_data()?;
        }
        fs::rename(&tmp, self.path(page))?;
        Ok(())
    }

    fn file(&self, page: u64) -> io::Result<Option<Arc<File>>> {
        let mut open = self.open.lock();
        if let Some(f) = open.get(&page) {
            return Ok(Some(f.clone()));
        }
        match OpenOptions::new().read(true).open(self.path(page)) {
            Ok(f) => {
                let f = Arc::new(f);
                open.insert(page, f.clone());
                Ok(Some(f))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Reads `len` bytes at `address`; `None` when the page file is absent.
    pub fn read(&self, address: Address, len: usize) -> io::Result<Option<Vec<u8>>> {
        let page = address.page(self.page_bits);
        let Some(f) = self.file(page)? else {
            return Ok(None);
        };
        let mut buf = vec![0u8; len];
        f.read_exact_at(&mut buf, HEADER_LEN + address.offset(self.page_bits))?;
        Ok(Some(buf))
    }

    /// Reads and checksums a whole page.
    pub fn read_page(&self, page: u64) -> io::Result<Option<Vec<u8>>> {
        let Some(f) = self.file(page)? else {
            return Ok(None);
        };
        let mut header = [0u8; HEADER_LEN as usize];
        f.read_exact_at(&mut header, 0)?;
        let len = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(header[12..16].try_into().unwrap());
        let mut buf = vec![0u8; len];
        f.read_exact_at(&mut buf, HEADER_LEN)?;
        if crc32fast::hash(&buf) != crc {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("page {page} checksum mismatch"),
            ));
        }
        Ok(Some(buf))
    }

    pub fn remove_page(&self, page: u64) -> io::Result<()> {
        self.open.lock().remove(&page);
        match fs::remove_file(self.path(page)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }
}
