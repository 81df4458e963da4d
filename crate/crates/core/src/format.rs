//! Little-endian binary helpers shared by the on-disk formats.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Sum of all bytes, wrapping at 2^64. Used as the trailer checksum.
pub fn byte_sum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Cursor over a byte buffer that reports failures with their byte offset.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], path: &Path) -> Self {
        Reader {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn error(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(
                self.pos,
                format!("truncated: need {n} bytes for {what}, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(self.error(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos;
        let b = self.take(n.checked_mul(8).ok_or_else(|| self.error(start, "size overflow"))?, what)?;
        let mut out = Vec::with_capacity(n);
        for (i, chunk) in b.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(self.error(start + i * 8, format!("non-finite value in {what}")));
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Reads the trailing byte-sum checksum over `bytes[from..self.pos]`.
    pub fn checksum_trailer(&mut self, from: usize) -> Result<()> {
        let end = self.pos;
        let expected = byte_sum(&self.bytes[from..end]);
        let stored = self.u64("checksum")?;
        if stored != expected {
            return Err(self.error(
                end,
                format!("checksum mismatch: stored {stored}, computed {expected}"),
            ));
        }
        if self.remaining() != 0 {
            return Err(self.error(self.pos, format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} = {v} exceeds u32")))
}
