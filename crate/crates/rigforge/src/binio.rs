//! Little-endian container shared by the binary formats:
//! `magic[4] | version u32 | payload | crc32 u32`, the checksum covering
//! everything before it.

use std::path::Path;

use crate::error::{Error, Result};

pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = Vec::with_capacity(1 << 16);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.buf.reserve(v.len() * 8);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn f32s(&mut self, v: impl IntoIterator<Item = f32>) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    /// Length-prefixed UTF-8.
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn pad_to(&mut self, align: usize) {
        while self.buf.len() % align != 0 {
            self.buf.push(0);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

/// Validates magic, checksum and version; returns the payload and its
/// offset in the file.
pub fn open<'b>(bytes: &'b [u8], path: &Path, magic: &[u8; 4], expected: &'static str, version: u32) -> Result<&'b [u8]> {
    if bytes.len() >= 4 && &bytes[..4] != magic {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected });
    }
    if bytes.len() < 12 {
        return Err(Error::ChecksumMismatch { path: path.to_path_buf() });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::ChecksumMismatch { path: path.to_path_buf() });
    }
    let found = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::VersionMismatch { path: path.to_path_buf(), found, supported: version });
    }
    Ok(&body[8..])
}

pub struct Reader<'b> {
    data: &'b [u8],
    pos: usize,
    path: &'b Path,
}

impl<'b> Reader<'b> {
    pub fn new(data: &'b [u8], path: &'b Path) -> Self {
        Self { data, pos: 0, path }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn malformed(&self, msg: impl Into<String>) -> Error {
        Error::Malformed { path: self.path.to_path_buf(), msg: msg.into() }
    }

    pub fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.malformed(format!("record of {n} bytes runs past the end at offset {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A count that must fit in the remaining bytes at `unit` bytes each.
    pub fn count(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.data.len() - self.pos) as u64;
        if unit > 0 && n > left / unit as u64 {
            return Err(self.malformed(format!("count {n} exceeds the file")));
        }
        Ok(n as usize)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| self.malformed("length overflow"))?)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.malformed("length overflow"))?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.malformed("length overflow"))?)?;
        Ok(b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.malformed("invalid UTF-8"))
    }

    pub fn skip_to(&mut self, align_from_file_start: usize, base: usize) -> Result<()> {
        while (base + self.pos) % align_from_file_start != 0 {
            self.take(1)?;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.malformed(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}
