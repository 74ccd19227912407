//! Little-endian primitives shared by the checkpoint and dataset formats.

use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    /// Rounds to the nearest f32.
    pub fn f32s(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.bytes(&(v as f32).to_le_bytes());
        }
    }
}

pub(crate) fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| HarnessError::Usage(format!("{what} {n} exceeds the 32-bit format limit")))
}

pub(crate) struct Reader<'a> {
    path: PathBuf,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &Path, data: &'a [u8]) -> Self {
        Self { path: path.to_path_buf(), data, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn error(&self, offset: usize, detail: impl Into<String>) -> HarnessError {
        HarnessError::Format { path: self.path.clone(), offset, detail: detail.into() }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let s = &self.data[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(self.pos, format!("truncated while reading {what}"))),
        }
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(4).ok_or_else(|| self.error(self.pos, format!("{what} length overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }

    pub fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let at = self.pos;
        let raw = self.take(n, what)?;
        std::str::from_utf8(raw).map_err(|e| self.error(at, format!("{what} is not UTF-8: {e}")))
    }

    /// Magic bytes followed by a version this build understands.
    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != magic {
            return Err(self.error(0, format!("bad magic {m:?}, expected {:?}", std::str::from_utf8(magic).unwrap())));
        }
        let v = self.u32("version")?;
        if v != version {
            return Err(self.error(4, format!("unsupported version {v}, expected {version}")));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.error(self.pos, format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| HarnessError::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}
