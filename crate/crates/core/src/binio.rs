//! Little-endian helpers for the fixed binary formats (`PRFM`, `PRST`, `PRHD`, `PRFU`).

use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn with_header(magic: &[u8; 4], version: u16, capacity: usize) -> Self {
        let mut buf = Vec::with_capacity(capacity + 6);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Writer { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, values: &[f32]) {
        self.buf.reserve(values.len() * 4);
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version, leaving the cursor after the header.
    pub fn open(what: &'static str, bytes: &'a [u8], magic: &[u8; 4], version: u16) -> Result<Self> {
        let mut r = Reader { what, bytes, pos: 0 };
        let found: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &found != magic {
            return Err(Error::BadMagic {
                what,
                expected: *magic,
                found,
            });
        }
        let v = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
        if v != version {
            return Err(Error::UnsupportedVersion { what, version: v });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::TruncatedFile {
                what: self.what,
                detail: format!(
                    "{field} needs {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            }),
        }
    }

    pub fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    pub fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub fn str(&mut self, field: &str) -> Result<String> {
        let len = self.u32(field)? as usize;
        let raw = self.take(len, field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Malformed {
            what: self.what,
            detail: format!("{field} is not valid UTF-8"),
        })
    }

    /// Reads `count` floats, rejecting NaN and infinities.
    pub fn finite_f32s(&mut self, count: usize, field: &str) -> Result<Vec<f32>> {
        let nbytes = count.checked_mul(4).ok_or_else(|| Error::Malformed {
            what: self.what,
            detail: format!("{field} element count {count} overflows"),
        })?;
        let raw = self.take(nbytes, field)?;
        let mut out = Vec::with_capacity(count);
        for (i, c) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFiniteValue(i));
            }
            out.push(v);
        }
        Ok(out)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Malformed {
                what: self.what,
                detail: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
