//! File formats, configuration and atomic writes.

pub mod archive;
pub mod config;
pub mod model_file;
pub mod pnm;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let res = (|| {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(tmp);
        return Err(io_err(path, e));
    }
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

/// Little-endian byte sink.
#[derive(Debug, Default)]
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

    pub fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| crate::error::invalid(format!("{v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    /// Values must already be representable in `f32` for a lossless roundtrip.
    pub fn f32s(&mut self, xs: &[f64]) {
        for &x in xs {
            self.buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }

    pub fn string(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.bytes(s.as_bytes());
        Ok(())
    }
}

/// Bounds-checked little-endian reader that reports byte offsets.
#[derive(Debug)]
pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::TruncatedPayload {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn corrupt(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::CorruptHeader {
            offset,
            reason: reason.into(),
        }
    }

    /// `n` floats; the length is checked against the remaining bytes before
    /// allocating.
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let start = self.pos;
        let bytes = n.checked_mul(4).ok_or_else(|| self.corrupt(start, "float count overflows"))?;
        let b = self.take(bytes)?;
        let out: Vec<f64> = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if let Some(i) = out.iter().position(|x| !x.is_finite()) {
            return Err(self.corrupt(start + 4 * i, "non-finite float in payload"));
        }
        Ok(out)
    }

    pub fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.usize()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.corrupt(at, "string is not valid UTF-8"))
    }

    pub fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let b = self.take(4)?;
        if b != want {
            return Err(self.corrupt(0, format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(b), String::from_utf8_lossy(want))));
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u32) -> Result<()> {
        let offset = self.pos;
        let v = self.u32()?;
        if v != supported {
            return Err(Error::VersionUnsupported {
                offset,
                found: v,
                supported,
            });
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.corrupt(self.pos, format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}
