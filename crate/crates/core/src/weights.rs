//! Flat binary weight files.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes      | field                                   |
//! |------------|-----------------------------------------|
//! | 4          | magic `HRVD`                            |
//! | 4 (u32)    | format version, currently 1             |
//! | 4 (u32)    | payload kind (1 = detector, 2 = IFM)    |
//! | 4 (u32)    | number of dimension entries `k`         |
//! | 4·k (u32)  | dimension entries, meaning set by kind  |
//! | 8 (u64)    | number of weights `n`                   |
//! | 8·n (f64)  | weights, in the order documented by kind|

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HRVD";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum WeightKind {
    Detector = 1,
    Ifm = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub kind: WeightKind,
    pub dims: Vec<u32>,
    pub values: Vec<f64>,
}

impl WeightFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.dims.len() + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::WeightFormat("bad magic, expected HRVD".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::WeightFormat(format!(
                "unsupported version {version}"
            )));
        }
        let kind = match cur.u32()? {
            1 => WeightKind::Detector,
            2 => WeightKind::Ifm,
            k => return Err(Error::WeightFormat(format!("unknown payload kind {k}"))),
        };
        let ndims = cur.u32()? as usize;
        let dims = (0..ndims).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let n = cur.u64()? as usize;
        if cur.remaining() != n * 8 {
            return Err(Error::WeightFormat(format!(
                "expected {n} weights ({} bytes), found {} bytes",
                n * 8,
                cur.remaining()
            )));
        }
        let values = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Self { kind, dims, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: WeightKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::WeightFormat(format!(
                "expected {kind:?} weights, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::WeightFormat("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Sequential reader over a weight vector, used when rebuilding models.
pub(crate) struct ValueReader<'a> {
    values: &'a [f64],
    pos: usize,
}

impl<'a> ValueReader<'a> {
    pub(crate) fn new(values: &'a [f64]) -> Self {
        Self { values, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.pos + n > self.values.len() {
            return Err(Error::WeightFormat(format!(
                "weight vector too short: need {} more values at offset {}",
                n, self.pos
            )));
        }
        let v = self.values[self.pos..self.pos + n].to_vec();
        self.pos += n;
        Ok(v)
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.values.len() {
            return Err(Error::WeightFormat(format!(
                "{} trailing values",
                self.values.len() - self.pos
            )));
        }
        Ok(())
    }
}
