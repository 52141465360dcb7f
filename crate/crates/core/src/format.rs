//! Shared little-endian container encoding.
//!
//! Every persisted artifact is laid out as
//! `magic (4 bytes) | version (u32) | body | sha256(magic..body) (32 bytes)`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

pub const CHECKSUM_LEN: usize = 32;

/// Appends typed values to an in-memory buffer.
pub struct BlobWriter {
    buf: Vec<u8>,
}

impl BlobWriter {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = Vec::with_capacity(1024);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    /// Length-prefixed byte string.
    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    /// Shape-prefixed matrix.
    pub fn tensor(&mut self, t: &Tensor2) -> &mut Self {
        self.u64(t.rows() as u64)
            .u64(t.cols() as u64)
            .f64s(t.data())
    }

    pub fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

/// Cursor over a verified container body.
pub struct BlobReader<'a> {
    body: &'a [u8],
    pos: usize,
    pub version: u32,
}

impl<'a> BlobReader<'a> {
    /// Checks magic and trailing checksum; positions after the version word.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 8 + CHECKSUM_LEN {
            return Err(Error::Data("file too short for container".into()));
        }
        if &bytes[..4] != magic {
            return Err(Error::Data(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            )));
        }
        let split = bytes.len() - CHECKSUM_LEN;
        let (body, stored) = bytes.split_at(split);
        if Sha256::digest(body).as_slice() != stored {
            return Err(Error::Data("checksum mismatch".into()));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
        Ok(Self {
            body,
            pos: 8,
            version,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.body.len() {
            return Err(Error::Data("truncated container body".into()));
        }
        let s = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Data("length overflows usize".into()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Data("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|e| Error::Data(format!("invalid utf-8: {e}")))
    }

    pub fn tensor(&mut self) -> Result<Tensor2> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Data("tensor size overflow".into()))?;
        Tensor2::from_vec(rows, cols, self.f64s(n)?)
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos == self.body.len()
    }
}

/// Hex digest of the trailing checksum of a finished container.
pub fn checksum_hex(bytes: &[u8]) -> String {
    let tail = &bytes[bytes.len().saturating_sub(CHECKSUM_LEN)..];
    hex_string(tail)
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Short stable hash for provenance tags.
pub fn short_hash(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes)[..8])
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut w = BlobWriter::new(b"TEST", 1);
        w.f64(1.5).str("hello");
        let mut bytes = w.finish();
        assert!(BlobReader::open(&bytes, b"TEST").is_ok());
        bytes[10] ^= 1;
        assert!(matches!(
            BlobReader::open(&bytes, b"TEST"),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn wrong_magic_rejected() {
        let bytes = BlobWriter::new(b"AAAA", 1).finish();
        assert!(BlobReader::open(&bytes, b"BBBB").is_err());
    }

    #[test]
    fn values_read_back_in_order() {
        let t = Tensor2::from_vec(2, 1, vec![0.25, -3.0]).unwrap();
        let mut w = BlobWriter::new(b"TEST", 7);
        w.u32(9).tensor(&t).str("x");
        let bytes = w.finish();
        let mut r = BlobReader::open(&bytes, b"TEST").unwrap();
        assert_eq!(r.version, 7);
        assert_eq!(r.u32().unwrap(), 9);
        assert_eq!(r.tensor().unwrap(), t);
        assert_eq!(r.str().unwrap(), "x");
        assert!(r.is_exhausted());
    }
}
