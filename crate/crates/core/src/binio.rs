//! Little-endian binary helpers shared by the on-disk formats.

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("at byte offset {offset}: {message}")]
pub struct BinFormatError {
    pub offset: usize,
    pub message: String,
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> BinFormatError {
        BinFormatError {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], BinFormatError> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(self.error(format!(
                "truncated: need {n} bytes for {what}, {remaining} left"
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<(), BinFormatError> {
        let start = self.pos;
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(BinFormatError {
                offset: start,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32, BinFormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64, BinFormatError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// `n` finite little-endian `f32` values.
    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, BinFormatError> {
        let bytes_needed = n.checked_mul(4).ok_or_else(|| self.error("length overflow"))?;
        let start = self.pos;
        let b = self.take(bytes_needed, what)?;
        let mut out = Vec::with_capacity(n);
        for (i, chunk) in b.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(BinFormatError {
                    offset: start + 4 * i,
                    message: format!("non-finite value in {what}"),
                });
            }
            out.push(v);
        }
        Ok(out)
    }

    /// `n` finite little-endian `f64` values.
    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, BinFormatError> {
        let bytes_needed = n.checked_mul(8).ok_or_else(|| self.error("length overflow"))?;
        let start = self.pos;
        let b = self.take(bytes_needed, what)?;
        let mut out = Vec::with_capacity(n);
        for (i, chunk) in b.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(BinFormatError {
                    offset: start + 8 * i,
                    message: format!("non-finite value in {what}"),
                });
            }
            out.push(v);
        }
        Ok(out)
    }

    /// `u32` byte length followed by UTF-8.
    pub(crate) fn string(&mut self, what: &str) -> Result<String, BinFormatError> {
        let len = self.u32(what)? as usize;
        let start = self.pos;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| BinFormatError {
            offset: start,
            message: format!("{what} is not valid UTF-8"),
        })
    }

    pub(crate) fn finish(&self) -> Result<(), BinFormatError> {
        if self.pos != self.buf.len() {
            return Err(self.error(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// First eight bytes of SHA-256, little-endian.
pub fn hash64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_reports_offset() {
        let mut buf = Vec::new();
        put_u32(&mut buf, 7);
        buf.extend_from_slice(&[1, 2]);
        let mut r = ByteReader::new(&buf);
        assert_eq!(r.u32("a").unwrap(), 7);
        let err = r.u32("b").unwrap_err();
        assert_eq!(err.offset, 4);
    }

    #[test]
    fn rejects_nan() {
        let mut buf = Vec::new();
        put_f32s(&mut buf, &[1.0, f32::NAN]);
        let err = ByteReader::new(&buf).f32s(2, "x").unwrap_err();
        assert_eq!(err.offset, 4);
    }
}
