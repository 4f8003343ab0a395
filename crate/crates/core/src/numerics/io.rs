//! Little-endian binary helpers shared by the matrix, checkpoint and subspace
//! file formats.

use std::path::Path;

use super::Matrix;
use crate::{Error, Result};

pub const SDMX_MAGIC: &[u8; 4] = b"SDMX";

/// Appends primitives to an in-memory buffer.
#[derive(Default)]
pub struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn matrix(&mut self, m: &Matrix) {
        self.bytes(SDMX_MAGIC);
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        for &v in m.as_slice() {
            self.f64(v);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a byte slice that reports offsets in its errors.
pub struct BinReader<'a> {
    buf: &'a [u8],
    pos: usize,
    context: String,
}

impl<'a> BinReader<'a> {
    pub fn new(buf: &'a [u8], context: impl Into<String>) -> Self {
        Self {
            buf,
            pos: 0,
            context: context.into(),
        }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn malformed(&self, message: impl Into<String>) -> Error {
        Error::Malformed {
            context: self.context.clone(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.malformed(format!(
                "truncated: wanted {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::Format {
                context: self.context.clone(),
                message: format!(
                    "bad magic {:?} at offset {}, expected {:?}",
                    String::from_utf8_lossy(got),
                    self.pos - 4,
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn matrix(&mut self) -> Result<Matrix> {
        self.magic(SDMX_MAGIC)?;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| self.malformed("matrix size overflows"))?;
        let bytes = self.take(count.checked_mul(8).ok_or_else(|| self.malformed("matrix size overflows"))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.is_at_end() {
            Ok(())
        } else {
            Err(self.malformed("trailing bytes"))
        }
    }
}

/// Serialises a matrix to the `SDMX` format.
pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut w = BinWriter::new();
    w.matrix(m);
    w.finish()
}

pub fn decode_matrix(bytes: &[u8], context: &str) -> Result<Matrix> {
    let mut r = BinReader::new(bytes, context);
    let m = r.matrix()?;
    r.expect_end()?;
    Ok(m)
}

pub fn save_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes, &path.display().to_string())
}
