//! Little-endian binary snapshot helpers shared by the dataset, curvature
//! and anchor-bank checkpoint formats. Every snapshot starts with an 8-byte
//! magic; arrays are a `u64` length followed by that many `f64` values.

use crate::error::{Result, SgoifError};

pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: &[u8; 8]) -> Self {
        Self { buf: magic.to_vec() }
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_array(&mut self, values: &[f64]) {
        self.put_u64(values.len() as u64);
        for v in values {
            self.put_f64(*v);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != magic {
            return Err(SgoifError::Format(format!(
                "missing {} header",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(Self { bytes, pos: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SgoifError::Format("truncated snapshot".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn get_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn get_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn get_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn get_array(&mut self) -> Result<Vec<f64>> {
        let n = self.get_u64()? as usize;
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(SgoifError::Format("array length exceeds snapshot".into()));
        }
        (0..n).map(|_| self.get_f64()).collect()
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(SgoifError::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
