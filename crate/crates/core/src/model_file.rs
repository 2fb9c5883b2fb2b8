//! Versioned on-disk envelope shared by every fitted model.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "DMNDMODL"
//! version      u32       FORMAT_VERSION
//! header_len   u32
//! header       JSON      {"schema": "...", "endianness": "little", ...}
//! payload_len  u64
//! payload      bytes     model-specific; floats are IEEE-754 binary64 LE
//! ```
//!
//! Weights live in the binary payload so a load reproduces predictions
//! bit-for-bit.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DMNDMODL";
pub const FORMAT_VERSION: u32 = 1;
pub const ENDIANNESS: &str = "little";

#[derive(Debug, Serialize, Deserialize)]
struct Wrapper<H> {
    schema: String,
    endianness: String,
    #[serde(flatten)]
    body: H,
}

pub fn encode<H: Serialize>(schema: &str, header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&Wrapper {
        schema: schema.to_string(),
        endianness: ENDIANNESS.to_string(),
        body: header,
    })
    .map_err(|e| Error::Model(e.to_string()))?;
    let mut out = Vec::with_capacity(24 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(schema: &str, bytes: &[u8]) -> Result<(H, Vec<u8>)> {
    let mut r = PayloadReader::new(bytes);
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Model("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Model(format!("unsupported format version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header = r.take(hlen)?;
    let w: Wrapper<H> =
        serde_json::from_slice(header).map_err(|e| Error::Model(format!("header: {e}")))?;
    if w.schema != schema {
        return Err(Error::Model(format!(
            "expected schema {schema}, found {}",
            w.schema
        )));
    }
    if w.endianness != ENDIANNESS {
        return Err(Error::Model(format!("unsupported endianness {}", w.endianness)));
    }
    let plen = r.u64()? as usize;
    let payload = r.take(plen)?.to_vec();
    r.finish()?;
    Ok((w.body, payload))
}

/// Schema name recorded in an encoded model, without decoding the payload.
pub fn peek_schema(bytes: &[u8]) -> Result<String> {
    #[derive(Deserialize)]
    struct Schema {
        schema: String,
    }
    let mut r = PayloadReader::new(bytes);
    if r.take(8)? != MAGIC {
        return Err(Error::Model("bad magic".into()));
    }
    r.u32()?;
    let hlen = r.u32()? as usize;
    let s: Schema =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Model(format!("header: {e}")))?;
    Ok(s.schema)
}

pub fn save<H: Serialize>(path: &Path, schema: &str, header: &H, payload: &[u8]) -> Result<()> {
    let bytes = encode(schema, header, payload)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<H: DeserializeOwned>(path: &Path, schema: &str) -> Result<(H, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(schema, &bytes)
}

#[derive(Debug, Default)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        Self::default()
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

    pub fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Model("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Model("truncated".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Model(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
