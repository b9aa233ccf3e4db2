//! SHA-256 digests with one-byte domain separation and a small canonical
//! binary encoder (length-prefixed fields, little-endian integers).

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};

/// Domain-separation tags. Every hash in the crate starts with one of these.
pub mod tag {
    pub const LEAF: u8 = 0x00;
    pub const NODE: u8 = 0x01;
    pub const COUNTER: u8 = 0x02;
    pub const CHAIN: u8 = 0x03;
    pub const FOLD: u8 = 0x04;
    pub const SAMPLER: u8 = 0x05;
    pub const BATCH_ITEM: u8 = 0x06;
    pub const BATCH: u8 = 0x07;
    pub const TENSOR: u8 = 0x08;
    pub const STATE: u8 = 0x09;
    pub const ACTIVATION: u8 = 0x0a;
    pub const DELTA: u8 = 0x0b;
    pub const GRADS: u8 = 0x0c;
    pub const MANIFEST: u8 = 0x0d;
    pub const TRANSCRIPT: u8 = 0x0e;
    pub const CERTIFICATE: u8 = 0x0f;
    pub const TABLE: u8 = 0x10;
    pub const BACKBONE: u8 = 0x11;
    pub const AUDIT: u8 = 0x12;
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Decode(format!("hex digest: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Decode("digest must be 32 bytes".into()))?;
        Ok(Digest(arr))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Incremental domain-separated hasher.
pub struct Hasher(Sha256);

impl Hasher {
    pub fn new(tag: u8) -> Self {
        let mut h = Sha256::new();
        h.update([tag]);
        Hasher(h)
    }

    pub fn update(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.update(bytes);
        self
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.0.update(d.0);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.0.update(v.to_le_bytes());
        self
    }

    /// Length-prefixed byte string.
    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u64(b.len() as u64);
        self.0.update(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn raws(&mut self, values: &[i64]) -> &mut Self {
        self.u64(values.len() as u64);
        for v in values {
            self.0.update(v.to_le_bytes());
        }
        self
    }

    pub fn finish(self) -> Digest {
        Digest(self.0.finalize().into())
    }
}

pub fn hash(tag: u8, parts: &[&[u8]]) -> Digest {
    let mut h = Hasher::new(tag);
    for p in parts {
        h.update(p);
    }
    h.finish()
}

/// Canonical binary writer used for every hashed or persisted structure.
#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Encoder::default()
    }

    pub fn with_magic(magic: &[u8; 4], version: u16) -> Self {
        let mut e = Encoder::new();
        e.buf.extend_from_slice(magic);
        e.u16(version);
        e
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
        self
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.buf.extend_from_slice(&d.0);
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn raws(&mut self, values: &[i64]) -> &mut Self {
        self.u64(values.len() as u64);
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn digests(&mut self, ds: &[Digest]) -> &mut Self {
        self.u64(ds.len() as u64);
        for d in ds {
            self.digest(d);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

/// Reader matching [`Encoder`].
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Decoder { buf, pos: 0 }
    }

    pub fn expect_magic(buf: &'a [u8], magic: &[u8; 4]) -> Result<(Self, u16)> {
        if buf.len() < 6 || &buf[..4] != magic {
            return Err(Error::Decode(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        let mut d = Decoder { buf, pos: 4 };
        let v = d.u16()?;
        Ok((d, v))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Decode("unexpected end of input".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn digest(&mut self) -> Result<Digest> {
        Ok(Digest(self.take(32)?.try_into().unwrap()))
    }

    fn len_prefix(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(elem as u64) > remaining {
            return Err(Error::Decode("length prefix exceeds input".into()));
        }
        Ok(n as usize)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len_prefix(1)?;
        self.take(n)
    }

    pub fn string(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::Decode(e.to_string()))
    }

    pub fn raws(&mut self) -> Result<Vec<i64>> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.i64()).collect()
    }

    pub fn digests(&mut self) -> Result<Vec<Digest>> {
        let n = self.len_prefix(32)?;
        (0..n).map(|_| self.digest()).collect()
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Decode(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
