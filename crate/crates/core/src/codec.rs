//! Canonical byte encoding.
//!
//! Fixed field order, little-endian fixed-width integers and u32-length-prefixed
//! byte strings. Signatures, MACs, digests and the ledger export all cover this
//! form. Cluster and replica indices are 1-based in memory and 0-based on the wire.

use thiserror::Error;

use crate::types::{ClusterId, ReplicaId, Round, View};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("invalid tag {tag} for {what}")]
    BadTag { what: &'static str, tag: u8 },
    #[error("invalid utf-8 string")]
    BadString,
    #[error("length {0} is implausible")]
    BadLength(u64),
    #[error("{0}")]
    Invalid(&'static str),
}

#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Encoder {
            buf: Vec::with_capacity(capacity),
        }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(u8::from(v))
    }

    pub fn fixed(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.u32(bytes.len() as u32);
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn cluster(&mut self, c: ClusterId) -> &mut Self {
        self.u16(c.0 - 1)
    }

    pub fn replica(&mut self, r: ReplicaId) -> &mut Self {
        self.cluster(r.cluster).u16(r.local - 1)
    }

    pub fn round(&mut self, r: Round) -> &mut Self {
        self.u64(r.0)
    }

    pub fn view(&mut self, v: View) -> &mut Self {
        self.u64(v.0)
    }

    pub fn put<T: Canonical>(&mut self, value: &T) -> &mut Self {
        value.encode(self);
        self
    }

    pub fn seq<T: Canonical>(&mut self, items: &[T]) -> &mut Self {
        self.u32(items.len() as u32);
        for item in items {
            item.encode(self);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Decoder<'a> {
    input: &'a [u8],
    pos: usize,
}

/// Cap on any decoded length prefix; protects against allocating on corrupted input.
const MAX_LEN: u64 = 64 << 20;

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        Decoder { input, pos: 0 }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8], DecodeError> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&end| end <= self.input.len())
            .ok_or(DecodeError::Truncated(self.pos))?;
        let out = &self.input[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bool(&mut self) -> Result<bool, DecodeError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            tag => Err(DecodeError::BadTag { what: "bool", tag }),
        }
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn len(&mut self) -> Result<usize, DecodeError> {
        let len = u64::from(self.u32()?);
        if len > MAX_LEN || len as usize > self.input.len() - self.pos {
            return Err(DecodeError::BadLength(len));
        }
        Ok(len as usize)
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let len = self.len()?;
        Ok(self.take(len)?.to_vec())
    }

    pub fn string(&mut self) -> Result<String, DecodeError> {
        String::from_utf8(self.bytes()?).map_err(|_| DecodeError::BadString)
    }

    pub fn cluster(&mut self) -> Result<ClusterId, DecodeError> {
        let wire = self.u16()?;
        wire.checked_add(1)
            .map(ClusterId)
            .ok_or(DecodeError::Invalid("cluster index overflow"))
    }

    pub fn replica(&mut self) -> Result<ReplicaId, DecodeError> {
        let cluster = self.cluster()?;
        let local = self
            .u16()?
            .checked_add(1)
            .ok_or(DecodeError::Invalid("replica index overflow"))?;
        Ok(ReplicaId { cluster, local })
    }

    pub fn round(&mut self) -> Result<Round, DecodeError> {
        Ok(Round(self.u64()?))
    }

    pub fn view(&mut self) -> Result<View, DecodeError> {
        Ok(View(self.u64()?))
    }

    pub fn get<T: Canonical>(&mut self) -> Result<T, DecodeError> {
        T::decode(self)
    }

    pub fn seq<T: Canonical>(&mut self) -> Result<Vec<T>, DecodeError> {
        let count = self.u32()? as usize;
        // Every element takes at least one byte.
        if count > self.input.len() - self.pos {
            return Err(DecodeError::BadLength(count as u64));
        }
        (0..count).map(|_| T::decode(self)).collect()
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.input.len() - self.pos {
            0 => Ok(()),
            rest => Err(DecodeError::Trailing(rest)),
        }
    }
}

pub trait Canonical: Sized {
    fn encode(&self, enc: &mut Encoder);
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError>;

    fn to_canonical(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    /// Decodes a value that must span the whole input.
    fn from_canonical(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes);
        let value = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(value)
    }
}
