//! Little-endian framing shared by the binary file formats.
//!
//! A frame is `magic[4] | version u16 | body_len u64 | body | crc32 u32`,
//! with the CRC taken over everything before it.

use crate::error::{Error, FormatError, Result};

#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| FormatError::Malformed(format!("length {v} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }

    pub fn u32s(&mut self, v: &[u32]) {
        for x in v {
            self.u32(*x);
        }
    }

    pub fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, at: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).ok_or(FormatError::Truncated)?;
        let s = self.data.get(self.at..end).ok_or(FormatError::Truncated)?;
        self.at = end;
        Ok(s)
    }

    pub fn is_done(&self) -> bool {
        self.at == self.data.len()
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    /// Reads `n` items of `width` bytes after checking they fit, so a corrupt
    /// count cannot trigger a huge allocation.
    fn chunks(&mut self, n: usize, width: usize) -> Result<std::slice::ChunksExact<'a, u8>> {
        let bytes = n.checked_mul(width).ok_or(FormatError::Truncated)?;
        Ok(self.take(bytes)?.chunks_exact(width))
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        Ok(self.chunks(n, 4)?.map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.chunks(n, 4)?.map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.chunks(n, 8)?.map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub(crate) fn frame(magic: &[u8; 4], version: u16, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 18);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Checks magic, version, length and checksum; returns the body.
pub(crate) fn unframe<'a>(magic: &[u8; 4], version: u16, data: &'a [u8]) -> Result<&'a [u8]> {
    let mut r = ByteReader::new(data);
    let m: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &m != magic {
        return Err(FormatError::BadMagic(m).into());
    }
    let v = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if v != version {
        return Err(FormatError::BadVersion(v).into());
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Format(FormatError::Truncated))?;
    let body = r.take(len)?;
    let head_len = 14 + len;
    let crc = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if !r.is_done() {
        return Err(FormatError::Malformed("trailing bytes after checksum".into()).into());
    }
    if crc32fast::hash(&data[..head_len]) != crc {
        return Err(FormatError::Checksum.into());
    }
    Ok(body)
}
