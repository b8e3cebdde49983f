//! Byte-level container primitives shared by snapshot files and weight
//! sources: length-prefixed strings, little-endian scalars, f32 payloads,
//! and a trailing CRC-32 over every preceding byte so any single corrupted
//! byte is detected.

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: [u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        ByteWriter { buf }
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

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f32_slice(&mut self, values: &[f32]) {
        self.buf.reserve(values.len() * 4);
        for &v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Append the checksum and return the finished stream.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Validate magic, version, and the trailing checksum, then position the
    /// cursor after the version field.
    pub fn open(bytes: &'a [u8], magic: [u8; 4]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Truncated("header"));
        }
        if bytes[..4] != magic {
            return Err(Error::BadMagic { expected: magic });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("length checked"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let split = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[split..].try_into().expect("length checked"));
        let computed = crc32(&bytes[..split]);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        Ok(ByteReader {
            bytes: &bytes[..split],
            pos: 8,
        })
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(field));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    pub fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4")))
    }

    pub fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8")))
    }

    pub fn f32(&mut self, field: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().expect("4")))
    }

    pub fn str(&mut self, field: &'static str) -> Result<String> {
        let len = self.u32(field)? as usize;
        if len > self.bytes.len() {
            return Err(Error::Truncated(field));
        }
        let raw = self.take(len, field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::MalformedContainer(field))
    }

    pub fn f32_vec(&mut self, n: usize, field: &'static str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or(Error::MalformedContainer(field))?, field)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::MalformedContainer("trailing bytes"));
        }
        Ok(())
    }
}
