//! Named-array weight sources. Entries map `layer{index}.{param}` names to
//! shaped little-endian f32 data; params are weight, gamma, beta,
//! running_mean, and running_var.

use std::collections::BTreeMap;
use std::path::Path;

use crate::bank::container::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"DASW";

#[derive(Debug, Clone)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct WeightSet {
    pub arch_id: String,
    entries: Vec<NamedArray>,
    index: BTreeMap<String, usize>,
}

impl WeightSet {
    pub fn new(arch_id: &str) -> Self {
        WeightSet {
            arch_id: arch_id.to_string(),
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(NamedArray { name, shape, data });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn entries(&self) -> &[NamedArray] {
        &self.entries
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(WEIGHTS_MAGIC);
        w.str(&self.arch_id);
        w.u32(self.entries.len() as u32);
        // Entry table first, then the raw payload at recorded offsets.
        let mut offset = 0u64;
        for e in &self.entries {
            w.str(&e.name);
            w.u8(0); // dtype tag: f32 little-endian
            w.u32(e.shape.len() as u32);
            for &d in &e.shape {
                w.u64(d as u64);
            }
            w.u64(offset);
            w.u64(e.data.len() as u64);
            offset += e.data.len() as u64 * 4;
        }
        w.u64(offset);
        for e in &self.entries {
            w.f32_slice(&e.data);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(bytes, WEIGHTS_MAGIC)?;
        let arch_id = r.str("arch_id")?;
        let n = r.u32("entry count")? as usize;
        let mut headers = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str("entry name")?;
            let dtype = r.u8("dtype")?;
            if dtype != 0 {
                return Err(Error::MalformedContainer("dtype"));
            }
            let ndim = r.u32("ndim")? as usize;
            if ndim > 8 {
                return Err(Error::MalformedContainer("ndim"));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("dim")? as usize);
            }
            let offset = r.u64("offset")?;
            let len = r.u64("entry length")?;
            headers.push((name, shape, offset, len));
        }
        let payload_bytes = r.u64("payload length")?;
        let mut ws = WeightSet::new(&arch_id);
        let mut cursor = 0u64;
        for (name, shape, offset, len) in headers {
            if offset != cursor || offset + len * 4 > payload_bytes {
                return Err(Error::MalformedContainer("entry offset"));
            }
            if shape.iter().product::<usize>() as u64 != len {
                return Err(Error::MalformedContainer("entry shape"));
            }
            cursor += len * 4;
            let data = r.f32_vec(len as usize, "entry payload")?;
            ws.push(name, shape, data);
        }
        r.finish()?;
        Ok(ws)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
