//! Binary weights container: magic, version, stage count, then per stage
//! every tensor of the layout as (name, rank, dims, f32 payload), all
//! little-endian.

use std::path::Path;

use crate::error::{Error, Result};

use super::params::ParamLayout;

pub const FORMAT_VERSION: u32 = 1;

pub fn encode(magic: &[u8; 4], layout: &ParamLayout, stages: &[Vec<f32>]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + stages.len() * layout.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(stages.len() as u32).to_le_bytes());
    for stage in stages {
        layout.check(stage, "weights file")?;
        for t in layout.tensors() {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &stage[t.range()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {} (wanted {n} more)", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a container whose stages must all match `layout` exactly.
pub fn decode(bytes: &[u8], magic: &[u8; 4], layout: &ParamLayout) -> std::result::Result<Vec<Vec<f32>>, String> {
    let mut r = Reader { bytes, pos: 0 };
    let found = r.take(4)?;
    if found != magic {
        return Err(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(found)
        ));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {version} (expected {FORMAT_VERSION})"));
    }
    let count = r.u32()? as usize;
    let mut stages = Vec::with_capacity(count.min(1024));
    for s in 0..count {
        let mut values = vec![0f32; layout.len()];
        for t in layout.tensors() {
            let len = r.u32()? as usize;
            let name = r.take(len)?;
            if name != t.name.as_bytes() {
                return Err(format!(
                    "stage {s}: expected tensor {:?}, found {:?}",
                    t.name,
                    String::from_utf8_lossy(name)
                ));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            if shape != t.shape {
                return Err(format!(
                    "stage {s}: tensor {} has shape {shape:?}, expected {:?}",
                    t.name, t.shape
                ));
            }
            let payload = r.take(4 * t.len())?;
            for (v, chunk) in values[t.range()].iter_mut().zip(payload.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        stages.push(values);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(stages)
}

pub fn save(path: &Path, magic: &[u8; 4], layout: &ParamLayout, stages: &[Vec<f32>]) -> Result<()> {
    let bytes = encode(magic, layout, stages)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, magic: &[u8; 4], layout: &ParamLayout) -> Result<Vec<Vec<f32>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, magic, layout).map_err(|m| Error::format(path, m))
}
