//! Binary tensor container used by checkpoints, teacher embeddings, and
//! dataset samples.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic  b"A2SG"
//! version u32
//! section*   (until end of file)
//!   name_len u16
//!   name     UTF-8 bytes
//!   rank     u32
//!   extents  rank × u64
//!   payload  product(extents) × f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"A2SG";
pub const VERSION: u32 = 1;

/// Serialises named tensors into the container byte layout.
pub fn encode_sections(sections: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in sections {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::format(format!(
                "section name too long ({} bytes)",
                name_bytes.len()
            )));
        }
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &e in tensor.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a container, returning sections in file order.
pub fn decode_sections(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(format!("bad magic {:?}", magic)));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported container version {} (expected {})",
            version, VERSION
        )));
    }
    let mut sections = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::format("section name is not UTF-8"))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let e = cur.u64()?;
            let e = usize::try_from(e)
                .map_err(|_| Error::format(format!("extent {} too large", e)))?;
            shape.push(e);
            count = count
                .checked_mul(e)
                .ok_or_else(|| Error::format("extent product overflows"))?;
        }
        let payload = cur.take(count.checked_mul(8).ok_or_else(|| {
            Error::format("payload size overflows")
        })?)?;
        let mut data = Vec::with_capacity(count);
        for chunk in payload.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        sections.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(sections)
}

pub fn write_sections(path: &Path, sections: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode_sections(sections)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_sections(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    decode_sections(&bytes).map_err(|e| {
        Error::format(format!("{}: {}", path.display(), e))
    })
}

/// Section list with by-name lookup. Duplicate names are rejected so a
/// corrupted file cannot silently shadow a tensor.
pub struct SectionMap {
    entries: Vec<(String, Tensor)>,
}

impl SectionMap {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<SectionMap> {
        for i in 0..entries.len() {
            for j in i + 1..entries.len() {
                if entries[i].0 == entries[j].0 {
                    return Err(Error::format(format!(
                        "duplicate section name {:?}",
                        entries[i].0
                    )));
                }
            }
        }
        Ok(SectionMap { entries })
    }

    pub fn read(path: &Path) -> Result<SectionMap> {
        SectionMap::new(read_sections(path)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(format!("missing section {:?}", name)))
    }

    /// Fetches a section and checks its shape.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::format(format!(
                "section {:?} has shape {:?}, expected {:?}",
                name,
                t.shape(),
                shape
            )));
        }
        Ok(t)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("unexpected end of container"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
