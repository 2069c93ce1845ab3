//! Binary feature store.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "GSFS"
//! u32     version (1)
//! u32     record count
//! u32     vector dimension
//! repeat count times:
//!     u16     id length in bytes
//!     [u8]    UTF-8 glyph id
//!     [f32]   dimension values
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 1600;
const MAGIC: &[u8; 4] = b"GSFS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub glyph_id: String,
    pub vector: Vec<f32>,
}

impl FeatureRecord {
    pub fn validate(&self) -> Result<()> {
        if self.vector.len() != FEATURE_DIM {
            return Err(Error::validation(format!(
                "feature record {:?} has dimension {}, expected {FEATURE_DIM}",
                self.glyph_id,
                self.vector.len()
            )));
        }
        if let Some(i) = self.vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "feature record {:?} has a non-finite value at index {i}",
                self.glyph_id
            )));
        }
        Ok(())
    }
}

pub fn write_feature_store(records: &[FeatureRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut ids = HashSet::with_capacity(records.len());
    for r in records {
        r.validate()?;
        if r.glyph_id.len() > usize::from(u16::MAX) {
            return Err(Error::validation(format!("glyph id too long: {} bytes", r.glyph_id.len())));
        }
        if !ids.insert(r.glyph_id.as_str()) {
            return Err(Error::validation(format!("duplicate glyph id {:?}", r.glyph_id)));
        }
    }
    let count = u32::try_from(records.len()).map_err(|_| Error::validation("too many feature records"))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&count.to_le_bytes()).map_err(io)?;
    out.write_all(&(FEATURE_DIM as u32).to_le_bytes()).map_err(io)?;
    for r in records {
        out.write_all(&(r.glyph_id.len() as u16).to_le_bytes()).map_err(io)?;
        out.write_all(r.glyph_id.as_bytes()).map_err(io)?;
        for v in &r.vector {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn read_feature_store(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let ctx = path.display().to_string();
    let truncated = |_| Error::format(ctx.clone(), "file is truncated");

    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::format(ctx, format!("bad magic {magic:?}, expected \"GSFS\"")));
    }
    let mut word = [0u8; 4];
    let mut read_u32 = |input: &mut BufReader<File>| -> Result<u32> {
        input.read_exact(&mut word).map_err(truncated)?;
        Ok(u32::from_le_bytes(word))
    };
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::format(ctx, format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)? as usize;
    let dim = read_u32(&mut input)? as usize;
    if dim != FEATURE_DIM {
        return Err(Error::validation(format!(
            "{ctx}: store dimension {dim}, expected {FEATURE_DIM}"
        )));
    }

    let mut records = Vec::with_capacity(count.min(1 << 20));
    let mut buf = vec![0u8; dim * 4];
    for _ in 0..count {
        let mut len = [0u8; 2];
        input.read_exact(&mut len).map_err(truncated)?;
        let mut id = vec![0u8; usize::from(u16::from_le_bytes(len))];
        input.read_exact(&mut id).map_err(truncated)?;
        let glyph_id = String::from_utf8(id).map_err(|_| Error::format(ctx.clone(), "glyph id is not UTF-8"))?;
        input.read_exact(&mut buf).map_err(truncated)?;
        let vector = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(FeatureRecord { glyph_id, vector });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(ctx, "trailing bytes after last record"));
    }
    Ok(records)
}
