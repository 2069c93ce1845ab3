//! Binary state container for the non-parametric heads.
//!
//! ```text
//! magic   "GSCL"
//! u32     version (1)
//! u64     header length in bytes
//! [u8]    UTF-8 JSON header: {"meta": <config echo>, "arrays": [{"name", "shape"}...]}
//! [f64]   array payloads, little-endian, concatenated in header order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub(crate) const MAGIC: &[u8; 4] = b"GSCL";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    arrays: Vec<ArrayHeader>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Blob {
    pub meta: Value,
    arrays: Vec<(String, ArrayD<f64>)>,
}

impl Blob {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, array: ArrayD<f64>) {
        self.arrays.push((name.to_owned(), array));
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let a = self
            .arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a.clone())
            .ok_or_else(|| Error::format("classifier blob", format!("missing array {name}")))?;
        a.into_dimensionality()
            .map_err(|_| Error::format("classifier blob", format!("array {name} is not a matrix")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, a)| ArrayHeader {
                    name: name.clone(),
                    shape: a.shape().to_vec(),
                })
                .collect(),
        })
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        out.write_all(MAGIC).map_err(io)?;
        out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        out.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&header).map_err(io)?;
        for (_, a) in &self.arrays {
            for v in a.iter() {
                out.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ctx = path.display().to_string();
        let mut input = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let truncated = |_| Error::format(ctx.clone(), "classifier blob is truncated");
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::format(ctx, "not a classifier blob (bad magic)"));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(truncated)?;
        if u32::from_le_bytes(word) != VERSION {
            return Err(Error::format(ctx, "unsupported classifier blob version"));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len).map_err(truncated)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut header).map_err(truncated)?;
        let Header { meta, arrays } =
            serde_json::from_slice(&header).map_err(|e| Error::format(ctx.clone(), e.to_string()))?;
        let mut out = Vec::with_capacity(arrays.len());
        for a in arrays {
            let n: usize = a.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            input.read_exact(&mut bytes).map_err(truncated)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let array = ArrayD::from_shape_vec(IxDyn(&a.shape), data).expect("shape matches payload");
            out.push((a.name, array));
        }
        Ok(Self { meta, arrays: out })
    }
}
