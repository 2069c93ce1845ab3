//! Self-describing weight container.
//!
//! ```text
//! magic   "GSCK"
//! u32     version (1)
//! u64     header length in bytes
//! [u8]    UTF-8 JSON header: {"meta": <any>, "tensors": [{"name", "shape"}...]}
//! [f32]   tensor payloads, little-endian, concatenated in header order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Real, Sequential};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn insert<F: Real>(&mut self, name: impl Into<String>, tensor: &ArrayD<F>) {
        self.tensors.push(TensorEntry {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            data: tensor.iter().map(|v| v.as_f32()).collect(),
        });
    }

    pub fn get<F: Real>(&self, name: &str) -> Option<ArrayD<F>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| {
            let data = t.data.iter().map(|&v| F::from_f32(v).unwrap()).collect();
            ArrayD::from_shape_vec(IxDyn(&t.shape), data).expect("shape matches payload")
        })
    }

    /// Stores the full state of `seq` under `prefix`.
    pub fn insert_sequential<F: Real>(&mut self, seq: &Sequential<F>, prefix: &str) {
        for (name, t) in seq.named_state(prefix) {
            self.insert(name, t);
        }
    }

    /// Loads every state tensor of `seq` from entries under `prefix`,
    /// checking names and shapes.
    pub fn load_sequential<F: Real>(&self, seq: &mut Sequential<F>, prefix: &str) -> Result<()> {
        for (name, t) in seq.named_state_mut(prefix) {
            let stored = self
                .get::<F>(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            if stored.shape() != t.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {name} has shape {:?}, expected {:?}", stored.shape(), t.shape()),
                ));
            }
            *t = stored;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: self.tensors.clone(),
        })
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        out.write_all(MAGIC).map_err(io)?;
        out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        out.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&header).map_err(io)?;
        for t in &self.tensors {
            let mut bytes = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&bytes).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ctx = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut input = BufReader::new(file);
        let truncated = |_| Error::format(ctx.clone(), "checkpoint is truncated");
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::format(ctx, "not a checkpoint (bad magic)"));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(truncated)?;
        if u32::from_le_bytes(word) != VERSION {
            return Err(Error::format(ctx, "unsupported checkpoint version"));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len).map_err(truncated)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut header).map_err(truncated)?;
        let Header { meta, mut tensors } =
            serde_json::from_slice(&header).map_err(|e| Error::format(ctx.clone(), e.to_string()))?;
        for t in &mut tensors {
            let n: usize = t.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            input.read_exact(&mut bytes).map_err(truncated)?;
            t.data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
        }
        Ok(Self { meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{BatchNorm, Linear};
    use super::*;

    #[test]
    fn sequential_state_round_trips() {
        let mut rng = crate::seed::rng(1);
        let mut seq = Sequential::<f32>::new();
        seq.push(Linear::new(4, 3, &mut rng)).push(BatchNorm::new(3));
        let mut ck = Checkpoint::new(serde_json::json!({"kind": "test", "width": 4}));
        ck.insert_sequential(&seq, "net");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);

        let mut other = Sequential::<f32>::new();
        let mut rng2 = crate::seed::rng(2);
        other.push(Linear::new(4, 3, &mut rng2)).push(BatchNorm::new(3));
        back.load_sequential(&mut other, "net").unwrap();
        let x = ndarray::ArrayD::from_elem(IxDyn(&[2, 4]), 0.5f32);
        assert_eq!(seq.infer(x.clone()), other.infer(x));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = crate::seed::rng(1);
        let mut seq = Sequential::<f32>::new();
        seq.push(Linear::new(4, 3, &mut rng));
        let mut ck = Checkpoint::default();
        ck.insert_sequential(&seq, "net");
        let mut other = Sequential::<f32>::new();
        other.push(Linear::new(5, 3, &mut rng));
        assert!(ck.load_sequential(&mut other, "net").is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        std::fs::write(&path, b"GSFS0000000000000").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    }
}
