//! Binary checkpoint container shared by the linear and learned models.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  b"PSIDCKPT"
//! version u32      currently 1
//! hlen    u64      JSON header byte length
//! header  hlen     UTF-8 JSON object (model kind, hyperparameters, ...)
//! count   u64      number of tensors
//! per tensor:
//!   nlen  u64      name byte length, then the UTF-8 name
//!   ndim  u64      then ndim u64 dimensions
//!   data  f64 × product(dims), row-major
//! ```
//!
//! Tensors keep their insertion order, so writing the same model twice
//! produces byte-identical files.

use serde_json::Value;
use std::io::{Read as _, Write as _};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"PSIDCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {got} (expected {VERSION})")]
    BadVersion { got: u32 },
    #[error("malformed JSON header: {0}")]
    BadHeader(#[from] serde_json::Error),
    #[error("tensor `{name}`: shape {shape:?} does not match {len} values")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("duplicate tensor name `{name}`")]
    DuplicateName { name: String },
    #[error("missing tensor `{name}`")]
    MissingTensor { name: String },
    #[error("file truncated or corrupt while reading {what}")]
    Truncated { what: &'static str },
    #[error("unreasonable {what} field ({got}); file corrupt?")]
    FieldOutOfRange { what: &'static str, got: u64 },
}

/// One named array: shape plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// An ordered, name-unique collection of tensors plus a JSON header.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Value,
    tensors: Vec<(String, TensorData)>,
}

impl Checkpoint {
    pub fn new(header: Value) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<(), CheckpointError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                shape,
                len: data.len(),
            });
        }
        if self.tensors.iter().any(|(n, _)| n == name) {
            return Err(CheckpointError::DuplicateName {
                name: name.to_string(),
            });
        }
        self.tensors
            .push((name.to_string(), TensorData { shape, data }));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Like [`Checkpoint::get`] but failing loudly, for load paths where the
    /// tensor is mandatory.
    pub fn require(&self, name: &str) -> Result<&TensorData, CheckpointError> {
        self.get(name).ok_or_else(|| CheckpointError::MissingTensor {
            name: name.to_string(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape.len() as u64).to_le_bytes());
            for &d in &tensor.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &tensor.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = Cursor {
            bytes: &bytes,
            pos: 0,
        };

        if cursor.take(8, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(cursor.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::BadVersion { got: version });
        }
        let hlen = cursor.u64("header length")?;
        check_len(hlen, bytes.len(), "header length")?;
        let header: Value = serde_json::from_slice(cursor.take(hlen as usize, "header")?)?;

        let count = cursor.u64("tensor count")?;
        check_len(count, 1 << 32, "tensor count")?;
        let mut ckpt = Checkpoint::new(header);
        for _ in 0..count {
            let nlen = cursor.u64("name length")?;
            check_len(nlen, bytes.len(), "name length")?;
            let name = std::str::from_utf8(cursor.take(nlen as usize, "name")?)
                .map_err(|_| CheckpointError::Truncated { what: "name" })?
                .to_string();
            let ndim = cursor.u64("rank")?;
            check_len(ndim, 64, "rank")?;
            let mut shape = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                let d = cursor.u64("dimension")?;
                check_len(d, 1 << 40, "dimension")?;
                shape.push(d as usize);
            }
            let total: usize = shape.iter().product();
            let mut data = Vec::with_capacity(total);
            for _ in 0..total {
                let raw = cursor.take(8, "tensor data")?;
                data.push(f64::from_le_bytes(raw.try_into().unwrap()));
            }
            ckpt.insert(&name, shape, data)?;
        }
        Ok(ckpt)
    }
}

fn check_len(got: u64, bound: usize, what: &'static str) -> Result<(), CheckpointError> {
    if got > bound as u64 {
        return Err(CheckpointError::FieldOutOfRange { what, got });
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { what });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(json!({"kind": "test", "m": 4}));
        c.insert("A", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        c.insert("b", vec![3], vec![-0.5, 0.25, f64::MIN_POSITIVE])
            .unwrap();
        c.insert("scalar", vec![], vec![42.0]).unwrap();
        c
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample();
        ckpt.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(ckpt, back);
        assert_eq!(back.header["m"], 4);
        assert_eq!(back.require("A").unwrap().shape, vec![2, 2]);
        assert_eq!(
            back.names().collect::<Vec<_>>(),
            vec!["A", "b", "scalar"],
            "insertion order preserved"
        );
    }

    #[test]
    fn deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        sample().write(&p1).unwrap();
        sample().write(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");

        std::fs::write(&path, b"NOTMAGIC________").unwrap();
        assert!(matches!(
            Checkpoint::read(&path),
            Err(CheckpointError::BadMagic)
        ));

        // Truncate a valid file mid-tensor.
        let good = dir.path().join("good.ckpt");
        sample().write(&good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            Checkpoint::read(&path),
            Err(CheckpointError::Truncated { .. })
        ));

        // Wrong version.
        let mut v2 = bytes.clone();
        v2[8] = 99;
        std::fs::write(&path, &v2).unwrap();
        assert!(matches!(
            Checkpoint::read(&path),
            Err(CheckpointError::BadVersion { got: 99 })
        ));
    }

    #[test]
    fn insert_validates() {
        let mut c = Checkpoint::new(json!({}));
        assert!(matches!(
            c.insert("x", vec![2, 3], vec![0.0; 5]),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
        c.insert("x", vec![5], vec![0.0; 5]).unwrap();
        assert!(matches!(
            c.insert("x", vec![1], vec![0.0]),
            Err(CheckpointError::DuplicateName { .. })
        ));
        assert!(matches!(
            c.require("missing"),
            Err(CheckpointError::MissingTensor { .. })
        ));
    }
}
