//! Versioned binary container for named tensors.
//!
//! Layout, all integers little-endian `u32`, values little-endian `f32`:
//!
//! ```text
//! magic        8 bytes  "DMCKPT\0\0"
//! version      u32      = 1
//! merge_count  u32      number of adapter sets averaged into the merged adapters
//! n_classes    u32
//! class ids    u32 × n_classes   (unified-head slot order)
//! n_tensors    u32
//! per tensor:  name_len u32, name (utf-8), rank u32, dims u32 × rank, values f32 × numel
//! ```
//!
//! Tensors are written in insertion order, so save → load → save is byte-identical.

use std::path::Path;

use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DMCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub merge_count: u32,
    pub classes: Vec<ClassId>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Collects the named parameters `ids` from `store`.
    pub fn from_store(store: &ParamStore<f32>, ids: &[ParamId]) -> Self {
        Self {
            merge_count: 0,
            classes: Vec::new(),
            tensors: ids
                .iter()
                .map(|&id| (store.name(id).to_owned(), store.value(id).clone()))
                .collect(),
        }
    }

    /// Copies every tensor into the same-named parameter of `store`,
    /// temporarily lifting a freeze. Shapes must match.
    pub fn apply(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for (name, t) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| crate::error::invalid!("checkpoint tensor `{name}` has no parameter"))?;
            let frozen = store.is_frozen(id);
            store.unfreeze(id);
            let loaded = store.load_value(id, t.clone());
            if frozen {
                store.freeze(id);
            }
            loaded?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put(&mut out, CHECKPOINT_VERSION);
        put(&mut out, self.merge_count);
        put(&mut out, self.classes.len() as u32);
        for &c in &self.classes {
            put(&mut out, c);
        }
        put(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put(&mut out, d as u32);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.fail(0, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(8, &format!("unsupported checkpoint version {version}")));
        }
        let merge_count = r.u32()?;
        let n_classes = r.u32()? as usize;
        let classes = (0..n_classes).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors.min(4096));
        for _ in 0..n_tensors {
            let start = r.pos;
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| r.fail(start, "tensor name is not utf-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.fail(start, &e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, "trailing bytes after last tensor"));
        }
        Ok(Self {
            merge_count,
            classes,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, message: &str) -> Error {
        Error::Format {
            path: self.origin.to_path_buf(),
            offset: offset as u64,
            message: message.to_owned(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(self.pos, &format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            merge_count: 3,
            classes: vec![7, 2, 9],
            tensors: vec![
                ("a.weight".into(), Tensor::from_fn(&[2, 3], |i| i as f32 * 0.25)),
                ("a.bias".into(), Tensor::from_fn(&[3], |i| -(i as f32))),
            ],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), std::fs::read(&p).unwrap());
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let bytes = sample().to_bytes();
        let origin = Path::new("x.ckpt");
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 2], origin).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad, origin),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn roundtrip(values in proptest::collection::vec(-1e6f32..1e6, 1..40), mc in 0u32..10) {
            let n = values.len();
            let ck = Checkpoint {
                merge_count: mc,
                classes: (0..n as u32).collect(),
                tensors: vec![("t".into(), Tensor::new(vec![n], values).unwrap())],
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("p")).unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}
