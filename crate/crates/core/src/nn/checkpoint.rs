//! Binary tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "SCILCKPT"
//! version   u32       1
//! hdr_len   u64       length of the JSON header in bytes
//! header    JSON      {"dtype":"f64","meta":{..},"tensors":[{"name","shape","offset"}]}
//! payload   f64 LE    row-major values of every tensor, concatenated; `offset` counts elements
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::model::Model;
use crate::tensor::Scalar;

const MAGIC: &[u8; 8] = b"SCILCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Parameters followed by batchnorm buffers.
    pub fn from_model<T: Scalar>(model: &Model<T>, meta: serde_json::Value) -> Self {
        let mut tensors: Vec<NamedTensor> = model
            .params()
            .into_iter()
            .map(|(name, p)| NamedTensor {
                name,
                shape: p.value.shape().to_vec(),
                values: p.value.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        tensors.extend(model.buffers().into_iter().map(|(name, t)| NamedTensor {
            name,
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|v| v.as_f64()).collect(),
        }));
        Self { meta, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.values.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            dtype: "f64".into(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("malformed checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hdr_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload_start = 20usize.checked_add(hdr_len).ok_or_else(|| bad("header length"))?;
        if bytes.len() < payload_start {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[20..payload_start])?;
        if header.dtype != "f64" {
            return Err(bad(&format!("dtype {}", header.dtype)));
        }
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let (start, end) = (e.offset * 8, (e.offset + n) * 8);
            if end > payload.len() {
                return Err(bad(&format!("tensor `{}` exceeds payload", e.name)));
            }
            let values = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                values,
            });
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkSpec;
    use crate::rng::stream;

    #[test]
    fn roundtrip_preserves_every_value() {
        let mut spec = NetworkSpec::scaled(16);
        spec.fc_units = 8;
        let m: Model<f32> = Model::new(&spec, 5, &mut stream(0, "init")).unwrap();
        let ck = Checkpoint::from_model(&m, serde_json::json!({"task": 0}));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(ck, back);
        let w = back.get("branch0.7.conv.weight").unwrap();
        assert_eq!(w.shape, vec![128, 64, 4]);
        assert!(back.get("branch0.0.bn.running_var").is_some());
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
    }
}
