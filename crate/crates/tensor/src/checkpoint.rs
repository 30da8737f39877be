//! Single-file checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset      | size | content                                   |
//! |-------------|------|-------------------------------------------|
//! | 0           | 8    | magic `HYDRACK1`                          |
//! | 8           | 8    | `u64` header length `H` in bytes          |
//! | 16          | H    | UTF-8 JSON header (see [`Header`])        |
//! | 16 + H      | ...  | payload: `f64` values, little-endian      |
//!
//! Each manifest entry carries `offset`, the byte offset of its first value
//! relative to the start of the payload; entries are written back to back in
//! manifest order, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HYDRACK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// Parameter group, e.g. `trunk` or `adapter.actor`.
    pub group: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    /// Free-form metadata; models store their configuration here.
    pub metadata: serde_json::Value,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub group: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut offset = 0u64;
        let manifest = self
            .tensors
            .iter()
            .map(|t| {
                let e = ManifestEntry {
                    name: t.name.clone(),
                    group: t.group.clone(),
                    shape: t.tensor.shape().to_vec(),
                    offset,
                    trainable: t.tensor.requires_grad,
                };
                offset += 8 * t.tensor.numel() as u64;
                e
            })
            .collect();
        let header = Header {
            version: FORMAT_VERSION,
            metadata: self.metadata.clone(),
            tensors: manifest,
        };
        let json =
            serde_json::to_vec(&header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in &self.tensors {
            for v in t.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let header = read_header_body(&mut r)?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(TensorError::Checkpoint(format!(
                    "tensor {} runs past the payload",
                    e.name
                )));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(e.shape, data)?.with_grad(e.trainable);
            tensors.push(NamedTensor {
                name: e.name,
                group: e.group,
                tensor,
            });
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_header_body<R: Read>(r: &mut R) -> Result<Header> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    Ok(header)
}

/// Reads only the JSON header, for manifest inspection.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    read_header_body(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            metadata: serde_json::json!({"d_model": 4}),
            tensors: vec![
                NamedTensor {
                    name: "w".into(),
                    group: "trunk".into(),
                    tensor: Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE])
                        .unwrap(),
                },
                NamedTensor {
                    name: "a".into(),
                    group: "adapter.actor".into(),
                    tensor: Tensor::new(vec![3], vec![0.1, 0.2, 0.3])
                        .unwrap()
                        .with_grad(true),
                },
            ],
        }
    }

    #[test]
    fn byte_layout() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let h = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&buf[16..16 + h]).unwrap();
        assert_eq!(header.tensors[0].offset, 0);
        assert_eq!(header.tensors[1].offset, 32);
        assert_eq!(header.tensors[1].group, "adapter.actor");
        let payload = &buf[16 + h..];
        assert_eq!(payload.len(), 8 * 7);
        assert_eq!(f64::from_le_bytes(payload[8..16].try_into().unwrap()), -2.5);
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut buf = Vec::new();
        let ck = sample();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(Checkpoint::read_from(&buf[..]).unwrap(), ck);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::read_from(&b"NOTACKPT\0\0\0\0\0\0\0\0"[..]).is_err());
    }
}
