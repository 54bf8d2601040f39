//! Binary checkpoint container.
//!
//! Layout: the magic `CAATP1`, a little-endian `u32` manifest length, the
//! JSON manifest, then every tensor as little-endian `f32` values at the
//! offsets the manifest lists (relative to the start of the payload).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamSet, Tensor};

pub const MAGIC: &[u8; 6] = b"CAATP1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint is truncated: {0}")]
    Truncated(String),
    #[error("checkpoint manifest is invalid: {0}")]
    Manifest(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    Kind { expected: String, found: String },
    #[error("checkpoint config does not match: {0}")]
    Config(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing tensor {0}")]
    Missing(String),
    #[error("checkpoint has unexpected tensor {0}")]
    Unexpected(String),
    #[error("cannot read checkpoint {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes parameters in their insertion order.
pub fn encode(kind: &str, config: serde_json::Value, params: &ParamSet<f32>) -> Vec<u8> {
    let mut offset = 0;
    let tensors = params
        .names()
        .iter()
        .zip(params.tensors())
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.numel();
            e
        })
        .collect();
    let manifest = Manifest {
        kind: kind.to_string(),
        config,
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses the container, returning the manifest and tensors in file order.
pub fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<(String, Tensor<f32>)>), CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(CheckpointError::Truncated("manifest length".into()));
    }
    let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let rest = &rest[4..];
    if rest.len() < len {
        return Err(CheckpointError::Truncated("manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&rest[..len]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let payload = &rest[len..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        let end = e.offset + 4 * numel;
        if end > payload.len() {
            return Err(CheckpointError::Truncated(format!("tensor {}", e.name)));
        }
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| CheckpointError::Manifest(format!("{}: {err}", e.name)))?;
        tensors.push((e.name.clone(), t));
    }
    Ok((manifest, tensors))
}

/// Overwrites `params` with decoded tensors, requiring an exact name and
/// shape match.
pub fn fill(params: &mut ParamSet<f32>, tensors: Vec<(String, Tensor<f32>)>) -> Result<(), CheckpointError> {
    let mut seen = vec![false; params.len()];
    for (name, t) in tensors {
        let i = params
            .index_of(&name)
            .ok_or_else(|| CheckpointError::Unexpected(name.clone()))?;
        let expected = params.tensors()[i].shape().to_vec();
        if t.shape() != expected.as_slice() {
            return Err(CheckpointError::Shape {
                name,
                expected,
                found: t.shape().to_vec(),
            });
        }
        if !t.is_finite() {
            return Err(CheckpointError::Manifest(format!("tensor {name} holds non-finite values")));
        }
        *params.tensor_mut(i) = t;
        seen[i] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(CheckpointError::Missing(params.names()[i].clone()));
    }
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    std::fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    std::fs::write(path, bytes).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]).unwrap(), 0);
        p.insert("b", Tensor::new(&[1], vec![0.25]).unwrap(), 1);
        p
    }

    #[test]
    fn round_trip() {
        let p = sample();
        let bytes = encode("test", serde_json::json!({"n": 1}), &p);
        assert_eq!(&bytes[..6], b"CAATP1");
        let (m, tensors) = decode(&bytes).unwrap();
        assert_eq!(m.kind, "test");
        assert_eq!(m.config["n"], 1);
        let mut q = sample();
        q.get_mut("a").unwrap().data_mut()[0] = 0.0;
        fill(&mut q, tensors).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_damage() {
        let p = sample();
        let bytes = encode("test", serde_json::json!({}), &p);
        assert!(matches!(decode(b"CAATP2xxxx"), Err(CheckpointError::BadMagic)));
        assert!(matches!(decode(&bytes[..bytes.len() - 2]), Err(CheckpointError::Truncated(_))));

        let mut other = ParamSet::new();
        other.insert("a", Tensor::zeros(&[3, 2]), 0);
        other.insert("b", Tensor::zeros(&[1]), 0);
        let (_, t) = decode(&bytes).unwrap();
        assert!(matches!(fill(&mut other, t), Err(CheckpointError::Shape { .. })));

        let mut bigger = sample();
        bigger.insert("c", Tensor::zeros(&[1]), 0);
        let (_, t) = decode(&bytes).unwrap();
        assert!(matches!(fill(&mut bigger, t), Err(CheckpointError::Missing(n)) if n == "c"));
    }
}
