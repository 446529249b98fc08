//! Flat binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian u32 header length, JSON header
//! (spec, element width, per-tensor element counts), then every parameter
//! buffer in declaration order as little-endian scalars.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::ArchitectureSpec;
use super::build::{build_model, Model};
use super::tensor::Elem;
use crate::cohort::write_atomic;

const MAGIC: &[u8; 8] = b"HBNCKPT1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint: {0}")]
    BadMagic(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint/model mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: ArchitectureSpec,
    elem_bytes: u8,
    tensor_numels: Vec<usize>,
    seed: u64,
}

/// Serializes a model's parameters. `seed` records the initialization seed
/// so a reload can rebuild the identical graph skeleton.
pub fn save_checkpoint<E: Elem>(
    model: &Model<E>,
    seed: u64,
    path: &Path,
) -> Result<(), CheckpointError> {
    let elem_bytes = std::mem::size_of::<E>() as u8;
    let header = Header {
        spec: model.spec,
        elem_bytes,
        tensor_numels: model.params().iter().map(|p| p.numel()).collect(),
        seed,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for p in model.params() {
        for v in p.value().iter() {
            let x = v.as_f64();
            if elem_bytes == 4 {
                bytes.extend_from_slice(&(x as f32).to_le_bytes());
            } else {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    write_atomic(path, &bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Rebuilds the model named in the header and loads its parameters.
pub fn load_checkpoint<E: Elem>(path: &Path) -> Result<Model<E>, CheckpointError> {
    let mut file = fs::File::open(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic(path.display().to_string()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(CheckpointError::Corrupt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| CheckpointError::Corrupt(format!("bad header: {e}")))?;
    let elem_bytes = std::mem::size_of::<E>();
    if header.elem_bytes as usize != elem_bytes {
        return Err(CheckpointError::Mismatch(format!(
            "element width {} in file, {} requested",
            header.elem_bytes, elem_bytes
        )));
    }

    let model = build_model::<E>(&header.spec, header.seed)
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    let expected: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    if expected != header.tensor_numels {
        return Err(CheckpointError::Mismatch(
            "tensor layout differs from rebuilt model".into(),
        ));
    }
    let total: usize = expected.iter().sum();
    if bytes.len() != header_end + total * elem_bytes {
        return Err(CheckpointError::Corrupt(format!(
            "expected {} value bytes, found {}",
            total * elem_bytes,
            bytes.len() - header_end
        )));
    }

    let mut offset = header_end;
    for p in model.params() {
        let n = p.numel();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = if elem_bytes == 4 {
                f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap())
            };
            data.push(E::from_f64(v));
            offset += elem_bytes;
        }
        p.set_value(data);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::{ArchitectureSpec, Family};
    use crate::nn::tensor::Tensor;

    #[test]
    fn round_trips_parameters_bit_exactly() {
        let spec = ArchitectureSpec::toy(Family::ResNet18, 2);
        let model = build_model::<f32>(&spec, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, 42, &path).unwrap();

        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.spec, spec);
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }

        // Same input, same logits.
        let x = Tensor::constant(&[1, 3, 224, 224], vec![0.5; 3 * 224 * 224]);
        let y1 = model.forward(&x, false).unwrap().to_vec();
        let y2 = loaded.forward(&x, false).unwrap().to_vec();
        assert_eq!(y1, y2);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(CheckpointError::BadMagic(_))
        ));
    }
}
