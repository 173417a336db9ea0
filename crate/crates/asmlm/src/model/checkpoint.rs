//! Checkpoint persistence: a JSON header (version, config, tensor index)
//! followed by raw little-endian f64 tensor payloads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams};

const MAGIC: &[u8; 8] = b"ASMLMCK\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

/// Writes params to `path`.
pub fn save(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let io_err = |e: std::io::Error| ModelError::Checkpoint(e.to_string());
    let tensors = params.tensors();
    let header = Header {
        version: VERSION,
        config: params.config.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), len: t.len() })
            .collect(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&header_bytes).map_err(io_err)?;
    for (_, tensor) in &tensors {
        for v in *tensor {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Loads params from `path`, validating magic, version, tensor layout and
/// finiteness.
pub fn load(path: &Path) -> Result<ModelParams, ModelError> {
    let io_err = |e: std::io::Error| ModelError::Checkpoint(e.to_string());
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(io_err)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8).map_err(io_err)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
    header.config.validate()?;

    let mut params = ModelParams::zeros_like(&header.config);
    {
        let mut views = params.tensors_mut();
        if views.len() != header.tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "tensor count mismatch: file has {}, config implies {}",
                header.tensors.len(),
                views.len()
            )));
        }
        for (entry, (name, view)) in header.tensors.iter().zip(views.iter_mut()) {
            if entry.name != *name || entry.len != view.len() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{}` (len {}) does not match expected `{name}` (len {})",
                    entry.name,
                    entry.len,
                    view.len()
                )));
            }
            for slot in view.iter_mut() {
                r.read_exact(&mut buf8).map_err(io_err)?;
                *slot = f64::from_le_bytes(buf8);
            }
        }
    }
    if !params.is_finite() {
        return Err(ModelError::Checkpoint("non-finite tensor values".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_seq_len: 16,
            hierarchical_head_count: 1,
            tied_output: false,
        }
    }

    #[test]
    fn round_trip_preserves_every_tensor() {
        let params = ModelParams::init(config(), 99);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&params, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(params, loaded);
        assert_eq!(params.digest(), loaded.digest());
    }

    #[test]
    fn tied_output_round_trips() {
        let mut cfg = config();
        cfg.tied_output = true;
        let params = ModelParams::init(cfg, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save(&params, &path).unwrap();
        assert_eq!(load(&path).unwrap(), params);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let params = ModelParams::init(config(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        save(&params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(ModelError::Checkpoint(_))));
    }
}
