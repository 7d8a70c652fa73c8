//! Binary model checkpoints.
//!
//! Layout: magic `GZCKPT01`, then a shape table (entry count, per entry a
//! length-prefixed name and its dimension), then all parameter tensors as
//! row-major little-endian f32 in table order. A JSON sidecar (same path
//! with `.json` appended) records the structural config plus training
//! provenance so a checkpoint can be loaded without external context.

use super::model::{Model, ModelConfig};
use crate::{Error, Result};
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 8] = b"GZCKPT01";

/// Provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Task label, e.g. "CvDS".
    pub task: String,
    /// "response" or "reading".
    pub alignment: String,
    pub fold: usize,
    pub seed_index: usize,
    pub best_epoch: usize,
    pub config_hash: String,
}

pub fn save_checkpoint(model: &Model<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut entries: Vec<(String, usize)> = Vec::new();
    model.for_each_param(&mut |name, w, _| entries.push((name.to_string(), w.len())));

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, len) in &entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(*len as u64).to_le_bytes());
    }
    model.for_each_param(&mut |_, w, _| {
        for v in w {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

    let meta_path = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Config(format!("meta serialization: {e}")))?;
    std::fs::write(&meta_path, json).map_err(|e| Error::io(meta_path, e))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let meta_path = sidecar_path(path);
    let meta_json = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_json).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        line: 0,
        message: e.to_string(),
    })?;

    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    drop(file);

    let bad = |message: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: message.to_string(),
    };
    if buf.len() < 12 || &buf[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut off = 8usize;
    let read_u32 = |b: &[u8], o: &mut usize| -> Result<u32> {
        if *o + 4 > b.len() {
            return Err(bad("truncated header"));
        }
        let v = u32::from_le_bytes(b[*o..*o + 4].try_into().unwrap());
        *o += 4;
        Ok(v)
    };
    let n_entries = read_u32(&buf, &mut off)? as usize;
    let mut entries: Vec<(String, usize)> = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = read_u32(&buf, &mut off)? as usize;
        if off + name_len + 8 > buf.len() {
            return Err(bad("truncated entry"));
        }
        let name = String::from_utf8(buf[off..off + name_len].to_vec())
            .map_err(|_| bad("entry name is not utf-8"))?;
        off += name_len;
        let len = u64::from_le_bytes(buf[off..off + 8].try_into().unwrap()) as usize;
        off += 8;
        entries.push((name, len));
    }

    let mut model = Model::<f32>::new(meta.model.clone());
    let mut expected: Vec<(String, usize)> = Vec::new();
    model.for_each_param(&mut |name, w, _| expected.push((name.to_string(), w.len())));
    if entries != expected {
        return Err(bad("shape table does not match the model config"));
    }

    let total: usize = entries.iter().map(|(_, l)| l).sum();
    if buf.len() - off != total * 4 {
        return Err(bad("payload size mismatch"));
    }
    let mut flat = Vec::with_capacity(total);
    for chunk in buf[off..].chunks_exact(4) {
        flat.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    model.set_param_vec(&flat);
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(cfg: &ModelConfig) -> CheckpointMeta {
        CheckpointMeta {
            model: cfg.clone(),
            task: "CvDS".into(),
            alignment: "response".into(),
            fold: 2,
            seed_index: 1,
            best_epoch: 4,
            config_hash: "deadbeef".into(),
        }
    }

    #[test]
    fn test_roundtrip_preserves_weights_bitwise() {
        let cfg = ModelConfig {
            t_len: 10,
            set_size: 2,
            filters: 2,
            hidden: 4,
            share_direction_weights: true,
            seed: 5,
        };
        let model = Model::<f32>::new(cfg.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&model, &meta(&cfg), &path).unwrap();
        let (loaded, m) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta(&cfg));
        let a = model.param_vec();
        let b = loaded.param_vec();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn test_corrupt_magic_is_rejected() {
        let cfg = ModelConfig {
            t_len: 10,
            set_size: 2,
            filters: 1,
            hidden: 4,
            share_direction_weights: true,
            seed: 5,
        };
        let model = Model::<f32>::new(cfg.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&model, &meta(&cfg), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn test_mismatched_config_is_rejected() {
        let cfg = ModelConfig {
            t_len: 10,
            set_size: 2,
            filters: 2,
            hidden: 4,
            share_direction_weights: true,
            seed: 5,
        };
        let model = Model::<f32>::new(cfg.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&model, &meta(&cfg), &path).unwrap();
        // Tamper with the sidecar so the declared config no longer matches
        // the stored shape table.
        let side = dir.path().join("model.bin.json");
        let mut m: CheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(&side).unwrap()).unwrap();
        m.model.filters = 3;
        std::fs::write(&side, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
