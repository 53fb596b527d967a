//! Checkpoint file format: a single-line JSON header (format version,
//! model config, entry table with byte offsets) terminated by a newline,
//! followed by the raw little-endian f64 payload. Round-trips bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{registry_layout, LayerType, ModelConfig, ParamStore};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    entries: Vec<EntryMeta>,
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    layer_type: LayerType,
    shape: Vec<usize>,
    byte_offset: u64,
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, ty, t) in store.iter() {
        entries.push(EntryMeta {
            name: name.to_string(),
            layer_type: ty,
            shape: t.shape().to_vec(),
            byte_offset: offset,
        });
        offset += (t.numel() * 8) as u64;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: store.config().clone(),
        entries,
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for (_, _, t) in store.iter() {
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format version {}",
            header.format_version
        )));
    }
    header.config.validate()?;

    let expected = registry_layout(&header.config);
    if expected.len() != header.entries.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} entries, registry expects {}",
            header.entries.len(),
            expected.len()
        )));
    }
    let payload = &bytes[nl + 1..];
    let mut entries = Vec::with_capacity(header.entries.len());
    for (meta, (name, ty, shape)) in header.entries.iter().zip(&expected) {
        if &meta.name != name || meta.layer_type != *ty || &meta.shape != shape {
            return Err(Error::Format(format!(
                "checkpoint entry {} does not match registry layout",
                meta.name
            )));
        }
        let numel: usize = shape.iter().product();
        let start = meta.byte_offset as usize;
        let end = start + numel * 8;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "checkpoint payload truncated at entry {}",
                meta.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        entries.push((name.clone(), *ty, Tensor::from_vec(shape.clone(), data)?));
    }
    ParamStore::from_entries(header.config, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let cfg = ModelConfig {
            vocab_size: 17,
            context_len: 8,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            seed: 3,
        };
        let store = build_model(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(store.registry_hash(), loaded.registry_hash());
        for ((na, ta, pa), (nb, tb, pb)) in store.iter().zip(loaded.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
            let ba: Vec<u64> = pa.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = pb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb);
        }
        // saving twice produces identical bytes
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&store, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let cfg = ModelConfig {
            vocab_size: 5,
            context_len: 4,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 8,
            seed: 1,
        };
        let store = build_model(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&store, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
