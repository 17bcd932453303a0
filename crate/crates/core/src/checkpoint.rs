//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `SACKPT01`, a little-endian `u64` header length, the
//! JSON header, then every parameter value as little-endian `f64` in store
//! order. The header lists each parameter's name, group, shape, trainable
//! flag and offset (in values) into the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sourceaware_nn::{ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::rng::sha256_hex;

pub const MAGIC: &[u8; 8] = b"SACKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub variant: String,
    pub config: Value,
    pub config_hash: String,
    pub metrics: Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    values: Vec<Vec<f64>>,
}

/// SHA-256 of the compact JSON form of a config.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let v = serde_json::to_vec(config).map_err(|e| Error::InvalidArgument(format!("config not serializable: {e}")))?;
    Ok(sha256_hex(&v))
}

pub fn save<T: Serialize>(
    path: &Path,
    kind: &str,
    variant: &str,
    config: &T,
    metrics: Value,
    store: &ParamStore,
) -> Result<()> {
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (_, p) in store.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            group: p.group.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            offset,
        });
        offset += p.value.len();
    }
    let header = CheckpointHeader {
        kind: kind.into(),
        variant: variant.into(),
        config: serde_json::to_value(config).map_err(|e| Error::InvalidArgument(e.to_string()))?,
        config_hash: config_hash(config)?,
        metrics,
        params,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + offset * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}

fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err("not a checkpoint file".into());
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16usize.saturating_add(len)).ok_or("truncated header")?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| format!("bad header: {e}"))?;
    let data = &bytes[16 + len..];
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if data.len() != total * 8 {
        return Err(format!("data section holds {} bytes, expected {}", data.len(), total * 8));
    }
    let mut values = Vec::with_capacity(header.params.len());
    let mut expected_offset = 0;
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        if p.offset != expected_offset {
            return Err(format!("parameter {} has offset {}, expected {expected_offset}", p.name, p.offset));
        }
        let chunk = &data[p.offset * 8..(p.offset + n) * 8];
        values.push(chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
        expected_offset += n;
    }
    Ok(Checkpoint { header, values })
}

impl Checkpoint {
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds a {} model, expected {kind}",
                self.header.kind
            )));
        }
        Ok(())
    }

    pub fn config<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.header.config.clone())
            .map_err(|e| Error::InvalidArgument(format!("checkpoint config does not parse: {e}")))
    }

    /// Copies values and trainable flags into a store with the same
    /// parameter names and shapes, in the same order.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.header.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", store.len()),
                got: format!("{} in checkpoint", self.header.params.len()),
            });
        }
        let ids: Vec<_> = store.ids().collect();
        for ((id, entry), vals) in ids.into_iter().zip(&self.header.params).zip(&self.values) {
            let p = store.get(id);
            if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} {:?}", p.name, p.value.shape()),
                    got: format!("{} {:?}", entry.name, entry.shape),
                });
            }
            *store.value_mut(id) = Tensor::from_vec(&entry.shape, vals.clone())?;
            store.set_trainable(id, entry.trainable);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut store = ParamStore::new();
        let a = store.add("a", "g", Tensor::from_vec(&[2, 2], vec![0.1, -2.5, 1e-300, f64::MAX]).unwrap());
        store.add("b", "h", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        store.set_trainable(a, false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, "test", "v", &serde_json::json!({"x": 1}), serde_json::json!({}), &store).unwrap();
        let ck = load(&path).unwrap();
        let mut other = store.clone();
        other.set_all_trainable(true);
        *other.value_mut(a) = Tensor::zeros(&[2, 2]);
        ck.restore_into(&mut other).unwrap();
        assert_eq!(other, store);
        assert_eq!(ck.header.config_hash, config_hash(&serde_json::json!({"x": 1})).unwrap());

        let mut wrong = ParamStore::new();
        wrong.add("a", "g", Tensor::zeros(&[4]));
        wrong.add("b", "h", Tensor::zeros(&[3]));
        assert!(ck.restore_into(&mut wrong).is_err());

        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }
}
