//! Flat keyed parameter storage with a versioned binary wire format.
//!
//! Format: 8-byte magic `PTRDSH01`, then per entry (in ascending key
//! order): key length (u32 LE), UTF-8 key bytes, rank (u32 LE), one u32 LE
//! per dimension, payload as little-endian f64. No count field; the reader
//! consumes entries until EOF.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{CoreError, Result};
use crate::graph::{ComputationGraph, OpKind};
use crate::tensor::TensorValue;

pub const PARAMS_MAGIC: &[u8; 8] = b"PTRDSH01";

#[derive(Debug, Clone)]
struct ParamEntry {
    value: TensorValue,
    trainable: bool,
}

/// Model weights, shortcut selection weights, gate scalars and batch-norm
/// running statistics, all keyed by string path.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: TensorValue, trainable: bool) {
        self.entries.insert(key.into(), ParamEntry { value, trainable });
    }

    pub fn get(&self, key: &str) -> Result<&TensorValue> {
        self.entries
            .get(key)
            .map(|e| &e.value)
            .ok_or_else(|| CoreError::MissingParam(key.to_string()))
    }

    pub fn get_mut(&mut self, key: &str) -> Result<&mut TensorValue> {
        self.entries
            .get_mut(key)
            .map(|e| &mut e.value)
            .ok_or_else(|| CoreError::MissingParam(key.to_string()))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn remove(&mut self, key: &str) {
        self.entries.remove(key);
    }

    pub fn is_trainable(&self, key: &str) -> bool {
        self.entries.get(key).map(|e| e.trainable).unwrap_or(false)
    }

    pub fn set_trainable(&mut self, key: &str, trainable: bool) {
        if let Some(e) = self.entries.get_mut(key) {
            e.trainable = trainable;
        }
    }

    /// Keys in ascending order.
    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_keys(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count over all entries.
    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Total element count over trainable entries.
    pub fn trainable_elements(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Recompute trainability flags from a graph: every key referenced by a
    /// node is trainable except batch-norm running statistics (param slots
    /// 2 and 3 of `batch_norm`). Keys not referenced by any node keep their
    /// current flag.
    pub fn mark_trainability(&mut self, graph: &ComputationGraph) {
        for node in &graph.nodes {
            for (slot, key) in node.param_keys.iter().enumerate() {
                let trainable = !(node.op_kind == OpKind::BatchNorm && slot >= 2);
                if let Some(e) = self.entries.get_mut(key) {
                    e.trainable = trainable;
                }
            }
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(PARAMS_MAGIC)?;
        for (key, entry) in &self.entries {
            let kb = key.as_bytes();
            w.write_all(&(kb.len() as u32).to_le_bytes())?;
            w.write_all(kb)?;
            w.write_all(&(entry.value.shape.len() as u32).to_le_bytes())?;
            for dim in &entry.value.shape {
                w.write_all(&(*dim as u32).to_le_bytes())?;
            }
            for v in &entry.value.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| CoreError::CorruptCheckpoint("missing magic".into()))?;
        if &magic != PARAMS_MAGIC {
            return Err(CoreError::CorruptCheckpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(PARAMS_MAGIC)
            )));
        }
        let mut entries = BTreeMap::new();
        loop {
            let mut len_buf = [0u8; 4];
            match r.read(&mut len_buf)? {
                0 => break,
                4 => {}
                n => {
                    // partial read of the length field: try to complete it
                    let mut rest = [0u8; 4];
                    let need = 4 - n;
                    r.read_exact(&mut rest[..need])
                        .map_err(|_| CoreError::CorruptCheckpoint("truncated key length".into()))?;
                    len_buf[n..].copy_from_slice(&rest[..need]);
                }
            }
            let key_len = u32::from_le_bytes(len_buf) as usize;
            let mut key_bytes = vec![0u8; key_len];
            r.read_exact(&mut key_bytes)
                .map_err(|_| CoreError::CorruptCheckpoint("truncated key".into()))?;
            let key = String::from_utf8(key_bytes)
                .map_err(|_| CoreError::CorruptCheckpoint("key is not UTF-8".into()))?;
            let rank = read_u32(r).map_err(|_| {
                CoreError::CorruptCheckpoint(format!("truncated rank for `{key}`"))
            })? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r).map_err(|_| {
                    CoreError::CorruptCheckpoint(format!("truncated dims for `{key}`"))
                })? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            let mut fbuf = [0u8; 8];
            for _ in 0..count {
                r.read_exact(&mut fbuf).map_err(|_| {
                    CoreError::CorruptCheckpoint(format!("truncated payload for `{key}`"))
                })?;
                data.push(f64::from_le_bytes(fbuf));
            }
            entries.insert(
                key,
                ParamEntry {
                    value: TensorValue::new(shape, data),
                    trainable: true,
                },
            );
        }
        Ok(ParameterStore { entries })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = std::io::Cursor::new(bytes);
        Self::read_from(&mut cursor)
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore {
        let mut p = ParameterStore::new();
        p.insert("b/w", TensorValue::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.25]), true);
        p.insert("a/gate", TensorValue::scalar(0.0), true);
        p.insert("c/running_mean", TensorValue::new(vec![2], vec![0.1, 0.2]), false);
        p
    }

    #[test]
    fn round_trip_is_exact() {
        let p = sample_store();
        let bytes = p.to_bytes().unwrap();
        let q = ParameterStore::from_bytes(&bytes).unwrap();
        assert_eq!(p.len(), q.len());
        for key in p.keys() {
            assert_eq!(p.get(key).unwrap(), q.get(key).unwrap());
        }
    }

    #[test]
    fn bytes_are_stable() {
        let p = sample_store();
        assert_eq!(p.to_bytes().unwrap(), p.to_bytes().unwrap());
    }

    #[test]
    fn magic_checked() {
        let mut bytes = sample_store().to_bytes().unwrap();
        bytes[7] = b'0'; // PTRDSH00
        let err = ParameterStore::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, CoreError::CorruptCheckpoint(_)));
        assert!(err.to_string().contains("PTRDSH00"));
    }

    #[test]
    fn truncation_detected() {
        let bytes = sample_store().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        let err = ParameterStore::from_bytes(cut).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn keys_serialize_sorted() {
        let p = sample_store();
        let bytes = p.to_bytes().unwrap();
        // first key after the magic should be the lexicographically smallest
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let first_key = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
        assert_eq!(first_key, "a/gate");
    }
}
