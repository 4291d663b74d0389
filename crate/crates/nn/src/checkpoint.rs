//! Checkpoint directories: a `manifest.json` plus one little-endian float32
//! blob per named tensor, grouped (parameters, optimizer moments, ...).

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::NnError;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "obai-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub groups: IndexMap<String, ParamStore<f32>>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    meta: serde_json::Value,
    groups: IndexMap<String, Vec<BlobEntry>>,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn blob_file(idx: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' })
        .collect();
    format!("{idx:04}_{clean}.f32")
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            groups: IndexMap::new(),
            meta,
        }
    }

    pub fn with_group(mut self, name: impl Into<String>, store: ParamStore<f32>) -> Self {
        self.groups.insert(name.into(), store);
        self
    }

    pub fn group(&self, name: &str) -> Option<&ParamStore<f32>> {
        self.groups.get(name)
    }

    pub fn save(&self, dir: &Path) -> Result<(), NnError> {
        fs::create_dir_all(dir).map_err(|e| NnError::io(dir, e))?;
        let mut groups = IndexMap::new();
        for (gname, store) in &self.groups {
            let sub = dir.join(gname);
            fs::create_dir_all(&sub).map_err(|e| NnError::io(&sub, e))?;
            let mut entries = Vec::new();
            for (idx, (name, t)) in store.iter().enumerate() {
                let file = format!("{gname}/{}", blob_file(idx, name));
                let path = dir.join(&file);
                let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                fs::write(&path, bytes).map_err(|e| NnError::io(&path, e))?;
                entries.push(BlobEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    file,
                });
            }
            groups.insert(gname.clone(), entries);
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            meta: self.meta.clone(),
            groups,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| NnError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, NnError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| NnError::io(&path, e))?;
        let bad = |msg: String| NnError::Checkpoint {
            path: path.clone(),
            msg,
        };
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(bad(format!("unexpected format `{}`", manifest.format)));
        }
        if manifest.version != VERSION {
            return Err(bad(format!("unsupported version {}", manifest.version)));
        }
        let mut groups = IndexMap::new();
        for (gname, entries) in manifest.groups {
            let mut store = ParamStore::new();
            for e in entries {
                let blob: PathBuf = dir.join(&e.file);
                let bytes = fs::read(&blob).map_err(|err| NnError::io(&blob, err))?;
                if bytes.len() % 4 != 0 {
                    return Err(bad(format!("{}: length {} is not a multiple of 4", e.file, bytes.len())));
                }
                let data: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                let t = Tensor::new(&e.shape, data).map_err(|err| bad(format!("{}: {err}", e.name)))?;
                store.insert(e.name, t)?;
            }
            groups.insert(gname, store);
        }
        Ok(Self {
            groups,
            meta: manifest.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let init = Init::new(9);
        let mut store = ParamStore::<f32>::new();
        store.insert("dec/0.w", init.fan_in("dec/0.w", &[3, 4, 5, 5], 75)).unwrap();
        store.insert("D", Tensor::new(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap()).unwrap();
        let ck = Checkpoint::new(serde_json::json!({"epoch": 3})).with_group("params", store.clone());
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        let restored = back.group("params").unwrap();
        for ((na, a), (nb, b)) in store.iter().zip(restored.iter()) {
            assert_eq!(na, nb);
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(back.meta["epoch"], 3);
    }

    #[test]
    fn corrupt_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("manifest.json"), "{not json").unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(NnError::Checkpoint { .. })));
    }
}
