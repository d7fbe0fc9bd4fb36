//! JSON parameter checkpoints: `(name, shape, data)` triples tagged with a
//! fingerprint of the schema and configuration that produced them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NumericError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "qoe-numeric/checkpoint/v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub fingerprint: String,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, fingerprint: &str) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            fingerprint: fingerprint.to_string(),
            params: store
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_store(self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for r in self.params {
            store.add(r.name, Tensor::new(r.shape, r.data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(NumericError::Invalid(format!("unsupported checkpoint format `{}`", ck.format)));
        }
        Ok(ck)
    }

    /// Loads and rejects a checkpoint whose fingerprint differs from `expected`.
    pub fn load_matching(path: &Path, expected: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.fingerprint != expected {
            return Err(NumericError::Fingerprint {
                expected: expected.to_string(),
                found: ck.fingerprint,
            });
        }
        Ok(ck)
    }
}

/// Hex SHA-256 over the concatenated parts.
pub fn fingerprint(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_and_fingerprint_checked() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2], vec![0.1, 1.0 / 3.0]).unwrap()).unwrap();
        s.add("b", Tensor::new(vec![1, 1], vec![-2.5e-300]).unwrap()).unwrap();
        let dir = std::env::temp_dir().join(format!("qoe-ck-{}", std::process::id()));
        let path = dir.join("p.json");
        Checkpoint::from_store(&s, "fp1").save(&path).unwrap();
        let back = Checkpoint::load_matching(&path, "fp1").unwrap().into_store().unwrap();
        assert!(back.bitwise_eq(&s));
        assert!(matches!(
            Checkpoint::load_matching(&path, "fp2"),
            Err(NumericError::Fingerprint { .. })
        ));
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn fingerprint_separates_parts() {
        assert_ne!(fingerprint(&[b"ab", b"c"]), fingerprint(&[b"a", b"bc"]));
        assert_eq!(fingerprint(&[b"x"]).len(), 64);
    }
}
