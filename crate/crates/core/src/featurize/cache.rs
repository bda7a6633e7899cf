use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{featurize, FeatureConfig, FeaturizedMolecule};
use crate::error::{Error, Result};
use crate::molio::Molecule;

const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    version: u32,
    config_hash: String,
    id: String,
    conformer: usize,
    record: FeaturizedMolecule,
}

/// On-disk cache of featurized records keyed by (molecule id, feature-config
/// hash, conformer index). Entries are always regenerable from the source
/// molecules, so any unreadable or stale entry is recomputed.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    root: PathBuf,
}

impl FeatureCache {
    pub const ENV_VAR: &'static str = "FLEXMOL_CACHE_DIR";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Cache rooted at `$FLEXMOL_CACHE_DIR`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(Self::ENV_VAR).map(Self::new)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_path(&self, cfg_hash: &str, id: &str, conformer: usize) -> PathBuf {
        let key = hex::encode(Sha256::digest(id.as_bytes()));
        self.root
            .join(&cfg_hash[..16])
            .join(format!("{}-{conformer}.bin", &key[..32]))
    }

    pub fn get(&self, mol: &Molecule, cfg: &FeatureConfig, conformer: usize) -> Option<FeaturizedMolecule> {
        let hash = cfg.hash();
        let bytes = fs::read(self.entry_path(&hash, &mol.id, conformer)).ok()?;
        let entry: Entry = bincode::deserialize(&bytes).ok()?;
        (entry.version == CACHE_VERSION
            && entry.config_hash == hash
            && entry.id == mol.id
            && entry.conformer == conformer)
            .then_some(entry.record)
    }

    pub fn put(&self, record: &FeaturizedMolecule, conformer: usize) -> Result<()> {
        let path = self.entry_path(&record.config_hash, &record.id, conformer);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let entry = Entry {
            version: CACHE_VERSION,
            config_hash: record.config_hash.clone(),
            id: record.id.clone(),
            conformer,
            record: record.clone(),
        };
        let bytes = bincode::serialize(&entry).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load_or_compute(
        &self,
        mol: &Molecule,
        cfg: &FeatureConfig,
        conformer: usize,
    ) -> Result<FeaturizedMolecule> {
        if let Some(hit) = self.get(mol, cfg, conformer) {
            return Ok(hit);
        }
        let record = featurize(mol, cfg, conformer)?;
        self.put(&record, conformer)?;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molio::{Bond, BondType};

    #[test]
    fn cache_hit_equals_fresh_computation() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let mol = Molecule {
            id: "co".into(),
            atomic_numbers: vec![6, 8],
            formal_charges: vec![0, 0],
            bonds: Some(vec![Bond::new(0, 1, BondType::Double)]),
            conformers: Some(vec![vec![[0.0; 3], [1.2, 0.0, 0.0]]]),
            label: None,
        };
        let cfg = FeatureConfig::default();
        assert!(cache.get(&mol, &cfg, 0).is_none());
        let first = cache.load_or_compute(&mol, &cfg, 0).unwrap();
        let hit = cache.get(&mol, &cfg, 0).unwrap();
        assert_eq!(first, hit);
        let other = FeatureConfig {
            max_hop: 20,
            ..FeatureConfig::default()
        };
        assert!(cache.get(&mol, &other, 0).is_none());
    }
}
