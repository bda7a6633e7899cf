use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{dataset_modality, Bond, BondType, Conformer, Modality, Molecule};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    atoms: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    charges: Option<Vec<i32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bonds: Option<Vec<(usize, usize, BondType)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coords: Option<Vec<Conformer>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<f64>,
}

impl From<Record> for Molecule {
    fn from(r: Record) -> Self {
        let n = r.atoms.len();
        Molecule {
            id: r.id,
            atomic_numbers: r.atoms,
            formal_charges: r.charges.unwrap_or_else(|| vec![0; n]),
            bonds: r
                .bonds
                .map(|bs| bs.into_iter().map(|(i, j, k)| Bond::new(i, j, k)).collect()),
            conformers: r.coords,
            label: r.label,
        }
    }
}

impl From<&Molecule> for Record {
    fn from(m: &Molecule) -> Self {
        Record {
            id: m.id.clone(),
            atoms: m.atomic_numbers.clone(),
            charges: m
                .formal_charges
                .iter()
                .any(|&c| c != 0)
                .then(|| m.formal_charges.clone()),
            bonds: m
                .bonds
                .as_ref()
                .map(|bs| bs.iter().map(|b| (b.i, b.j, b.kind)).collect()),
            coords: m.conformers.clone(),
            label: m.label,
        }
    }
}

pub fn parse_jsonl(path: impl AsRef<Path>) -> Result<Vec<Molecule>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl_str(&text, path)
}

/// Parses JSONL text; `origin` is used only in error messages.
pub fn parse_jsonl_str(text: &str, origin: impl AsRef<Path>) -> Result<Vec<Molecule>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.as_ref().to_path_buf(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let mol = Molecule::from(record);
        mol.validate()?;
        out.push(mol);
    }
    Ok(out)
}

pub fn write_jsonl_string(molecules: &[Molecule]) -> Result<String> {
    let mut out = String::new();
    for m in molecules {
        let line =
            serde_json::to_string(&Record::from(m)).map_err(|e| Error::Serde(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, molecules: &[Molecule]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_jsonl_string(molecules)?).map_err(|e| Error::io(path, e))
}

/// Sidecar describing a JSONL dataset on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub path: String,
    pub count: usize,
    pub modality: Modality,
    pub format_version: u32,
}

impl DatasetManifest {
    pub fn describe(path: impl AsRef<Path>, molecules: &[Molecule]) -> Self {
        Self {
            path: path.as_ref().display().to_string(),
            count: molecules.len(),
            modality: dataset_modality(molecules),
            format_version: FORMAT_VERSION,
        }
    }

    /// Conventional sidecar location: `<data>.manifest.json`.
    pub fn sidecar_path(data_path: impl AsRef<Path>) -> std::path::PathBuf {
        let mut p = data_path.as_ref().as_os_str().to_owned();
        p.push(".manifest.json");
        p.into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Checks the manifest against records actually read from disk.
    pub fn verify(&self, molecules: &[Molecule]) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "manifest format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.count != molecules.len() {
            return Err(Error::Config(format!(
                "manifest lists {} records but {} were read",
                self.count,
                molecules.len()
            )));
        }
        let actual = dataset_modality(molecules);
        if self.modality != Modality::Mixed && self.modality != actual {
            return Err(Error::Config(format!(
                "manifest modality {:?} but records are {:?}",
                self.modality, actual
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_minimal_record() {
        let mols =
            parse_jsonl_str(r#"{"id":"m1","atoms":[6,8],"bonds":[[0,1,"double"]]}"#, "x").unwrap();
        assert_eq!(mols.len(), 1);
        let m = &mols[0];
        assert_eq!(m.n_atoms(), 2);
        assert_eq!(m.formal_charges, vec![0, 0]);
        assert_eq!(m.bonds.as_ref().unwrap(), &vec![Bond::new(0, 1, BondType::Double)]);
        assert!(m.conformers.is_none());
    }

    #[test]
    fn out_of_range_bond_is_validation_error() {
        let err = parse_jsonl_str(r#"{"id":"bad","atoms":[6,6,6],"bonds":[[0,5,"single"]]}"#, "x")
            .unwrap_err();
        assert!(matches!(err, Error::Validation { ref id, .. } if id == "bad"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"a\",\"atoms\":[1],\"coords\":[[[0,0,0]]]}\n{not json}\n";
        match parse_jsonl_str(text, "data.jsonl").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn manifest_detects_count_mismatch() {
        let mols =
            parse_jsonl_str(r#"{"id":"m1","atoms":[6,8],"bonds":[[0,1,"double"]]}"#, "x").unwrap();
        let mut manifest = DatasetManifest::describe("x.jsonl", &mols);
        assert_eq!(manifest.modality, Modality::TwoD);
        manifest.verify(&mols).unwrap();
        manifest.count = 2;
        assert!(manifest.verify(&mols).is_err());
    }

    fn arb_molecule() -> impl Strategy<Value = Molecule> {
        (1usize..8, any::<bool>(), any::<bool>(), any::<u64>()).prop_map(
            |(n, with_bonds, with_coords, seed)| {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let with_bonds = with_bonds || !with_coords;
                let bonds = with_bonds.then(|| {
                    (1..n)
                        .map(|j| {
                            Bond::new(rng.random_range(0..j), j, BondType::ALL[rng.random_range(0..4)])
                        })
                        .collect()
                });
                let conformers = with_coords.then(|| {
                    (0..rng.random_range(1..3))
                        .map(|_| {
                            (0..n)
                                .map(|_| [rng.random::<f64>() * 10.0 - 5.0, rng.random(), -rng.random::<f64>()])
                                .collect()
                        })
                        .collect()
                });
                Molecule {
                    id: format!("mol-{seed}"),
                    atomic_numbers: (0..n).map(|_| rng.random_range(1..=100)).collect(),
                    formal_charges: (0..n).map(|_| rng.random_range(-1..=1)).collect(),
                    bonds,
                    conformers,
                    label: rng.random_bool(0.3).then(|| rng.random()),
                }
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn write_then_parse_is_identity(mols in proptest::collection::vec(arb_molecule(), 50)) {
            let text = write_jsonl_string(&mols).unwrap();
            let back = parse_jsonl_str(&text, "roundtrip").unwrap();
            prop_assert_eq!(back, mols);
        }
    }
}
