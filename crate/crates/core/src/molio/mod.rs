//! Molecule data model, JSONL/SDF ingestion, splitting and batch collation.

mod batch;
pub mod elements;
mod jsonl;
mod sdf;
mod split;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use batch::{collate, collate_to, Batch, PaddedGeometry, PaddedGraph, PaddedRecord, PAD_BIAS};
pub use jsonl::{parse_jsonl, parse_jsonl_str, write_jsonl, write_jsonl_string, DatasetManifest};
pub use sdf::{parse_sdf_v2000, parse_sdf_v2000_str};
pub use split::random_split;

use crate::error::{Error, Result};

/// Coordinates of one conformer, one row per atom, in Å.
pub type Conformer = Vec<[f64; 3]>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BondType {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondType {
    pub const ALL: [BondType; 4] = [
        BondType::Single,
        BondType::Double,
        BondType::Triple,
        BondType::Aromatic,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// V2000 bond-type code (1..=4).
    pub fn from_v2000(code: u32) -> Option<BondType> {
        match code {
            1 => Some(BondType::Single),
            2 => Some(BondType::Double),
            3 => Some(BondType::Triple),
            4 => Some(BondType::Aromatic),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub kind: BondType,
}

impl Bond {
    pub fn new(i: usize, j: usize, kind: BondType) -> Self {
        Self { i, j, kind }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Paired,
    #[serde(rename = "2d_only")]
    TwoD,
    #[serde(rename = "3d_only")]
    ThreeD,
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Molecule {
    pub id: String,
    pub atomic_numbers: Vec<u32>,
    pub formal_charges: Vec<i32>,
    pub bonds: Option<Vec<Bond>>,
    pub conformers: Option<Vec<Conformer>>,
    /// Optional scalar property, used only by fine-tuning.
    pub label: Option<f64>,
}

impl Molecule {
    pub fn n_atoms(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn has_2d(&self) -> bool {
        self.bonds.is_some()
    }

    pub fn has_3d(&self) -> bool {
        self.conformers.as_ref().is_some_and(|c| !c.is_empty())
    }

    pub fn modality(&self) -> Modality {
        match (self.has_2d(), self.has_3d()) {
            (true, true) => Modality::Paired,
            (true, false) => Modality::TwoD,
            (false, true) => Modality::ThreeD,
            (false, false) => Modality::Mixed,
        }
    }

    /// Copy with only the 2D graph.
    pub fn without_3d(&self) -> Molecule {
        Molecule {
            conformers: None,
            ..self.clone()
        }
    }

    /// Copy with only the 3D conformers.
    pub fn without_2d(&self) -> Molecule {
        Molecule {
            bonds: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_atoms();
        let id = self.id.as_str();
        if n == 0 {
            return Err(Error::validation(id, "molecule has no atoms"));
        }
        if self.formal_charges.len() != n {
            return Err(Error::validation(
                id,
                format!("{} charges for {n} atoms", self.formal_charges.len()),
            ));
        }
        if let Some(&z) = self
            .atomic_numbers
            .iter()
            .find(|&&z| z == 0 || z > elements::MAX_ATOMIC_NUMBER)
        {
            return Err(Error::validation(id, format!("invalid atomic number {z}")));
        }
        if self.bonds.is_none() && self.conformers.is_none() {
            return Err(Error::validation(id, "neither bonds nor coordinates present"));
        }
        if let Some(bonds) = &self.bonds {
            let mut seen = HashSet::new();
            for b in bonds {
                if b.i >= n || b.j >= n {
                    return Err(Error::validation(
                        id,
                        format!("bond ({}, {}) out of range for {n} atoms", b.i, b.j),
                    ));
                }
                if b.i == b.j {
                    return Err(Error::validation(id, format!("self-bond on atom {}", b.i)));
                }
                if !seen.insert((b.i.min(b.j), b.i.max(b.j))) {
                    return Err(Error::validation(
                        id,
                        format!("duplicate bond ({}, {})", b.i, b.j),
                    ));
                }
            }
        }
        if let Some(confs) = &self.conformers {
            for (k, c) in confs.iter().enumerate() {
                if c.len() != n {
                    return Err(Error::validation(
                        id,
                        format!("conformer {k} has {} rows for {n} atoms", c.len()),
                    ));
                }
                if c.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::validation(
                        id,
                        format!("conformer {k} has non-finite coordinates"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Modality shared by every record, or `Mixed`.
pub fn dataset_modality(molecules: &[Molecule]) -> Modality {
    let mut kinds = molecules.iter().map(Molecule::modality);
    match kinds.next() {
        None => Modality::Mixed,
        Some(first) => {
            if kinds.all(|k| k == first) {
                first
            } else {
                Modality::Mixed
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn water() -> Molecule {
        Molecule {
            id: "w".into(),
            atomic_numbers: vec![8, 1, 1],
            formal_charges: vec![0; 3],
            bonds: Some(vec![
                Bond::new(0, 1, BondType::Single),
                Bond::new(0, 2, BondType::Single),
            ]),
            conformers: None,
            label: None,
        }
    }

    #[test]
    fn valid_molecule_passes() {
        water().validate().unwrap();
        assert_eq!(water().modality(), Modality::TwoD);
    }

    #[test]
    fn rejects_duplicate_unordered_bond() {
        let mut m = water();
        m.bonds.as_mut().unwrap().push(Bond::new(1, 0, BondType::Double));
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
        assert!(err.contains("'w'"), "{err}");
    }

    #[test]
    fn rejects_self_bond_and_short_conformer() {
        let mut m = water();
        m.bonds = Some(vec![Bond::new(1, 1, BondType::Single)]);
        assert!(m.validate().is_err());
        let mut m = water();
        m.conformers = Some(vec![vec![[0.0; 3]; 2]]);
        assert!(m.validate().is_err());
    }

    #[test]
    fn requires_some_modality() {
        let mut m = water();
        m.bonds = None;
        assert!(m.validate().is_err());
    }
}
