use crate::error::{Error, Result};
use crate::featurize::{compute_distances, FeaturizedMolecule};

/// Additive attention bias for any pair that involves a padded atom. Large
/// enough that `exp` underflows to exactly zero after softmax.
pub const PAD_BIAS: f64 = -1e9;

/// One featurized molecule padded to the batch width `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedRecord {
    pub id: String,
    pub n_real: usize,
    pub n: usize,
    pub atomic_numbers: Vec<u32>,
    /// Length `n`; padded slots hold token 0 and are masked everywhere.
    pub tokens: Vec<usize>,
    pub atom_mask: Vec<bool>,
    /// Row-major `n×n`: 0 between real atoms, [`PAD_BIAS`] otherwise.
    pub pair_bias: Vec<f64>,
    pub pair_class: Vec<usize>,
    pub graph: Option<PaddedGraph>,
    pub geometry: Option<PaddedGeometry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PaddedGraph {
    pub degree_index: Vec<usize>,
    pub spd: Vec<usize>,
    /// `n²×(max_path_len·edge_feat_dim)`, row-major.
    pub edge_path: Vec<f64>,
    pub path_len: Vec<usize>,
    pub path_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PaddedGeometry {
    /// Length `n`; padded rows are zero.
    pub coords: Vec<[f64; 3]>,
    /// Row-major `n×n`; zero on pairs involving padding.
    pub dist: Vec<f64>,
}

impl PaddedRecord {
    pub fn has_2d(&self) -> bool {
        self.graph.is_some()
    }

    pub fn has_3d(&self) -> bool {
        self.geometry.is_some()
    }

    pub fn pair_is_real(&self, i: usize, j: usize) -> bool {
        self.atom_mask[i] && self.atom_mask[j]
    }

    /// Replaces the real-atom coordinates and recomputes distances.
    pub fn set_coords(&mut self, real: &[[f64; 3]]) -> Result<()> {
        if real.len() != self.n_real {
            return Err(Error::Shape(format!(
                "{} coordinates for {} atoms",
                real.len(),
                self.n_real
            )));
        }
        let f = compute_distances(real)?;
        let mut coords = vec![[0.0; 3]; self.n];
        coords[..self.n_real].copy_from_slice(real);
        let mut dist = vec![0.0; self.n * self.n];
        for i in 0..self.n_real {
            for j in 0..self.n_real {
                dist[i * self.n + j] = f.dist[i * self.n_real + j];
            }
        }
        self.geometry = Some(PaddedGeometry { coords, dist });
        Ok(())
    }

    pub fn real_coords(&self) -> Option<&[[f64; 3]]> {
        self.geometry.as_ref().map(|g| &g.coords[..self.n_real])
    }

    pub fn strip_3d(&mut self) {
        self.geometry = None;
    }

    /// Drops the 2D modality; distance-kernel pair classes fall back to
    /// "not bonded", as for any molecule without a graph.
    pub fn strip_2d(&mut self) {
        self.graph = None;
        self.pair_class.iter_mut().for_each(|c| *c = 0);
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub records: Vec<PaddedRecord>,
    /// `B×n_max`, true for real atoms.
    pub atom_mask: Vec<Vec<bool>>,
    pub pad_to: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn pad(rec: &FeaturizedMolecule, n: usize) -> PaddedRecord {
    let m = rec.n_atoms();
    let mut tokens = vec![0; n];
    tokens[..m].copy_from_slice(&rec.tokens);
    let atom_mask: Vec<bool> = (0..n).map(|i| i < m).collect();
    let mut pair_bias = vec![PAD_BIAS; n * n];
    let mut pair_class = vec![0; n * n];
    for i in 0..m {
        for j in 0..m {
            pair_bias[i * n + j] = 0.0;
            pair_class[i * n + j] = rec.pair_class[i * m + j];
        }
    }
    let graph = rec.f2d.as_ref().map(|f| {
        let width = rec.max_path_len * rec.edge_feat_dim;
        let mut degree_index = vec![0; n];
        degree_index[..m].copy_from_slice(&f.degree_index);
        let mut spd = vec![0; n * n];
        let mut path_len = vec![0; n * n];
        let mut edge_path = vec![0.0; n * n * width];
        for i in 0..m {
            for j in 0..m {
                spd[i * n + j] = f.spd[i * m + j];
                path_len[i * n + j] = f.path_len[i * m + j];
                let src = &f.edge_path[(i * m + j) * width..(i * m + j + 1) * width];
                edge_path[(i * n + j) * width..(i * n + j + 1) * width].copy_from_slice(src);
            }
        }
        PaddedGraph {
            degree_index,
            spd,
            edge_path,
            path_len,
            path_width: width,
        }
    });
    let geometry = rec.coords.as_ref().map(|c| {
        let mut coords = vec![[0.0; 3]; n];
        coords[..m].copy_from_slice(c);
        let f3d = rec.f3d.as_ref().expect("coords imply distances");
        let mut dist = vec![0.0; n * n];
        for i in 0..m {
            for j in 0..m {
                dist[i * n + j] = f3d.dist[i * m + j];
            }
        }
        PaddedGeometry { coords, dist }
    });
    PaddedRecord {
        id: rec.id.clone(),
        n_real: m,
        n,
        atomic_numbers: rec.atomic_numbers.clone(),
        tokens,
        atom_mask,
        pair_bias,
        pair_class,
        graph,
        geometry,
    }
}

/// Pads featurized records to the largest atom count in the batch.
pub fn collate(records: &[FeaturizedMolecule]) -> Result<Batch> {
    collate_to(records, 0)
}

/// As [`collate`], padding to at least `min_width` atoms.
pub fn collate_to(records: &[FeaturizedMolecule], min_width: usize) -> Result<Batch> {
    let first = records
        .first()
        .ok_or_else(|| Error::Empty("cannot collate an empty batch".into()))?;
    if let Some(other) = records.iter().find(|r| r.config_hash != first.config_hash) {
        return Err(Error::Config(format!(
            "records '{}' and '{}' were featurized with different configurations",
            first.id, other.id
        )));
    }
    let pad_to = records
        .iter()
        .map(FeaturizedMolecule::n_atoms)
        .max()
        .unwrap_or(0)
        .max(min_width);
    let padded: Vec<_> = records.iter().map(|r| pad(r, pad_to)).collect();
    Ok(Batch {
        atom_mask: padded.iter().map(|r| r.atom_mask.clone()).collect(),
        records: padded,
        pad_to,
    })
}
