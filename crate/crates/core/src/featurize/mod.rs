//! Parameter-free structural tensors: degrees, shortest-path distances and
//! edge paths for the bond graph, pairwise distances for conformers.

mod cache;
pub mod vocab;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::FeatureCache;

use crate::error::{Error, Result};
use crate::molio::{Bond, BondType, Conformer, Molecule};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub max_degree: usize,
    pub max_hop: usize,
    pub max_path_len: usize,
    /// One-hot width of an edge feature: bond types plus a no-bond slot.
    pub edge_feat_dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            max_degree: 8,
            max_hop: 100,
            max_path_len: 16,
            edge_feat_dim: BondType::ALL.len() + 1,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_degree == 0 || self.max_hop == 0 || self.max_path_len == 0 {
            return Err(Error::Config("feature limits must be positive".into()));
        }
        if self.max_path_len > self.max_hop {
            return Err(Error::Config(format!(
                "max_path_len {} exceeds max_hop {}",
                self.max_path_len, self.max_hop
            )));
        }
        if self.edge_feat_dim < BondType::ALL.len() {
            return Err(Error::Config(format!(
                "edge_feat_dim {} cannot hold {} bond types",
                self.edge_feat_dim,
                BondType::ALL.len()
            )));
        }
        Ok(())
    }

    /// SPD bucket for disconnected pairs.
    pub fn unreachable(&self) -> usize {
        self.max_hop + 1
    }

    /// Number of SPD classes, including the unreachable bucket.
    pub fn spd_buckets(&self) -> usize {
        self.max_hop + 2
    }

    /// Stable content hash (hex SHA-256 of the JSON encoding).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("feature config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralFeatures2D {
    pub n: usize,
    pub degree_index: Vec<usize>,
    /// Row-major `n×n`, clamped to `max_hop`, unreachable = `max_hop + 1`.
    pub spd: Vec<usize>,
    /// Row-major `n×n×max_path_len×edge_feat_dim`.
    pub edge_path: Vec<f64>,
    /// Row-major `n×n`; 0 for unreachable pairs and the diagonal.
    pub path_len: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralFeatures3D {
    pub n: usize,
    /// Row-major `n×n` Euclidean distances in Å.
    pub dist: Vec<f64>,
}

fn adjacency(n: usize, bonds: &[Bond]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for b in bonds {
        adj[b.i].push(b.j);
        adj[b.j].push(b.i);
    }
    for row in &mut adj {
        row.sort_unstable();
        row.dedup();
    }
    adj
}

/// Unclamped hop counts from every source, `None` when unreachable.
fn hop_counts(adj: &[Vec<usize>]) -> Vec<Option<usize>> {
    let n = adj.len();
    let mut out = vec![None; n * n];
    let mut queue = VecDeque::new();
    for src in 0..n {
        let row = &mut out[src * n..(src + 1) * n];
        row[src] = Some(0);
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let du = row[u].unwrap();
            for &v in &adj[u] {
                if row[v].is_none() {
                    row[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
    }
    out
}

/// All-pairs unweighted shortest-path lengths by breadth-first search.
pub fn compute_spd(n: usize, bonds: &[Bond], cfg: &FeatureConfig) -> Vec<usize> {
    hop_counts(&adjacency(n, bonds))
        .into_iter()
        .map(|d| d.map_or(cfg.unreachable(), |d| d.min(cfg.max_hop)))
        .collect()
}

/// Edge-feature sequence along one shortest path per pair, truncated to
/// `max_path_len`. Ties resolve to the lexicographically smallest atom
/// sequence starting from the source.
pub fn compute_edge_paths(
    n: usize,
    bonds: &[Bond],
    cfg: &FeatureConfig,
) -> (Vec<f64>, Vec<usize>) {
    let adj = adjacency(n, bonds);
    let hops = hop_counts(&adj);
    let mut kind = vec![None; n * n];
    for b in bonds {
        kind[b.i * n + b.j] = Some(b.kind);
        kind[b.j * n + b.i] = Some(b.kind);
    }
    let (lmax, e) = (cfg.max_path_len, cfg.edge_feat_dim);
    let mut edge_path = vec![0.0; n * n * lmax * e];
    let mut path_len = vec![0; n * n];
    for i in 0..n {
        for j in 0..n {
            let Some(total) = hops[i * n + j] else { continue };
            if total == 0 {
                continue;
            }
            let len = total.min(lmax);
            path_len[i * n + j] = len;
            let mut cur = i;
            for step in 0..len {
                let remaining = hops[cur * n + j].unwrap();
                let next = *adj[cur]
                    .iter()
                    .find(|&&v| hops[v * n + j] == Some(remaining - 1))
                    .expect("a neighbour one hop closer exists on a shortest path");
                let bond = kind[cur * n + next].unwrap();
                edge_path[((i * n + j) * lmax + step) * e + bond.index()] = 1.0;
                cur = next;
            }
        }
    }
    (edge_path, path_len)
}

pub fn compute_degrees(n: usize, bonds: &[Bond], cfg: &FeatureConfig) -> Vec<usize> {
    let mut deg = vec![0usize; n];
    for b in bonds {
        deg[b.i] += 1;
        deg[b.j] += 1;
    }
    deg.into_iter().map(|d| d.min(cfg.max_degree)).collect()
}

pub fn compute_distances(coords: &[[f64; 3]]) -> Result<StructuralFeatures3D> {
    if coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Shape("non-finite coordinate".into()));
    }
    let n = coords.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(&coords[i], &coords[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    Ok(StructuralFeatures3D { n, dist })
}

pub(crate) fn euclidean(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn compute_2d(n: usize, bonds: &[Bond], cfg: &FeatureConfig) -> StructuralFeatures2D {
    let (edge_path, path_len) = compute_edge_paths(n, bonds, cfg);
    StructuralFeatures2D {
        n,
        degree_index: compute_degrees(n, bonds, cfg),
        spd: compute_spd(n, bonds, cfg),
        edge_path,
        path_len,
    }
}

/// Number of pair classes for the distance kernel affine: no bond plus one
/// per bond type.
pub const PAIR_CLASSES: usize = BondType::ALL.len() + 1;

/// Row-major `n×n` pair class: 0 = not bonded (or no graph), 1 + bond type.
pub fn pair_classes(n: usize, bonds: Option<&[Bond]>) -> Vec<usize> {
    let mut out = vec![0; n * n];
    for b in bonds.unwrap_or(&[]) {
        out[b.i * n + b.j] = 1 + b.kind.index();
        out[b.j * n + b.i] = 1 + b.kind.index();
    }
    out
}

/// Everything the model needs about one molecule, before padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturizedMolecule {
    pub id: String,
    pub config_hash: String,
    pub edge_feat_dim: usize,
    pub max_path_len: usize,
    pub atomic_numbers: Vec<u32>,
    pub tokens: Vec<usize>,
    pub f2d: Option<StructuralFeatures2D>,
    pub coords: Option<Conformer>,
    pub f3d: Option<StructuralFeatures3D>,
    pub pair_class: Vec<usize>,
    /// Index of the conformer that produced `coords`.
    pub conformer_index: Option<usize>,
}

impl FeaturizedMolecule {
    pub fn n_atoms(&self) -> usize {
        self.tokens.len()
    }
}

/// Featurizes `mol` using conformer `conformer` (when the molecule has 3D).
pub fn featurize(mol: &Molecule, cfg: &FeatureConfig, conformer: usize) -> Result<FeaturizedMolecule> {
    cfg.validate()?;
    mol.validate()?;
    let n = mol.n_atoms();
    let tokens = mol
        .atomic_numbers
        .iter()
        .zip(&mol.formal_charges)
        .map(|(&z, &c)| {
            vocab::token(z, c).ok_or_else(|| {
                Error::validation(&mol.id, format!("atom (Z={z}, charge={c}) is outside the vocabulary"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let f2d = mol.bonds.as_deref().map(|b| compute_2d(n, b, cfg));
    let (coords, f3d, conformer_index) = match mol.conformers.as_deref() {
        Some(confs) if !confs.is_empty() => {
            let k = conformer.min(confs.len() - 1);
            let c = confs[k].clone();
            let f = compute_distances(&c)?;
            (Some(c), Some(f), Some(k))
        }
        _ => (None, None, None),
    };
    Ok(FeaturizedMolecule {
        id: mol.id.clone(),
        config_hash: cfg.hash(),
        edge_feat_dim: cfg.edge_feat_dim,
        max_path_len: cfg.max_path_len,
        atomic_numbers: mol.atomic_numbers.clone(),
        tokens,
        f2d,
        coords,
        f3d,
        pair_class: pair_classes(n, mol.bonds.as_deref()),
        conformer_index,
    })
}
