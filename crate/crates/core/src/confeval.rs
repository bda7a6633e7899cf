//! Conformer-ensemble metrics (coverage, matching, aligned RMSD) and a
//! generation harness driven by the graph-only forward pass.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::featurize;
use crate::model::generate_positions;
use crate::molio::{collate, Conformer, Molecule};
use crate::pretrain::Checkpoint;

/// Refinement rounds of the position head during generation.
pub const GENERATION_ROUNDS: usize = 8;
/// Standard deviation (Å) of the initial coordinate cloud.
pub const INIT_SIGMA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetRole {
    Generated,
    Reference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConformerSet {
    pub molecule_id: String,
    pub atomic_numbers: Vec<u32>,
    pub conformers: Vec<Conformer>,
    pub role: SetRole,
}

impl ConformerSet {
    pub fn from_molecule(m: &Molecule, role: SetRole) -> Result<Self> {
        let conformers = m.conformers.clone().unwrap_or_default();
        if conformers.is_empty() {
            return Err(Error::Modality(format!("record '{}' has no conformers", m.id)));
        }
        Ok(Self {
            molecule_id: m.id.clone(),
            atomic_numbers: m.atomic_numbers.clone(),
            conformers,
            role,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// RMSD threshold (Å) for coverage.
    pub delta: f64,
    /// Restrict RMSD to atoms with Z > 1.
    pub heavy_atoms_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            delta: 0.5,
            heavy_atoms_only: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta {} must be positive", self.delta)));
        }
        Ok(())
    }
}

fn centered(points: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect()
}

fn mean_sq(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / a.len() as f64
}

/// RMSD after centering only (no rotation).
pub fn centered_rmsd(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    check_pair(a, b)?;
    Ok(mean_sq(&centered(a), &centered(b)).sqrt())
}

fn check_pair(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} atoms", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("RMSD of zero atoms".into()));
    }
    Ok(())
}

/// Proper rotation `R` minimizing `Σ‖R a_i − b_i‖²` for centered inputs.
pub fn kabsch_rotation(a: &[[f64; 3]], b: &[[f64; 3]]) -> Matrix3<f64> {
    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        for r in 0..3 {
            for c in 0..3 {
                h[(r, c)] += p[r] * q[c];
            }
        }
    }
    let svd = h.svd(true, true);
    let u: Matrix3<f64> = svd.u.expect("U requested");
    let v_t = svd.v_t.expect("V requested");
    let v: Matrix3<f64> = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let mut fix = Matrix3::identity();
    fix[(2, 2)] = if d == 0.0 { 1.0 } else { d };
    v * fix * u.transpose()
}

/// Minimum RMSD over rigid motions (rotations and translations, no
/// reflections).
pub fn kabsch_rmsd(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    check_pair(a, b)?;
    let (ca, cb) = (centered(a), centered(b));
    let spread: f64 = ca.iter().flatten().map(|v| v * v).sum();
    if spread == 0.0 {
        return Ok(mean_sq(&ca, &cb).sqrt());
    }
    let r = kabsch_rotation(&ca, &cb);
    let rotated: Vec<[f64; 3]> = ca
        .iter()
        .map(|p| {
            let mut o = [0.0; 3];
            for (i, slot) in o.iter_mut().enumerate() {
                *slot = r[(i, 0)] * p[0] + r[(i, 1)] * p[1] + r[(i, 2)] * p[2];
            }
            o
        })
        .collect();
    Ok(mean_sq(&rotated, &cb).sqrt())
}

fn atom_subset(atomic_numbers: &[u32], cfg: &EvalConfig) -> Vec<usize> {
    let heavy: Vec<usize> = (0..atomic_numbers.len())
        .filter(|&i| atomic_numbers[i] > 1)
        .collect();
    if cfg.heavy_atoms_only && !heavy.is_empty() {
        heavy
    } else {
        (0..atomic_numbers.len()).collect()
    }
}

fn rmsd_matrix(sg: &ConformerSet, sr: &ConformerSet, cfg: &EvalConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if sr.conformers.is_empty() {
        return Err(Error::Empty(format!("no reference conformers for '{}'", sr.molecule_id)));
    }
    if sg.conformers.is_empty() {
        return Err(Error::Empty(format!("no generated conformers for '{}'", sg.molecule_id)));
    }
    if sg.atomic_numbers != sr.atomic_numbers {
        return Err(Error::Shape(format!(
            "generated and reference sets for '{}' describe different atoms",
            sr.molecule_id
        )));
    }
    let keep = atom_subset(&sr.atomic_numbers, cfg);
    let pick = |c: &Conformer| keep.iter().map(|&i| c[i]).collect::<Vec<_>>();
    sr.conformers
        .iter()
        .map(|r| {
            let r = pick(r);
            sg.conformers.iter().map(|g| kabsch_rmsd(&r, &pick(g))).collect()
        })
        .collect()
}

/// Fraction of references within `delta` (strictly) of some generated
/// conformer.
pub fn coverage(sg: &ConformerSet, sr: &ConformerSet, cfg: &EvalConfig) -> Result<f64> {
    let m = rmsd_matrix(sg, sr, cfg)?;
    let hit = m.iter().filter(|row| row.iter().any(|&v| v < cfg.delta)).count();
    Ok(hit as f64 / m.len() as f64)
}

/// Mean over references of the best RMSD to any generated conformer.
pub fn matching(sg: &ConformerSet, sr: &ConformerSet, cfg: &EvalConfig) -> Result<f64> {
    let m = rmsd_matrix(sg, sr, cfg)?;
    let total: f64 = m
        .iter()
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .sum();
    Ok(total / m.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoleculeScore {
    pub id: String,
    pub cov: f64,
    pub mat: f64,
    pub n_generated: usize,
    pub n_reference: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cov_mean: f64,
    pub cov_median: f64,
    pub mat_mean: f64,
    pub mat_median: f64,
    pub delta: f64,
    pub per_molecule: Vec<MoleculeScore>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-molecule COV/MAT and their mean and median across molecules.
pub fn evaluate(pairs: &[(ConformerSet, ConformerSet)], cfg: &EvalConfig) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("no molecules to evaluate".into()));
    }
    let per_molecule = pairs
        .iter()
        .map(|(g, r)| {
            Ok(MoleculeScore {
                id: r.molecule_id.clone(),
                cov: coverage(g, r, cfg)?,
                mat: matching(g, r, cfg)?,
                n_generated: g.conformers.len(),
                n_reference: r.conformers.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let covs: Vec<f64> = per_molecule.iter().map(|s| s.cov).collect();
    let mats: Vec<f64> = per_molecule.iter().map(|s| s.mat).collect();
    let n = covs.len() as f64;
    Ok(EvalReport {
        cov_mean: covs.iter().sum::<f64>() / n,
        cov_median: median(&covs),
        mat_mean: mats.iter().sum::<f64>() / n,
        mat_median: median(&mats),
        delta: cfg.delta,
        per_molecule,
    })
}

/// Pairs generated and reference records by id (reference order).
pub fn pair_by_id(generated: &[Molecule], reference: &[Molecule]) -> Result<Vec<(ConformerSet, ConformerSet)>> {
    let by_id: BTreeMap<&str, &Molecule> = generated.iter().map(|m| (m.id.as_str(), m)).collect();
    reference
        .iter()
        .map(|r| {
            let g = by_id.get(r.id.as_str()).ok_or_else(|| {
                Error::validation(&r.id, "no generated conformers for this reference record")
            })?;
            Ok((
                ConformerSet::from_molecule(g, SetRole::Generated)?,
                ConformerSet::from_molecule(r, SetRole::Reference)?,
            ))
        })
        .collect()
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>9} {:>6} {:>6}", "molecule", "COV(%)", "MAT(Å)", "gen", "ref");
        for m in &self.per_molecule {
            let _ = writeln!(
                s,
                "{:<24} {:>8.2} {:>9.4} {:>6} {:>6}",
                m.id,
                100.0 * m.cov,
                m.mat,
                m.n_generated,
                m.n_reference
            );
        }
        let _ = writeln!(s, "{:<24} {:>8.2} {:>9.4}", "mean", 100.0 * self.cov_mean, self.mat_mean);
        let _ = writeln!(s, "{:<24} {:>8.2} {:>9.4}", "median", 100.0 * self.cov_median, self.mat_median);
        let _ = writeln!(s, "delta = {} Å", self.delta);
        s
    }
}

/// `count` conformers for a molecule's graph. Sample `s` starts from a
/// Gaussian cloud drawn with seed `seed + s`.
pub fn generate_conformers(mol: &Molecule, ckpt: &Checkpoint, count: usize, seed: u64) -> Result<ConformerSet> {
    if !mol.has_2d() {
        return Err(Error::Modality(format!("record '{}' has no bond graph", mol.id)));
    }
    let graph_only = mol.without_3d();
    let feats = featurize(&graph_only, &ckpt.config.features, 0)?;
    let batch = collate(std::slice::from_ref(&feats))?;
    let rec = &batch.records[0];
    let bound = ckpt.params.bind_with(|_| false);
    let n = mol.n_atoms();
    let mut conformers = Vec::with_capacity(count);
    for s in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64));
        let init: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let v: [f64; 3] = std::array::from_fn(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    INIT_SIGMA * z
                });
                v
            })
            .collect();
        conformers.push(generate_positions(&bound, rec, &init, GENERATION_ROUNDS, &ckpt.config)?);
    }
    Ok(ConformerSet {
        molecule_id: mol.id.clone(),
        atomic_numbers: mol.atomic_numbers.clone(),
        conformers,
        role: SetRole::Generated,
    })
}

impl ConformerSet {
    pub fn to_molecule(&self, template: &Molecule) -> Molecule {
        Molecule {
            conformers: Some(self.conformers.clone()),
            ..template.clone()
        }
    }
}
