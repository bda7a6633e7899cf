#![allow(dead_code)]

pub mod graphs;
pub mod invariance;
pub mod rmsd;

use flexmol::autograd::Var;
use flexmol::featurize::compute_distances;
use flexmol::molio::{Bond, Molecule, PaddedRecord};
use rand::Rng;

pub type Mat3 = [[f64; 3]; 3];

pub fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let s = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / s);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn random_translation(rng: &mut impl Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(-10.0..10.0))
}

pub fn transform(r: &Mat3, t: [f64; 3], p: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| (0..3).map(|b| r[a][b] * p[b]).sum::<f64>() + t[a])
}

/// Applies a rigid motion to the real atoms of a padded record and recomputes
/// its distance matrix.
pub fn move_record(rec: &PaddedRecord, r: &Mat3, t: [f64; 3]) -> PaddedRecord {
    let mut out = rec.clone();
    let g = out.geometry.as_mut().expect("record has coordinates");
    let real = rec.n_real;
    for c in g.coords.iter_mut().take(real) {
        *c = transform(r, t, *c);
    }
    let d = compute_distances(&g.coords[..real]).unwrap().dist;
    for i in 0..real {
        for j in 0..real {
            g.dist[i * rec.n + j] = d[i * real + j];
        }
    }
    out
}

/// Relabels atoms so that new atom `i` is old atom `perm[i]`.
pub fn permute_molecule(m: &Molecule, perm: &[usize]) -> Molecule {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    Molecule {
        id: m.id.clone(),
        label: m.label,
        atomic_numbers: perm.iter().map(|&i| m.atomic_numbers[i]).collect(),
        formal_charges: perm.iter().map(|&i| m.formal_charges[i]).collect(),
        bonds: m
            .bonds
            .as_ref()
            .map(|b| b.iter().map(|b| Bond::new(inv[b.i], inv[b.j], b.kind)).collect()),
        conformers: m
            .conformers
            .as_ref()
            .map(|cs| cs.iter().map(|c| perm.iter().map(|&i| c[i]).collect()).collect()),
    }
}

pub fn random_permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

pub fn rows(v: &Var) -> Vec<Vec<f64>> {
    let t = v.value();
    let c = t.cols();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// `max|a - b| / max(max|a|, tiny)`.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    max_abs_diff(a, b) / max_abs(a).max(1e-300)
}
