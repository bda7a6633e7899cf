//! Seeded toy molecules: saturated trees of C, N and O with explicit
//! hydrogens, single bonds throughout, and one conformer grown from
//! standard bond lengths.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::molio::{Bond, BondType, Molecule};

const HEAVY: [u32; 3] = [6, 7, 8];

fn valence(z: u32) -> usize {
    match z {
        6 => 4,
        7 => 3,
        8 => 2,
        _ => 1,
    }
}

fn bond_length(a: u32, b: u32) -> f64 {
    let (a, b) = (a.min(b), a.max(b));
    match (a, b) {
        (1, 6) => 1.09,
        (1, 7) => 1.01,
        (1, 8) => 0.96,
        (6, 6) => 1.54,
        (6, 7) => 1.47,
        (6, 8) => 1.43,
        (7, 7) => 1.45,
        (7, 8) => 1.40,
        (8, 8) => 1.48,
        _ => 1.0,
    }
}

fn place(rng: &mut ChaCha8Rng, coords: &[[f64; 3]], anchor: [f64; 3], len: f64) -> [f64; 3] {
    let mut best = anchor;
    let mut best_gap = f64::NEG_INFINITY;
    for _ in 0..64 {
        let dir: [f64; 3] = UnitSphere.sample(rng);
        let p = [anchor[0] + len * dir[0], anchor[1] + len * dir[1], anchor[2] + len * dir[2]];
        let gap = coords
            .iter()
            .filter(|c| **c != anchor)
            .map(|c| ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2) + (c[2] - p[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        if gap > best_gap {
            best_gap = gap;
            best = p;
        }
        if gap > 1.6 {
            break;
        }
    }
    best
}

fn one(rng: &mut ChaCha8Rng, heavy: usize, id: String) -> Molecule {
    let mut z: Vec<u32> = Vec::new();
    let mut bonds = Vec::new();
    let mut free: Vec<usize> = Vec::new();
    let mut parent: Vec<Option<usize>> = Vec::new();
    for k in 0..heavy {
        let atom = HEAVY[rng.random_range(0..HEAVY.len())];
        let open: Vec<usize> = (0..k).filter(|&i| free[i] > 0).collect();
        if k > 0 && open.is_empty() {
            break;
        }
        z.push(atom);
        free.push(valence(atom));
        if k == 0 {
            parent.push(None);
        } else {
            let p = open[rng.random_range(0..open.len())];
            free[p] -= 1;
            free[k] -= 1;
            bonds.push(Bond::new(p, k, BondType::Single));
            parent.push(Some(p));
        }
    }
    let heavy = z.len();
    for i in 0..heavy {
        for _ in 0..free[i] {
            let h = z.len();
            z.push(1);
            bonds.push(Bond::new(i, h, BondType::Single));
            parent.push(Some(i));
        }
    }
    let mut coords: Vec<[f64; 3]> = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let c = match parent[i] {
            None => [0.0; 3],
            Some(p) => place(rng, &coords, coords[p], bond_length(z[p], z[i])),
        };
        coords.push(c);
    }
    let n = z.len();
    Molecule {
        id,
        label: Some(heavy as f64),
        formal_charges: vec![0; n],
        atomic_numbers: z,
        bonds: Some(bonds),
        conformers: Some(vec![coords]),
    }
}

fn formula(m: &Molecule) -> [usize; 4] {
    let mut f = [0; 4];
    for &z in &m.atomic_numbers {
        let slot = match z {
            1 => 0,
            6 => 1,
            7 => 2,
            _ => 3,
        };
        f[slot] += 1;
    }
    f
}

/// `count` paired molecules with 1 to 5 heavy atoms and pairwise distinct
/// molecular formulas (distinct heavy-atom degree sequences once formulas
/// run out).
pub fn toy_molecules(count: usize, seed: u64) -> Vec<Molecule> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        let heavy = rng.random_range(1..=5);
        let m = one(&mut rng, heavy, format!("toy{}", out.len()));
        let key = if attempts < 200 * count.max(1) {
            (formula(&m), Vec::new())
        } else {
            let mut deg = vec![0usize; m.n_atoms()];
            for b in m.bonds.as_ref().unwrap() {
                deg[b.i] += 1;
                deg[b.j] += 1;
            }
            let mut d: Vec<(u32, usize)> = m.atomic_numbers.iter().copied().zip(deg).collect();
            d.sort_unstable();
            (formula(&m), d.into_iter().map(|(z, d)| z as usize * 16 + d).collect())
        };
        if seen.insert(key) {
            out.push(m);
        }
        if attempts > 100_000 * count.max(1) {
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toys_are_valid_paired_and_distinct() {
        let mols = toy_molecules(32, 0);
        assert_eq!(mols.len(), 32);
        let mut formulas = HashSet::new();
        for m in &mols {
            m.validate().unwrap();
            assert!(m.has_2d() && m.has_3d());
            formulas.insert(formula(m));
            let mut deg = vec![0; m.n_atoms()];
            for b in m.bonds.as_ref().unwrap() {
                deg[b.i] += 1;
                deg[b.j] += 1;
            }
            for (z, d) in m.atomic_numbers.iter().zip(&deg) {
                assert_eq!(*d, valence(*z), "{}", m.id);
            }
            let c = &m.conformers.as_ref().unwrap()[0];
            for b in m.bonds.as_ref().unwrap() {
                let d = crate::featurize::euclidean(&c[b.i], &c[b.j]);
                let want = bond_length(m.atomic_numbers[b.i], m.atomic_numbers[b.j]);
                assert!((d - want).abs() < 1e-9);
            }
        }
        assert_eq!(formulas.len(), 32);
        assert_eq!(toy_molecules(32, 0), mols);
    }
}
