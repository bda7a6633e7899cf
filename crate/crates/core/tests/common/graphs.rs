#![allow(dead_code)]

use flexmol::molio::{Bond, BondType};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_graph(rng: &mut ChaCha8Rng, max_n: usize) -> (usize, Vec<Bond>) {
    let n = rng.random_range(1..=max_n);
    let p: f64 = rng.random_range(0.05..0.6);
    let mut bonds = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                let kind = BondType::ALL[rng.random_range(0..BondType::ALL.len())];
                if rng.random::<bool>() {
                    bonds.push(Bond::new(i, j, kind));
                } else {
                    bonds.push(Bond::new(j, i, kind));
                }
            }
        }
    }
    (n, bonds)
}

pub fn floyd_warshall(n: usize, bonds: &[Bond]) -> Vec<Option<usize>> {
    let inf = usize::MAX / 4;
    let mut d = vec![inf; n * n];
    for i in 0..n {
        d[i * n + i] = 0;
    }
    for b in bonds {
        d[b.i * n + b.j] = 1;
        d[b.j * n + b.i] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i * n + k] + d[k * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    d.into_iter().map(|v| (v < inf).then_some(v)).collect()
}
