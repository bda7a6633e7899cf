#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type P = [f64; 3];

pub fn quat_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let s = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / s);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn apply(r: &[[f64; 3]; 3], t: P, pts: &[P]) -> Vec<P> {
    pts.iter()
        .map(|p| std::array::from_fn(|a| (0..3).map(|b| r[a][b] * p[b]).sum::<f64>() + t[a]))
        .collect()
}

pub fn centered(pts: &[P]) -> Vec<P> {
    let n = pts.len() as f64;
    let c: P = std::array::from_fn(|k| pts.iter().map(|p| p[k]).sum::<f64>() / n);
    pts.iter().map(|p| std::array::from_fn(|k| p[k] - c[k])).collect()
}

pub fn rmsd_under(q: [f64; 4], a: &[P], b: &[P]) -> f64 {
    let ra = apply(&quat_matrix(q), [0.0; 3], a);
    (ra.iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / a.len() as f64)
        .sqrt()
}

/// Minimum RMSD over rotations: exhaustive grid over unit quaternions with
/// w ≥ 0, then repeated shrinking local grids around the incumbent.
pub fn quaternion_grid_rmsd(a: &[P], b: &[P]) -> f64 {
    let (a, b) = (centered(a), centered(b));
    let steps = 16;
    let mut best = (f64::INFINITY, [1.0, 0.0, 0.0, 0.0]);
    for iw in 0..=steps {
        for ix in 0..=2 * steps {
            for iy in 0..=2 * steps {
                for iz in 0..=2 * steps {
                    let q = [
                        iw as f64 / steps as f64,
                        ix as f64 / steps as f64 - 1.0,
                        iy as f64 / steps as f64 - 1.0,
                        iz as f64 / steps as f64 - 1.0,
                    ];
                    if q.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let r = rmsd_under(q, &a, &b);
                    if r < best.0 {
                        best = (r, q);
                    }
                }
            }
        }
    }
    let mut h = 1.0 / steps as f64;
    for _ in 0..40 {
        let centre = best.1;
        for dw in -2..=2 {
            for dx in -2..=2 {
                for dy in -2..=2 {
                    for dz in -2..=2 {
                        let d = [dw, dx, dy, dz].map(|v| v as f64 * h / 2.0);
                        let q: [f64; 4] = std::array::from_fn(|k| centre[k] + d[k]);
                        if q.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        let r = rmsd_under(q, &a, &b);
                        if r < best.0 {
                            best = (r, q);
                        }
                    }
                }
            }
        }
        h *= 0.6;
    }
    best.0
}

pub fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<P> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
        .collect()
}
