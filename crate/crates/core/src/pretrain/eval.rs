use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_corruption, featurize_all, masked_rows, TrainConfig};
use crate::error::Result;
use crate::losses::pool;
use crate::model::{forward_stage1_rows, ModelConfig, ParamStore};
use crate::molio::{collate, Molecule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Metrics {
    /// Argmax of the summed stream logits at corrupted positions.
    pub masked_atom_accuracy: f64,
    /// Argmax SPD class over real off-diagonal pairs.
    pub spd_accuracy: f64,
    /// Fraction of molecules whose pooled 2D encoding is closest to their own
    /// pooled 3D encoding within the batch.
    pub retrieval_accuracy: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One seeded corruption pass over `data` (first conformer, data order).
pub fn evaluate_stage1(
    params: &ParamStore,
    model_cfg: &ModelConfig,
    data: &[Molecule],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Stage1Metrics> {
    let bank = featurize_all(data, model_cfg, None)?;
    let bound = params.bind_with(|_| false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut atom_hits, mut atom_total) = (0usize, 0usize);
    let (mut spd_hits, mut spd_total) = (0usize, 0usize);
    let (mut ret_hits, mut ret_total) = (0usize, 0usize);
    let feats: Vec<_> = bank.iter().map(|f| f[0].clone()).collect();
    for chunk in feats.chunks(cfg.batch_size) {
        let batch = collate(chunk)?;
        let (batch, _, targets) = apply_corruption(&batch, cfg, &mut rng)?;
        let mut xp = Vec::new();
        let mut yp = Vec::new();
        for (rec, t) in batch.records.iter().zip(&targets) {
            let out = forward_stage1_rows(&bound, rec, model_cfg, Some(&masked_rows(t)))?;
            let logits = out.atom_logits_x.add(&out.atom_logits_y);
            let v = logits.value();
            let width = v.cols();
            for (k, &i) in out.atom_rows.iter().enumerate() {
                atom_total += 1;
                atom_hits += usize::from(argmax(&v.data()[k * width..(k + 1) * width]) == t.atoms[i]);
            }
            let s = out.spd_logits.value();
            let classes = s.cols();
            let spd = t.spd.as_ref().expect("paired record");
            for (k, &flag) in t.spd_pairs.iter().enumerate() {
                if flag {
                    spd_total += 1;
                    spd_hits += usize::from(argmax(&s.data()[k * classes..(k + 1) * classes]) == spd[k]);
                }
            }
            xp.push(pool(&out.x_f, &out.masks.atom_mask)?.value().data().to_vec());
            yp.push(pool(&out.y_f, &out.masks.atom_mask)?.value().data().to_vec());
        }
        for (i, x) in xp.iter().enumerate() {
            let sims: Vec<f64> = yp
                .iter()
                .map(|y| x.iter().zip(y).map(|(a, b)| a * b).sum())
                .collect();
            ret_total += 1;
            ret_hits += usize::from(argmax(&sims) == i);
        }
    }
    let frac = |h: usize, t: usize| if t == 0 { 0.0 } else { h as f64 / t as f64 };
    Ok(Stage1Metrics {
        masked_atom_accuracy: frac(atom_hits, atom_total),
        spd_accuracy: frac(spd_hits, spd_total),
        retrieval_accuracy: frac(ret_hits, ret_total),
    })
}
