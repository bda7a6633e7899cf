use rand::seq::index;
use rand::Rng;

use super::{RandomTokens, TrainConfig};
use crate::error::Result;
use crate::featurize::vocab;
use crate::losses::Targets;
use crate::molio::Batch;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Random(usize),
    Keep,
}

/// Corruption applied to one record.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordPlan {
    /// Selected real-atom indices, ascending.
    pub masked: Vec<usize>,
    pub replacement: Vec<Replacement>,
    /// Atoms whose coordinates were perturbed (the selected atoms when the
    /// record has coordinates, otherwise empty).
    pub noised: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionPlan {
    pub records: Vec<RecordPlan>,
}

/// Number of atoms selected from `n` real atoms.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Masks a fraction of real atoms (80% MASK token, 10% random atom, 10%
/// unchanged) and perturbs the same atoms' coordinates uniformly.
pub fn apply_corruption(
    batch: &Batch,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(Batch, CorruptionPlan, Vec<Targets>)> {
    let mut out = batch.clone();
    let mut plans = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let pool: Vec<usize> = match cfg.random_tokens {
        RandomTokens::Vocabulary => (0..vocab::ATOM_TOKENS).collect(),
        RandomTokens::Batch => batch
            .records
            .iter()
            .flat_map(|r| r.tokens[..r.n_real].iter().copied())
            .collect(),
    };
    for rec in &mut out.records {
        let n = rec.n;
        let real = rec.n_real;
        let mut masked = index::sample(rng, real, masked_count(real, cfg.mask_ratio)).into_vec();
        masked.sort_unstable();
        let original = rec.tokens.clone();
        let mut replacement = Vec::with_capacity(masked.len());
        for &i in &masked {
            let r: f64 = rng.random();
            let choice = if r < 0.8 {
                Replacement::Mask
            } else if r < 0.9 {
                Replacement::Random(pool[rng.random_range(0..pool.len())])
            } else {
                Replacement::Keep
            };
            match choice {
                Replacement::Mask => rec.tokens[i] = vocab::MASK_TOKEN,
                Replacement::Random(t) => rec.tokens[i] = t,
                Replacement::Keep => {}
            }
            replacement.push(choice);
        }
        let true_coords = rec.geometry.as_ref().map(|g| g.coords.clone());
        let noised = if let Some(coords) = &true_coords {
            let mut noisy = coords[..real].to_vec();
            for &i in &masked {
                for c in noisy[i].iter_mut() {
                    if cfg.coord_noise > 0.0 {
                        *c += rng.random_range(-cfg.coord_noise..=cfg.coord_noise);
                    }
                }
            }
            rec.set_coords(&noisy)?;
            masked.clone()
        } else {
            Vec::new()
        };
        let mut masked_flags = vec![false; n];
        masked.iter().for_each(|&i| masked_flags[i] = true);
        let mut noised_flags = vec![false; n];
        noised.iter().for_each(|&i| noised_flags[i] = true);
        let mut spd_pairs = vec![false; n * n];
        for i in 0..real {
            for j in 0..real {
                spd_pairs[i * n + j] = i != j;
            }
        }
        targets.push(Targets {
            atoms: original,
            masked: masked_flags,
            noised: noised_flags,
            coords: true_coords,
            spd: rec.graph.as_ref().map(|g| g.spd.clone()),
            spd_pairs,
        });
        plans.push(RecordPlan {
            masked,
            replacement,
            noised,
        });
    }
    Ok((out, CorruptionPlan { records: plans }, targets))
}
