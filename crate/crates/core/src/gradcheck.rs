//! Central finite-difference check of the Stage 1 objective's gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{backward, record_detached, replay_detached, Tensor};
use crate::error::{Error, Result};
use crate::featurize::featurize;
use crate::losses::{stage1_terms, total_stage1, Targets};
use crate::model::{forward_stage1_rows, ModelConfig, ParamStore};
use crate::molio::{collate, Batch, Bond, BondType, Molecule};
use crate::pretrain::{apply_corruption, masked_rows, TrainConfig};

#[derive(Clone, Debug, Serialize)]
pub struct TensorError {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub scalars_checked: usize,
    pub step: f64,
    pub loss: f64,
    pub tensors: Vec<TensorError>,
}

/// Norms below this are treated as this value when forming relative errors.
pub const NORM_FLOOR: f64 = 1e-4;

/// Small configuration used by the gradient check.
pub fn gradcheck_config(d: usize) -> ModelConfig {
    ModelConfig {
        d,
        k: 4,
        f: 2,
        l: 1,
        heads: 2,
        mlp_ratio: 2,
        head_hidden: d,
        spd_hidden: d,
        ..ModelConfig::tiny()
    }
}

/// A paired chain molecule: a carbon backbone with a terminal oxygen and
/// seeded, non-degenerate coordinates.
pub fn chain_molecule(atoms: usize, seed: u64) -> Result<Molecule> {
    if atoms < 2 {
        return Err(Error::Config("the gradient check needs at least 2 atoms".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![6u32; atoms];
    z[atoms - 1] = 8;
    let bonds = (1..atoms).map(|i| Bond::new(i - 1, i, BondType::Single)).collect();
    let mut coords = Vec::with_capacity(atoms);
    let mut p = [0.0f64; 3];
    for i in 0..atoms {
        if i > 0 {
            p[0] += 1.4;
            p[1] += rng.random_range(-0.6..0.6);
            p[2] += rng.random_range(-0.6..0.6);
        }
        coords.push(p);
    }
    Ok(Molecule {
        id: "gradcheck".into(),
        label: None,
        formal_charges: vec![0; atoms],
        atomic_numbers: z,
        bonds: Some(bonds),
        conformers: Some(vec![coords]),
    })
}

struct Problem {
    batch: Batch,
    targets: Vec<Targets>,
    cfg: ModelConfig,
    train: TrainConfig,
}

impl Problem {
    fn loss(&self, params: &ParamStore, grad: bool) -> Result<(f64, Option<BTreeMap<String, Tensor>>)> {
        let bound = if grad { params.bind() } else { params.bind_with(|_| false) };
        let outs = self
            .batch
            .records
            .iter()
            .zip(&self.targets)
            .map(|(r, t)| forward_stage1_rows(&bound, r, &self.cfg, Some(&masked_rows(t))))
            .collect::<Result<Vec<_>>>()?;
        let terms = stage1_terms(&outs, &self.targets, self.train.weights.tau)?;
        let (total, _) = total_stage1(&terms, &self.train.weights, 0, self.batch.len())?;
        let value = total.value().item();
        if !grad {
            return Ok((value, None));
        }
        let grads = backward(&total);
        Ok((value, Some(crate::pretrain::collect_grads(&bound, &grads))))
    }
}

/// Compares backpropagated gradients of the Stage 1 total loss with central
/// differences of step `h`, for every scalar parameter. Stop-gradient
/// targets are held at their unperturbed values during differencing. The
/// relative error of a tensor is `|a - n| / max(|a|, |n|, NORM_FLOOR)` over
/// its flattened gradient.
pub fn stage1_gradcheck(mol: &Molecule, cfg: &ModelConfig, seed: u64, h: f64) -> Result<GradcheckReport> {
    let train = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    stage1_gradcheck_with(mol, cfg, train, seed, h)
}

/// As [`stage1_gradcheck`] with explicit loss weights and corruption settings.
pub fn stage1_gradcheck_with(
    mol: &Molecule,
    cfg: &ModelConfig,
    train: TrainConfig,
    seed: u64,
    h: f64,
) -> Result<GradcheckReport> {
    cfg.validate()?;
    let feats = featurize(mol, &cfg.features, 0)?;
    let batch = collate(&[feats])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (batch, _, targets) = apply_corruption(&batch, &train, &mut rng)?;
    let problem = Problem {
        batch,
        targets,
        cfg: cfg.clone(),
        train,
    };
    let mut params = ParamStore::init(cfg, seed)?;
    let (base, pinned) = record_detached(|| problem.loss(&params, true));
    let (loss, analytic) = base?;
    let analytic = analytic.expect("gradients requested");
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut tensors = Vec::with_capacity(names.len());
    let mut scalars = 0;
    for name in names {
        let a = analytic[&name].data().to_vec();
        let mut numeric = vec![0.0; a.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = params.get(&name).expect("known tensor").data()[i];
            params.get_mut(&name).expect("known tensor").data_mut()[i] = orig + h;
            let (plus, _) = replay_detached(&pinned, || problem.loss(&params, false))?;
            params.get_mut(&name).expect("known tensor").data_mut()[i] = orig - h;
            let (minus, _) = replay_detached(&pinned, || problem.loss(&params, false))?;
            params.get_mut(&name).expect("known tensor").data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        scalars += a.len();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(&numeric).map(|(x, y)| x - y).collect();
        let an = norm(&a);
        let denom = an.max(norm(&numeric)).max(NORM_FLOOR);
        tensors.push(TensorError {
            name,
            rel_error: norm(&diff) / denom,
            analytic_norm: an,
        });
    }
    let worst = tensors
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .ok_or_else(|| Error::Empty("model has no parameters".into()))?;
    let (max_rel_error, worst_tensor) = (worst.rel_error, worst.name.clone());
    Ok(GradcheckReport {
        max_rel_error,
        worst_tensor,
        scalars_checked: scalars,
        step: h,
        loss,
        tensors,
    })
}
