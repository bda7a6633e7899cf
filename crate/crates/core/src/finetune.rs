//! Supervised fine-tuning with a pooled linear head on top of the
//! single-modality forward pass.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::pool;
use crate::model::{forward_stage2, Bound, Branch, ParamStore};
use crate::molio::{collate, Molecule};
use crate::pretrain::{clip_global_norm, parse_value, collect_grads, featurize_all, Adam, Checkpoint};

pub const HEAD_W: &str = "ft_head.w";
pub const HEAD_B: &str = "ft_head.b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Squared error on real-valued labels.
    Regression,
    /// Logistic loss on 0/1 labels.
    Classification,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            _ => Err(Error::Config(format!(
                "unknown task '{s}' (expected regression or classification)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub task: Task,
    pub branch: Branch,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub freeze_backbone: bool,
    pub max_steps: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            task: Task::Regression,
            branch: Branch::TwoD,
            lr: 1e-3,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            grad_clip: 1.0,
            freeze_backbone: false,
            max_steps: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Sets one field from its textual value. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "task" => self.task = value.parse()?,
            "modality" | "branch" => self.branch = value.parse()?,
            "lr" => self.lr = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "freeze_backbone" => self.freeze_backbone = parse_value(key, value)?,
            "max_steps" => self.max_steps = Some(parse_value(key, value)?),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean squared error (regression) or accuracy (classification) on the
    /// training set after the last step.
    pub metric: f64,
    pub metric_name: String,
    pub predictions: Vec<f64>,
}

pub struct FinetuneOutcome {
    pub params: ParamStore,
    pub losses: Vec<f64>,
    pub report: FinetuneReport,
}

fn labels(data: &[Molecule], task: Task) -> Result<Vec<f64>> {
    data.iter()
        .map(|m| {
            let y = m
                .label
                .ok_or_else(|| Error::validation(&m.id, "record has no label"))?;
            if task == Task::Classification && y != 0.0 && y != 1.0 {
                return Err(Error::validation(&m.id, "classification labels must be 0 or 1"));
            }
            Ok(y)
        })
        .collect()
}

fn with_head(ckpt: &Checkpoint, seed: u64) -> ParamStore {
    let d = ckpt.config.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f17e);
    let std = ckpt.config.init_std;
    let w = (0..d)
        .map(|_| {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            std * z
        })
        .collect();
    let mut tensors: BTreeMap<String, Tensor> =
        ckpt.params.iter().map(|(k, t)| (k.to_string(), t.clone())).collect();
    tensors.insert(HEAD_W.into(), Tensor::new(vec![d, 1], w));
    tensors.insert(HEAD_B.into(), Tensor::zeros(&[1]));
    ParamStore::from_tensors(tensors)
}

/// Mean loss over the records of one batch and the raw predictions.
fn batch_loss(
    bound: &Bound,
    ckpt: &Checkpoint,
    feats: &[crate::featurize::FeaturizedMolecule],
    ys: &[f64],
    cfg: &FinetuneConfig,
) -> Result<(Var, Vec<f64>)> {
    let batch = collate(feats)?;
    let mut total: Option<Var> = None;
    let mut preds = Vec::with_capacity(ys.len());
    for (rec, &y) in batch.records.iter().zip(ys) {
        let out = forward_stage2(bound, rec, cfg.branch, &ckpt.config)?;
        let z = pool(&out.s_l, &out.masks.atom_mask)?
            .matmul(bound.get(HEAD_W))
            .add(bound.get(HEAD_B))
            .sum();
        preds.push(z.value().item());
        let loss = match cfg.task {
            Task::Regression => z.add_scalar(-y).square(),
            Task::Classification => z.softplus().sub(&z.scale(y)),
        };
        total = Some(match total {
            None => loss,
            Some(t) => t.add(&loss),
        });
    }
    let total = total.ok_or_else(|| Error::Empty("empty batch".into()))?;
    Ok((total.scale(1.0 / ys.len() as f64), preds))
}

/// Trains the head (and, unless frozen, the backbone) on labelled records
/// carrying the `cfg.branch` modality.
pub fn finetune(data: &[Molecule], ckpt: &Checkpoint, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("fine-tuning set has no molecules".into()));
    }
    let ys = labels(data, cfg.task)?;
    let single: Vec<Molecule> = data
        .iter()
        .map(|m| match cfg.branch {
            Branch::TwoD if m.has_2d() => Ok(m.without_3d()),
            Branch::ThreeD if m.has_3d() => Ok(m.without_2d()),
            _ => Err(Error::Modality(format!(
                "record '{}' has no {} modality",
                m.id,
                cfg.branch.tag()
            ))),
        })
        .collect::<Result<_>>()?;
    let bank = featurize_all(&single, &ckpt.config, None)?;
    let feats: Vec<_> = bank.into_iter().map(|mut f| f.swap_remove(0)).collect();
    let mut params = with_head(ckpt, cfg.seed);
    let freeze = cfg.freeze_backbone;
    let trainable = move |name: &str| !freeze || name.starts_with("ft_head.");
    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::new();
    let limit = cfg.max_steps.unwrap_or(usize::MAX);
    'epochs: for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..feats.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if losses.len() >= limit {
                break 'epochs;
            }
            let f: Vec<_> = chunk.iter().map(|&i| feats[i].clone()).collect();
            let y: Vec<f64> = chunk.iter().map(|&i| ys[i]).collect();
            let bound = params.bind_with(trainable);
            let (loss, _) = batch_loss(&bound, ckpt, &f, &y, cfg)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("fine-tuning loss at step {}", losses.len())));
            }
            let grads = backward(&loss);
            let mut g = collect_grads(&bound, &grads);
            clip_global_norm(&mut g, cfg.grad_clip);
            adam.step(&mut params, &g);
            losses.push(value);
        }
    }
    let (loss, preds) = batch_loss(&params.bind_with(|_| false), ckpt, &feats, &ys, cfg)?;
    let (metric, metric_name) = match cfg.task {
        Task::Regression => (
            preds.iter().zip(&ys).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / ys.len() as f64,
            "mse",
        ),
        Task::Classification => (
            preds
                .iter()
                .zip(&ys)
                .filter(|(p, y)| (**p > 0.0) == (**y == 1.0))
                .count() as f64
                / ys.len() as f64,
            "accuracy",
        ),
    };
    let report = FinetuneReport {
        steps: losses.len(),
        initial_loss: losses.first().copied().unwrap_or(loss.value().item()),
        final_loss: loss.value().item(),
        metric,
        metric_name: metric_name.into(),
        predictions: preds,
    };
    Ok(FinetuneOutcome {
        params,
        losses,
        report,
    })
}
