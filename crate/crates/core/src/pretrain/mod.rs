//! Stage 1 (paired) and Stage 2 (single-modality) training drivers.

mod checkpoint;
mod config;
mod corrupt;
mod eval;
mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{apply_kv, parse_kv, RandomTokens, TrainConfig};
pub(crate) use config::parse as parse_value;
pub use corrupt::{apply_corruption, masked_count, CorruptionPlan, RecordPlan, Replacement};
pub use eval::{evaluate_stage1, Stage1Metrics};
pub use optim::{clip_global_norm, collect_grads, global_norm, Adam};

use crate::autograd::backward;
use crate::error::{Error, Result};
use crate::featurize::{featurize, FeatureCache, FeaturizedMolecule};
use crate::losses::{stage1_terms, stage2_terms, total_stage1, total_stage2, LossReport};
use crate::losses::Targets;
use crate::model::{forward_stage1_rows, forward_stage2_rows, Branch, ModelConfig, ParamStore};
use crate::molio::{collate, Molecule};

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub cache: Option<FeatureCache>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub reports: Vec<LossReport>,
}

/// Featurized records, one per conformer (one in total without coordinates).
pub(crate) fn featurize_all(
    data: &[Molecule],
    cfg: &ModelConfig,
    cache: Option<&FeatureCache>,
) -> Result<Vec<Vec<FeaturizedMolecule>>> {
    data.iter()
        .map(|m| {
            let count = m.conformers.as_ref().map_or(1, |c| c.len().max(1));
            (0..count)
                .map(|k| match cache {
                    Some(c) => c.load_or_compute(m, &cfg.features, k),
                    None => featurize(m, &cfg.features, k),
                })
                .collect()
        })
        .collect()
}

pub fn masked_rows(t: &Targets) -> Vec<usize> {
    (0..t.masked.len()).filter(|&i| t.masked[i]).collect()
}

struct MetricsLog {
    out: Option<BufWriter<File>>,
    start: Instant,
    deterministic: bool,
}

impl MetricsLog {
    fn open(path: Option<&Path>, deterministic: bool) -> Result<Self> {
        let out = match path {
            Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
            None => None,
        };
        Ok(Self {
            out,
            start: Instant::now(),
            deterministic,
        })
    }

    fn write(&mut self, stage: u8, epoch: usize, lr: f64, r: &LossReport) -> Result<()> {
        let Some(out) = self.out.as_mut() else {
            return Ok(());
        };
        let wallclock = if self.deterministic {
            serde_json::Value::Null
        } else {
            serde_json::json!(self.start.elapsed().as_secs_f64())
        };
        let line = serde_json::json!({
            "step": r.step,
            "epoch": epoch,
            "stage": stage,
            "batch_size": r.batch_size,
            "lr": lr,
            "wallclock": wallclock,
            "total": r.total,
            "terms": r.terms,
        });
        writeln!(out, "{line}").map_err(|e| Error::io("metrics log", e))
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            out.flush().map_err(|e| Error::io("metrics log", e))?;
        }
        Ok(())
    }
}

enum Plan {
    Stage1,
    Stage2(Branch),
}

fn train(
    data: &[Molecule],
    mut ckpt: Checkpoint,
    plan: Plan,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ckpt.config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set has no molecules".into()));
    }
    let model_cfg = ckpt.config.clone();
    let bank = featurize_all(data, &model_cfg, opts.cache.as_ref())?;
    let (stage, epochs, frozen): (u8, usize, Option<&str>) = match plan {
        Plan::Stage1 => (1, cfg.epochs_stage1, None),
        Plan::Stage2(Branch::TwoD) => (2, cfg.epochs_stage2, Some("fl_3d.")),
        Plan::Stage2(Branch::ThreeD) => (2, cfg.epochs_stage2, Some("fl_2d.")),
    };
    let trainable = |name: &str| frozen.is_none_or(|f| !name.starts_with(f));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut log = MetricsLog::open(opts.metrics_path.as_deref(), cfg.deterministic)?;
    let mut reports = Vec::new();
    let mut step = 0usize;
    let limit = cfg.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let choice: Vec<usize> = bank.iter().map(|f| rng.random_range(0..f.len())).collect();
        for chunk in order.chunks(cfg.batch_size) {
            if step >= limit {
                break 'epochs;
            }
            let feats: Vec<_> = chunk.iter().map(|&i| bank[i][choice[i]].clone()).collect();
            let batch = collate(&feats)?;
            let (batch, _, targets) = apply_corruption(&batch, cfg, &mut rng)?;
            let bound = ckpt.params.bind_with(trainable);
            let (total, report) = match plan {
                Plan::Stage1 => {
                    let outs = batch
                        .records
                        .iter()
                        .zip(&targets)
                        .map(|(r, t)| forward_stage1_rows(&bound, r, &model_cfg, Some(&masked_rows(t))))
                        .collect::<Result<Vec<_>>>()?;
                    let terms = stage1_terms(&outs, &targets, cfg.weights.tau)?;
                    total_stage1(&terms, &cfg.weights, step, batch.len())?
                }
                Plan::Stage2(branch) => {
                    let outs = batch
                        .records
                        .iter()
                        .zip(&targets)
                        .map(|(r, t)| forward_stage2_rows(&bound, r, branch, &model_cfg, Some(&masked_rows(t))))
                        .collect::<Result<Vec<_>>>()?;
                    let terms = stage2_terms(&outs, &targets)?;
                    total_stage2(&terms, branch, &cfg.weights, step, batch.len())?
                }
            };
            if !report.total.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            let grads = backward(&total);
            let mut g = collect_grads(&bound, &grads);
            clip_global_norm(&mut g, cfg.grad_clip);
            adam.step(&mut ckpt.params, &g);
            log.write(stage, epoch, cfg.lr, &report)?;
            reports.push(report);
            step += 1;
        }
        ckpt.stage = stage;
        ckpt.step = step;
        if let Some(p) = &opts.checkpoint_path {
            ckpt.save(p)?;
        }
    }
    log.finish()?;
    ckpt.stage = stage;
    ckpt.step = step;
    if let Some(p) = &opts.checkpoint_path {
        ckpt.save(p)?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        reports,
    })
}

/// Paired pre-training from a freshly initialized model.
pub fn run_stage1(
    data: &[Molecule],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    if let Some(m) = data.iter().find(|m| !(m.has_2d() && m.has_3d())) {
        return Err(Error::Modality(format!(
            "record '{}' is not paired; stage 1 needs bonds and coordinates",
            m.id
        )));
    }
    let ckpt = Checkpoint {
        config: model_cfg.clone(),
        params: ParamStore::init(model_cfg, cfg.seed)?,
        stage: 0,
        step: 0,
    };
    train(data, ckpt, Plan::Stage1, cfg, opts)
}

/// Continual training on one modality, starting from a Stage 1 checkpoint.
/// Only the `branch` modality of each record is used.
pub fn run_stage2(
    data: &[Molecule],
    init: &Checkpoint,
    branch: Branch,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    if init.stage < 1 {
        return Err(Error::Checkpoint(
            "stage 2 needs a checkpoint produced by stage 1".into(),
        ));
    }
    let single: Vec<Molecule> = data
        .iter()
        .map(|m| match branch {
            Branch::TwoD if m.has_2d() => Ok(m.without_3d()),
            Branch::ThreeD if m.has_3d() => Ok(m.without_2d()),
            _ => Err(Error::Modality(format!(
                "record '{}' has no {} modality",
                m.id,
                branch.tag()
            ))),
        })
        .collect::<Result<_>>()?;
    train(&single, init.clone(), Plan::Stage2(branch), cfg, opts)
}
