use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

/// Where the random replacement tokens of the corruption come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomTokens {
    /// Uniform over the atom vocabulary.
    #[default]
    Vocabulary,
    /// Uniform over the real atoms of the current batch.
    Batch,
}

impl std::str::FromStr for RandomTokens {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vocabulary" => Ok(RandomTokens::Vocabulary),
            "batch" => Ok(RandomTokens::Batch),
            _ => Err(Error::Config(format!(
                "unknown random_tokens '{s}' (expected vocabulary or batch)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    /// Half-width (Å) of the uniform noise added to corrupted atoms.
    pub coord_noise: f64,
    #[serde(default)]
    pub random_tokens: RandomTokens,
    pub seed: u64,
    pub grad_clip: f64,
    /// Stops a run after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    /// Omits wallclock from metric logs so reruns are byte-identical.
    pub deterministic: bool,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            epochs_stage1: 20,
            epochs_stage2: 10,
            batch_size: 16,
            mask_ratio: 0.15,
            coord_noise: 1.0,
            random_tokens: RandomTokens::Vocabulary,
            seed: 0,
            grad_clip: 1.0,
            max_steps: None,
            deterministic: false,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio {} must lie strictly between 0 and 1",
                self.mask_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.coord_noise >= 0.0 && self.coord_noise.is_finite()) {
            return Err(Error::Config("coord_noise must be non-negative".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.weights.validate()
    }

    /// Sets one field from its textual value. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let w = &mut self.weights;
        match key {
            "lr" => self.lr = parse(key, value)?,
            "epochs_stage1" => self.epochs_stage1 = parse(key, value)?,
            "epochs_stage2" => self.epochs_stage2 = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "mask_ratio" => self.mask_ratio = parse(key, value)?,
            "coord_noise" => self.coord_noise = parse(key, value)?,
            "random_tokens" => self.random_tokens = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "max_steps" => self.max_steps = Some(parse(key, value)?),
            "deterministic" => self.deterministic = parse(key, value)?,
            "w_cl" => w.w_cl = parse(key, value)?,
            "w_ra" => w.w_ra = parse(key, value)?,
            "w_c" => w.w_c = parse(key, value)?,
            "w_atom" => w.w_atom = parse(key, value)?,
            "w_pos" => w.w_pos = parse(key, value)?,
            "w_spd" => w.w_spd = parse(key, value)?,
            "tau" => w.tau = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl ModelConfig {
    /// Sets one field from its textual value. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let fc = &mut self.features;
        match key {
            "d" | "dim" => self.d = parse(key, value)?,
            "k" | "kernels" => self.k = parse(key, value)?,
            "f" | "depth" => self.f = parse(key, value)?,
            "l" | "mm_depth" => self.l = parse(key, value)?,
            "heads" | "h" => self.heads = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "head_hidden" => self.head_hidden = parse(key, value)?,
            "spd_hidden" => self.spd_hidden = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "embed_std" => self.embed_std = Some(parse(key, value)?),
            "weight_init" => self.weight_init = value.parse()?,
            "max_degree" => fc.max_degree = parse(key, value)?,
            "max_hop" => fc.max_hop = parse(key, value)?,
            "max_path_len" => fc.max_path_len = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse '{value}' for key '{key}'")))
}

/// Flat `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno + 1,
            msg: format!("expected key = value, found '{line}'"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies key-value pairs to both configs; unknown keys are an error.
pub fn apply_kv(pairs: &[(String, String)], train: &mut TrainConfig, model: &mut ModelConfig) -> Result<()> {
    for (k, v) in pairs {
        if !train.set(k, v)? && !model.set(k, v)? {
            return Err(Error::Config(format!("unknown configuration key '{k}'")));
        }
    }
    Ok(())
}
