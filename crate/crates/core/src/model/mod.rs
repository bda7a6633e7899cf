//! Learnable components: input encodings, shared-attention encoders,
//! cross-modality decoders, the multi-modal encoder and prediction heads.

mod forward;
mod layers;
mod params;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use forward::{
    forward_stage1, forward_stage1_rows, forward_stage2, forward_stage2_rows, generate_positions, RecordInputs, Stage1Output, Stage2Output,
};
pub use layers::{
    build_2d_inputs, build_3d_inputs, decoder_forward, embed_atoms, embed_tokens, encoder_forward,
    feature_learner, gaussian_basis, head_masked_atom, head_position, head_spd, mm_encoder,
    multi_head_attention, Branch, Direction, Masks, PairRep,
};
pub use params::{Bound, ParamStore};

use crate::error::{Error, Result};
use crate::featurize::{vocab, FeatureConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// `N(0, init_std²)` for every weight matrix.
    #[default]
    Normal,
    /// As `Normal`, except prediction-head matrices use `N(0, 1/fan_in)`.
    FanInHeads,
}

impl std::str::FromStr for WeightInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(WeightInit::Normal),
            "fan_in_heads" => Ok(WeightInit::FanInHeads),
            _ => Err(Error::Config(format!(
                "unknown weight_init '{s}' (expected normal or fan_in_heads)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    /// Gaussian kernel count.
    pub k: usize,
    /// Encoder and decoder depth.
    pub f: usize,
    /// Multi-modal encoder depth.
    pub l: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Hidden width of the masked-atom head.
    pub head_hidden: usize,
    /// Hidden width of the SPD head.
    pub spd_hidden: usize,
    /// Standard deviation of the normal initializer for embeddings and weight
    /// matrices. Scalar attention-bias tables start at unit variance.
    pub init_std: f64,
    /// Standard deviation of the atom and degree embedding tables; `init_std`
    /// when unset.
    #[serde(default)]
    pub embed_std: Option<f64>,
    #[serde(default)]
    pub weight_init: WeightInit,
    pub features: FeatureConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 512,
            k: 128,
            f: 4,
            l: 4,
            heads: 8,
            mlp_ratio: 4,
            head_hidden: 512,
            spd_hidden: 512,
            init_std: 0.02,
            embed_std: None,
            weight_init: WeightInit::Normal,
            features: FeatureConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration used by the gradient harness.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            k: 4,
            f: 2,
            l: 1,
            heads: 2,
            mlp_ratio: 2,
            head_hidden: 8,
            spd_hidden: 8,
            init_std: 0.3,
            embed_std: None,
            weight_init: WeightInit::Normal,
            features: FeatureConfig {
                max_hop: 6,
                max_path_len: 4,
                ..FeatureConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        if self.d == 0 || self.k == 0 || self.heads == 0 || self.mlp_ratio == 0 || self.head_hidden == 0 || self.spd_hidden == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.f == 0 || self.l == 0 {
            return Err(Error::Config("encoder depths must be at least 1".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        if self.embed_std.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("embed_std must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn vocab_size(&self) -> usize {
        vocab::VOCAB_SIZE
    }

    pub fn spd_classes(&self) -> usize {
        self.features.spd_buckets()
    }

    /// Hex SHA-256 of the JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("model config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
