pub mod autograd;
pub mod confeval;
pub mod error;
pub mod featurize;
pub mod finetune;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod molio;
pub mod pretrain;
pub mod synth;

pub use error::{Error, Result};
