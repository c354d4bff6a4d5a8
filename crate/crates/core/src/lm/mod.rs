//! Small transformer language model with an explicit split between the
//! embedding table and the contextual layers.

mod batch;
mod checkpoint;
mod config;
pub mod linalg;
mod objective;
mod optim;
mod params;
mod real;
mod transformer;

pub use batch::{AttentionMode, Batch, Target};
pub use checkpoint::{Checkpoint, CHECKPOINT_SCHEMA};
pub use config::ModelConfig;
pub use objective::{
    clm_batch, clm_loss, corrupt, mlm_loss, nll_from_logits, plain_batch, pseudo_likelihood_batch, target_nlls, wrap,
    Masking, Objective,
};
pub use optim::{apply_update, training_step, AdamConfig, AdamState};
pub use params::{Group, LayerOffsets, Layout, ModelParams, TrainableFlags};
pub use real::{cast, Real};
pub use transformer::{ForwardOutput, Trace};
