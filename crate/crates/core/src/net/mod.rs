//! The fused three-branch classifier: a learned 1x1 channel transform and
//! shared CNN over RGB + event images, a texture CNN over RGB alone, the
//! fixed spiking branch over raw events, a 1x1 fusion conv and an MDNet-style
//! fully connected head with one output branch per training domain.

mod check;
mod checkpoint;
mod config;
mod model;

pub use check::check_model_gradients;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use config::{
    AblationFlags, Branch, ConvSpec, InitScheme, McfrConfig, PoolSpec, SrmLayerSpec, UeeSpec, Variant,
};
pub use model::{Backward, ConvStage, Grads, McfrModel, ModelInput, Prepared, TrainSample};

#[cfg(test)]
mod tests;
