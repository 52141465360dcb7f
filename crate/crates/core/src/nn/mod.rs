//! Differentiable-computation substrate: tensors on a tape, dense layers,
//! layer normalization, banded attention, embeddings and Adam.

pub mod adam;
pub mod layers;
pub mod params;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use layers::{
    banded_self_attention, dense, layer_norm, sinusoidal_embed, sinusoidal_position, Attention,
    Dense,
};
pub use params::{Gradients, ParamId, PredictorParams};
pub use tape::{Tape, Var};
