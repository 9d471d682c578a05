//! Minimal differentiable building blocks: parameters, a reverse-mode tape
//! and the layers both networks are assembled from.

pub mod layers;
pub mod params;
pub mod tape;

pub use layers::{
    Adam, AdamConfig, LayerNorm, Linear, RecurrentDirection, SelfAttention, SetTransformerLayer,
    TemporalLayer, TemporalMixer,
};
pub use params::{Grads, Param, ParamId, ParamStore};
pub use tape::{sigmoid, Act, Tape, Var};
