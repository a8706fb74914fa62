//! Batched reverse-mode autodiff, layers, optimizer and seeded sampling.

pub mod dist;
mod error;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use dist::{sample_diag_gaussian, SampleMode};
pub use error::NumericsError;
pub use layers::{dense_forward, gru_step, Activation, Dense, Gru, Mlp};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamSet};
pub use rng::{Rng, RngState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
