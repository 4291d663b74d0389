//! Minimal differentiable-network substrate: dense tensors, a tape-based
//! reverse-mode autodiff graph, the handful of layers the object-centric
//! model needs (transposed convolutions, strided convolutions, linear, LSTM),
//! deterministic parameter initialization and checkpoint I/O.
//!
//! Everything is generic over [`Real`], so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod real;
pub mod sample;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::NnError;
pub use graph::{softplus, softplus_inv, Graph, Var};
pub use layers::{Conv2d, ConvTranspose2d, Linear, LstmCell, LstmState};
pub use params::{Gradients, Init, ParamStore};
pub use real::Real;
pub use sample::{reparameterized_normal_sample, reparameterized_with_sd, standard_normal};
pub use tensor::Tensor;
