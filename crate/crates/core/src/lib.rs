//! Object-based active inference on dSprites-style videos: a slot-structured
//! generative model with linear action-conditioned dynamics, iterative
//! amortized inference of state and action beliefs, preference learning and
//! one-step free-energy planning.

pub mod config;
pub mod error;
pub mod eval;
pub mod inference;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod planner;
pub mod preference;
pub mod train;
pub mod video;

pub use config::ModelConfig;
pub use error::ObaiError;
pub use inference::{Beliefs, InferenceOptions, InferenceOutput, Obai};
pub use video::Video;
