//! Active multi-object sprite environment.
//!
//! Scenes hold a few 2.5-D sprites (squares, ellipses, hearts) with random
//! depth order over a gray background. Objects move linearly; an action field
//! of per-pixel accelerations pushes each object by the sum of the
//! accelerations on its visible pixels. Everything is a pure function of a
//! seeded ChaCha8 stream, so datasets regenerate byte-for-byte.

pub mod action;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod png;
pub mod render;
pub mod scene;

pub use action::{object_action_from_field, sample_action_field, ActionField, SampledField};
pub use dataset::{generate_dataset, generate_video, video_seed, Dataset, DatasetConfig, Manifest, VideoRecord};
pub use dynamics::step;
pub use error::EnvError;
pub use render::{render, Rendered};
pub use scene::{sample_scene, EnvState, ObjectSpec, SceneConfig, Shape};
