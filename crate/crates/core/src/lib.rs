//! Continual metric learning with backward-consistent embeddings.
//!
//! A model is trained over a sequence of sessions. After each session the
//! embeddings of that session's training items are frozen into an
//! append-only gallery and never re-extracted; later models must stay
//! comparable with them. Training combines a normalized-softmax
//! discrimination loss, a teacher/student triplet coherence loss against the
//! previous session's model, and an attraction loss towards per-class
//! embedding centroids aggregated across sessions.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod tape;
pub mod model;
pub mod losses;
pub mod replay;
pub mod dataset;
pub mod sessions;
pub mod gallery;
pub mod checkpoint;
pub mod runner;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use tape::{GradTape, Gradients, ParamId, Var};
pub use model::{Hyperparameters, ModelSnapshot, ModelState};
