//! Desk-scale continual-learning lab: a tiny multimodal decoder, selective
//! parameter tuning, forgetting mitigation, drift probes and sequence metrics.

pub mod checkpoint;
pub mod curriculum;
pub mod error;
pub mod gradcheck;
pub mod groups;
pub mod metrics;
pub mod mitigation;
pub mod model;
pub mod objectives;
pub mod ops;
pub mod params;
pub mod probes;
pub mod rng;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{LabError, Result};
pub use model::{ForwardTrace, ModelConfig, TinyLmm};
pub use params::ParamStore;
pub use tensor::{Scalar, Tensor};
