//! From-scratch differentiable scorer for entity grids.

pub mod checkpoint;
pub mod embeddings;
pub mod input;
pub mod model;
pub mod ops;
pub mod optim;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use embeddings::PretrainedEmbeddings;
pub use input::{GridSample, TokenMatrix};
pub use model::{Architecture, CoherenceModel, EncodedGrid, Gradients, ModelConfig, ModelParams, Tape, PARAM_NAMES};
pub use ops::{BatchNorm, Mode};
pub use optim::{OptimizerState, RmsPropConfig};
pub use vocab::{Vocab, PAD_ID};
