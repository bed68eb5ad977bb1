//! Entity-grid coherence models.
//!
//! - [`grid`]: monologue entity grids, lexicalization, sentence permutations
//!   and transition probabilities.
//! - [`conversation`]: reply trees, sentence graphs, root-to-leaf paths and the
//!   3D conversational grid.
//! - [`neural`]: the convolutional scorer with its backward pass and RMSprop.
//! - [`training`]: pair generation and the pairwise ranking training loop.
//! - [`eval`]: discrimination, thread reconstruction, baselines and metrics.
//! - [`synth`]: seeded synthetic corpora with a planted coherence signal.

pub mod conversation;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod neural;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{CoherenceError, Result};
