//! Meta-learned test-time adaptation for task progress estimation.
//!
//! A small network maps per-frame visual/goal embeddings to a progress value
//! in `(0, 1)`. Part of it, the adaptation MLP, is updated online during
//! inference by a learned reconstruction loss; its initialization, the
//! projections defining that loss and the progression head are meta-trained
//! by differentiating through the inner updates.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod meta;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod ttt;

pub use error::{Error, Result};
