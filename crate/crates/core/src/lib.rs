//! Small sentence classifiers (BiLSTM, BiLSTM with attention pooling,
//! shallow CNN) trained on SST-2 style data, either on gold labels alone or
//! distilled from cached teacher logits.
//!
//! Everything runs on a small `f64` reverse-mode engine ([`graph`]), so the
//! whole pipeline is checkable against finite differences.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod layers;
pub mod objectives;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Rng, Tensor};
