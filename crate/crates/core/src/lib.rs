//! Packed multi-model training.
//!
//! A small f64 autodiff engine ([`graph`]), lossless packing of several
//! models into one graph ([`pack`]), a single-device memory and step-time
//! simulator ([`sim`]) and a pack-aware Hyperband tuner ([`tuner`]).

pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod optim;
pub mod pack;
pub mod report;
pub mod seeding;
pub mod sim;
pub mod tensor;
pub mod tuner;

pub use error::{DataError, ExperimentError, GraphError, OptimError, PackError, SimError, TunerError};
pub use tensor::Tensor;
