//! Tuning-vector analysis for transformer checkpoints.
//!
//! Extract the difference between a pretrained and a fine-tuned checkpoint,
//! do arithmetic with it, measure how much of it lies in the pretrained
//! weights' dominant singular subspace, and profile FFN neuron activity of a
//! small reference transformer.
//!
//! Numerics are generic over [`Real`] (`f32` or `f64`); the aliases below fix
//! the analysis precision to `f64`, which is what the reports use.

// Comparisons that must also reject NaN are written as negations.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activations;
pub mod diffcore;
pub mod error;
pub mod evalharness;
pub mod matrix;
pub mod registry;
pub mod scalar;
pub mod subspace;
pub mod tensor;
pub mod tensorstore;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use registry::{AlignMode, ComponentKind, ComponentMap};
pub use scalar::{KahanSum, Real};
pub use tensorstore::{Checkpoint, CheckpointReader, DType, TensorRecord};

pub type Mat = Matrix<f64>;
pub type Mat32 = Matrix<f32>;
pub type Svd = subspace::SvdFactors<f64>;
pub type TuningVec = diffcore::TuningVector<f64>;
pub type TuningVec32 = diffcore::TuningVector<f32>;
pub type ToyModel = activations::ToyModel<f64>;
pub type ToyModel32 = activations::ToyModel<f32>;
