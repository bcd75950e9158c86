//! relkit: a Relation Network toolkit — tape-based autodiff over dense
//! tensors, perception front-ends that turn images, token sequences, and
//! state descriptions into object sets, synthetic relational-reasoning
//! datasets with exact oracles, and a synchronous data-parallel trainer.
//!
//! The numeric core is generic over the scalar type (`f64` by default;
//! `f32` available through the same APIs). The crate-root aliases pin
//! the default 64-bit lane.

pub mod adam;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod perception;
pub mod relnet;
pub mod scalar;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Mode, Tape, ValueId};
pub use tensor::Tensor;

/// Default 64-bit tensor.
pub type Tensor64 = tensor::Tensor<f64>;
/// 32-bit tensor for the reduced-precision lane.
pub type Tensor32 = tensor::Tensor<f32>;
/// Default 64-bit tape.
pub type Tape64 = tape::Tape<f64>;
/// 32-bit tape.
pub type Tape32 = tape::Tape<f32>;
