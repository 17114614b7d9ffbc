//! Goal-conditioned predictive coding for offline decision making.
//!
//! Stage 1 pretrains a bidirectional transformer ([`trajnet::TrajNet`]) to
//! compress a masked window of trajectory states, plus a goal, into a few
//! slot-token outputs (the bottleneck) from which the decoder reconstructs
//! history and future. Stage 2 freezes the encoder and trains an MLP
//! ([`policy::PolicyNet`]) on `(state, goal, bottleneck)`.
//!
//! All model math is generic over [`Scalar`]; the `*64` aliases below are
//! the instantiations the pipeline uses.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod envs;
pub mod eval;
pub mod error;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod trajnet;
pub mod viz;

pub use adam::{AdamConfig, AdamState};
pub use error::{Error, Result, TensorError};
pub use params::{BoundParams, ParamId, ParamSet};
pub use rng::RngStream;
pub use scalar::Scalar;
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamSet64 = ParamSet<f64>;
