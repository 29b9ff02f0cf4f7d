//! Keyed instrumentation for convolutional networks.
//!
//! Every convolution+ReLU block of a base network is followed by a detector,
//! which raises an alarm when a key polynomial pushes any activation past
//! its threshold, and a guard, a key-seeded channel-attention layer. Models
//! built from different keys disagree on adversarial inputs crafted against
//! one another. The crate also carries the reference attacks and the
//! evaluation harness used to measure that effect.

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod instrument;
pub mod keys;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use keys::Key;
pub use tensor::{Tape, Tensor, Var};
