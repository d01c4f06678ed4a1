//! VAPNEV: a variational autoencoder whose reconstruction likelihood is
//! computed exactly through conditional affine coupling flows instead of a
//! pixel-wise loss.
//!
//! The crate is self-contained: a dense tensor library with reverse-mode
//! automatic differentiation, the coupling-flow stack with exact
//! log-determinant accounting and exact inversion, encoder/decoder networks,
//! the training loop, and bit-exact checkpointing. Everything runs in f32
//! for training or f64 for verification.

pub mod adam;
pub mod ckpt;
pub mod conv;
pub mod data;
pub mod dist;
pub mod error;
pub mod flow;
pub mod linalg;
pub mod model;
pub mod net;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use linalg::set_threads;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
