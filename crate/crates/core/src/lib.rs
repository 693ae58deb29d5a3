//! Spatio-temporal gait embeddings built on multi-hop temporal switch (MTS)
//! convolutions.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] - dense tensors, a small reverse-mode autograd and the
//!   convolution / pooling kernels the model needs.
//! * [`mts`] - channel switching between frames and the shared-weight
//!   spatial + temporal extractor block.
//! * [`backbone`] and [`head`] - the frame-level CNN and the sequence-level
//!   embedding head (temporal max pooling, horizontal strips, separate FCs).
//! * [`sampling`] - frame samplers and PK batch composition.
//! * [`loss`] and [`retrieval`] - Batch-All triplet / cross-entropy losses and
//!   open-set retrieval metrics (Rank-k, mAP, mINP).
//! * [`trainer`] - optimizers, learning-rate schedule and the training loop.
//! * [`data`] - silhouette datasets on disk, the synthetic walker generator
//!   and embedding / checkpoint persistence.

pub mod backbone;
pub mod data;
pub mod error;
pub mod head;
pub mod loss;
pub mod mts;
pub mod retrieval;
pub mod sampling;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Parameter, Scalar, Tensor, Var};
