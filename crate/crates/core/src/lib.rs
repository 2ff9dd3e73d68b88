//! Two-step low-shot image classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`], [`kernels`], [`gradcheck`]: dense tensors,
//!   reverse-mode differentiation, the convolution kernels and a
//!   finite-difference oracle.
//! * [`nn`]: convolution / batch-norm / residual layers, the four-block
//!   feature extractor, classifier heads and checkpoints.
//! * [`loss`]: softmax, cross-entropy, cosine similarity and the
//!   reference-set similarity loss.
//! * [`pipeline`]: SGD, the learning-rate schedule and the four training
//!   steps (coarse pretraining, head swap, reference sets, similarity
//!   fine-tuning).
//! * [`gabor`]: the log-Gabor filter-bank baseline.
//! * [`interp`]: saliency maps and expression-map aggregation.
//! * [`data`]: PGM images, manifests, splits and the synthetic benchmark.
//! * [`experiment`]: configuration, metrics and the experiment commands.

pub mod data;
pub mod error;
pub mod gabor;
pub mod experiment;
pub mod gradcheck;
pub mod interp;
pub mod kernels;
pub mod loss;
pub mod nn;
pub mod pipeline;
pub mod tape;
pub mod tensor;

pub use error::TensorError;
pub use gradcheck::finite_diff_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Element, Tensor};
