//! Adversarial complementary representation learning (ACoRL) on a small,
//! self-contained reverse-mode autodiff engine.
//!
//! An *alliance* model is trained on a task while a gradient-reversal branch
//! pushes its representation away from the representations of frozen,
//! previously trained models. Members trained this way are then fused, either
//! at the representation level ([`fusion::train_late_fusion`]) or at the
//! output level ([`fusion::output_fuse_weighted`], [`fusion::fit_logreg`]).
//!
//! Module map:
//!
//! - [`autodiff`]: tensors, tape, gradient reversal, finite-difference checks
//! - [`nn`]: MLP models, initialization, optimizers
//! - [`checkpoint`]: the on-disk model / fusion container
//! - [`losses`]: cross-entropy, AAM-softmax, KL and the adversarial loss
//! - [`alliance`]: plain and alliance training loops
//! - [`fusion`]: late and output fusion
//! - [`metrics`]: accuracy, EER, integrated gradients, complementarity
//! - [`data`]: synthetic complementary-cue datasets, trial lists, CSV I/O
//! - [`config`], [`pipeline`], [`experiment`], [`report`], [`cli`]: the
//!   command-line pipeline and the canonical experiment

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alliance;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod rng;

pub use autodiff::{finite_difference_check, Gradients, NodeId, Primitive, Tape, Tensor};
pub use error::{Error, Result};
