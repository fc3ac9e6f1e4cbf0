//! A split-learning laboratory for regression tasks.
//!
//! A feature party holds inputs and a bottom network, a label party holds
//! labels and a top network, and only cut-layer activations and their
//! gradients cross between them. This crate simulates that training
//! protocol, runs the label inference attack (gradient inversion plus
//! model completion) against the feature party's recorded transcript, and
//! applies the label party's defenses: label or gradient noise, gradient
//! sparsification, random label extension and model-based adaptive label
//! extension.

// `Var::add` and friends return `Result`, and `!(x > 0.0)` checks also reject NaN.
#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod autograd;
pub mod data;
pub mod defense;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
