//! Adversarial domain adaptation with attention for single-channel EEG
//! sleep staging.
//!
//! The crate contains its own small reverse-mode autodiff engine
//! ([`tensor`]), the layers built on it ([`nn`]), the model
//! ([`model`]), its losses and optimizer, the epoch data pipeline with a
//! synthetic domain-shift generator ([`data`]), metrics, training and
//! the experiment harness used by the `adast` binary.

// `!(x >= 0.0)` rejects NaN on purpose; `Var::add` and friends are tape ops.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{AdastModel, ArchConfig};
pub use tensor::{Tape, Tensor, Var};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
