//! Offline reinforcement learning by selecting from behavior candidates.
//!
//! The crate has four layers:
//!
//! - [`numerics`]: a small dense MLP with reverse-mode gradients and Adam.
//! - [`diffusion`]: a state-conditioned diffusion model of the behavior policy
//!   (VP-SDE noise schedule, denoising loss, probability-flow ODE sampler) and
//!   a tanh-squashed Gaussian baseline.
//! - [`planning`] and [`policy`]: the critic trained on in-sample planning
//!   targets, and importance-resampled action selection over behavior
//!   candidates.
//! - [`env`] and [`tabular`]: the Bidirectional-Car task and a tabular lab
//!   that checks the planning operator's properties on random MDPs.
//!
//! [`pipeline`] strings these together into a reproducible training and
//! evaluation run, and [`plot`] renders action maps and target histories.
//! The guide in `book/` walks through each piece.

// Validation is written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod planning;
pub mod plot;
pub mod policy;
pub mod rng;
pub mod tabular;

pub use error::{Error, Result};

/// The guide's code listings, compiled and run as doc-tests so the book
/// cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/car.md")]
    mod car {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/planning.md")]
    mod planning {}
    #[doc = include_str!("../../../book/src/operator-lab.md")]
    mod operator_lab {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
