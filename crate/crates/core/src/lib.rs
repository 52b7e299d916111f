//! Step-level preference optimisation for toy conditional diffusion models.
//!
//! A desk-scale laboratory for DPO-style fine-tuning of a DDIM sampler:
//! pairs of candidates are drawn from a shared noisy state, ranked by a
//! step-wise reward estimate, optionally pushed up the reward gradient, and
//! used for a logistic preference update against a frozen reference.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod nnet;
pub mod prefopt;
pub mod reward;
pub mod rng;

pub use error::{Error, Result};
