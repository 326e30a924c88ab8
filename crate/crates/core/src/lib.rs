//! Prototypical metric learning with contrastive mixup for speaker
//! verification.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod mixup;
pub mod model;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
