//! Any-order autoregressive language modelling with block-causal masks: a
//! two-stream transformer trained on sampled masking orders, exact single-pass
//! losses, and cached sequential or strided block-parallel decoding.

#![allow(clippy::needless_range_loop)]

pub mod corpus;
pub mod error;
pub mod evalcli;
pub mod masks;
pub mod model;
pub mod numkernel;
pub mod objective;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{ArmdError, Result};
