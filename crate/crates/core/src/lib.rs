//! MDL generalization bounds and Gaussian (product) mixture prior
//! regularizers for single-view and distributed multi-view representation
//! learning.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod distributed;
pub mod error;
pub mod experiment;
pub mod gaussian;
pub mod mixture;
pub mod nets;
pub mod prior_multi;
pub mod prior_single;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
