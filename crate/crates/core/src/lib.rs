#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregator;
pub mod diffusion;
pub mod error;
pub mod hcloop;
pub mod nn;
pub mod rng;
pub mod similarity;
pub mod simrater;
pub mod spectral;
pub mod store;

pub use error::{Error, Result};
