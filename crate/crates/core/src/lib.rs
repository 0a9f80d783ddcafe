//! Minimum-distance estimation and lack-of-fit testing for regression models
//! observed through a Berkson measurement-error design.

// `!(x > 0.0)` style guards are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod lof;
pub mod mdfit;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod sim;
pub mod smooth;

pub use error::{Error, Result};
