#![no_std]
// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod dataset;
pub mod decgan;
pub mod drr;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
