#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod data;
pub mod error;
pub mod fastfood;
pub mod features;
pub mod gp;
pub mod hadamard;
pub mod kernel;
pub mod lbfgs;
pub mod model;
pub mod oracle;
pub mod spectra;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
