// Validation uses `!(x > lo)` so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod controller;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod eval;
pub mod lqg;
pub mod nnet;
pub mod sac;
pub mod selfcheck;
pub mod target;
pub mod train;

pub use error::{Error, Result};
