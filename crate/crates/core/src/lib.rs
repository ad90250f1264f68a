#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiments;
pub mod fusion;
pub mod io;
pub mod losses;
pub mod nets;
pub mod train;
pub mod types;

pub use error::{Error, Result};
