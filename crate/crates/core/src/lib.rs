// Negated comparisons reject NaN together with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boxgeom;
pub mod classifier;
pub mod diffcore;
pub mod engine;
pub mod metrics;
pub mod pcset;
pub mod synthdata;
pub mod vclearn;

mod error;

pub use error::{Error, Result};
