//! Point cloud registration with a serialized state-space encoder.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod backbone;
pub mod bench;
pub mod checks;
pub mod cli;
pub mod error;
pub mod estimator;
pub mod geom;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod matching;
pub mod nn;
pub mod numeric;
pub mod pipeline;
pub mod serialize;
pub mod spatial;
pub mod ssm;

pub use error::{Error, Result};
