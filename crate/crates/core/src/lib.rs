// `!(x > 0.0)` style checks are kept on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod textproc;
pub mod model;
pub mod bidiratt;
mod flags;
pub mod losses;
pub mod data;
pub mod trainer;
pub mod retrieval;
pub mod gradsuite;
