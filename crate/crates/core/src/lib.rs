// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod model;
pub mod rng;
pub mod selfsample;
pub mod synthdata;
pub mod training;
pub mod warp;

pub use error::{Error, Result};
