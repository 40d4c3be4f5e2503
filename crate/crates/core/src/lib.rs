// `!(x >= 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod eval;
pub mod io;
pub mod rng;
pub mod ssl;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
