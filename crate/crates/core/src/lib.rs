//! Teacher/student knowledge transfer through activation attention maps.
//!
//! The crate bundles a small reverse-mode autodiff engine, DenseNet-style
//! model builders, the attention-transfer objective, a medical-imaging style
//! data pipeline, an Adam training loop and the evaluation metrics used to
//! compare transfer learning against attention transfer.

// `!(x > 0.0)` deliberately rejects NaN alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod attention;
pub mod data;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
